use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strided view of a row-major matrix: `(data, rows, cols, transposed)`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            transposed: !self.transposed,
            ..self
        }
    }

    fn strides(&self) -> (isize, isize) {
        // Underlying storage is row-major with `cols` (pre-transpose) columns.
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above and MatRef construction guarantee every index
    // reached through the strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_t(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    let mut c = vec![0.0; a.rows * b.cols];
    gemm(a, b, &mut c, 0.0);
    c
}

fn mat2(op: &'static str, v: &Var) -> Result<(usize, usize)> {
    match *v.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, v.shape(), &[])),
    }
}

impl Var {
    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (m, k) = mat2("matmul", self)?;
        let (k2, n) = mat2("matmul", other)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let (a, b) = (self.value().clone(), other.value().clone());
        let out = matmul_t(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n));
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape().record("matmul", value, &[self, other], move |g, need| {
            let gm = MatRef::new(g.data(), m, n);
            let ga = need[0].then(|| {
                Tensor::from_parts(vec![m, k], matmul_t(gm, MatRef::new(b.data(), k, n).t()))
            });
            let gb = need[1].then(|| {
                Tensor::from_parts(vec![k, n], matmul_t(MatRef::new(a.data(), m, k).t(), gm))
            });
            vec![ga, gb]
        }))
    }

    /// Affine map on rows: `x[L×in] · wᵀ + b` with `w: [out×in]`, `b: [out]`.
    pub fn linear(&self, w: &Var, b: &Var) -> Result<Var> {
        let (l, d_in) = mat2("linear", self)?;
        let (d_out, w_in) = mat2("linear", w)?;
        if w_in != d_in || b.shape() != [d_out] {
            return Err(Error::dim("linear", self.shape(), w.shape()));
        }
        let (x, wv) = (self.value().clone(), w.value().clone());
        let mut out = vec![0.0; l * d_out];
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(b.value().data());
        }
        gemm(MatRef::new(x.data(), l, d_in), MatRef::new(wv.data(), d_out, d_in).t(), &mut out, 1.0);
        let value = Tensor::from_parts(vec![l, d_out], out);
        Ok(self.tape().record("linear", value, &[self, w, b], move |g, need| {
            let gm = MatRef::new(g.data(), l, d_out);
            let gx = need[0].then(|| {
                Tensor::from_parts(vec![l, d_in], matmul_t(gm, MatRef::new(wv.data(), d_out, d_in)))
            });
            let gw = need[1].then(|| {
                Tensor::from_parts(vec![d_out, d_in], matmul_t(gm.t(), MatRef::new(x.data(), l, d_in)))
            });
            let gb = need[2].then(|| {
                let mut s = vec![0.0; d_out];
                for row in g.data().chunks(d_out) {
                    for (a, v) in s.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_parts(vec![d_out], s)
            });
            vec![gx, gw, gb]
        }))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Var> {
        mat2("transpose", self)?;
        self.permute(&[1, 0])
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn strided_gemm_transposes() {
        let a = Tensor::arange(&[2, 3]);
        let b = Tensor::arange(&[2, 3]);
        // a · bᵀ
        let c = super::matmul_t(
            super::MatRef::new(a.data(), 2, 3),
            super::MatRef::new(b.data(), 2, 3).t(),
        );
        assert_eq!(c, vec![5.0, 14.0, 14.0, 50.0]);
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let t = Tape::new();
        let x = t.constant(Tensor::arange(&[3, 2]));
        let w = t.constant(Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let b = t.constant(Tensor::new(&[2], vec![0.25, -3.0]).unwrap());
        let y = x.linear(&w, &b).unwrap();
        let y2 = x.matmul(&w.t().unwrap()).unwrap().add(&b).unwrap();
        assert_eq!(y.value(), y2.value());
    }
}
