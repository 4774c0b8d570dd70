use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.unary("reshape", value, move |g| g.reshape(&orig).expect("reshape grad")))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let value = self.value().permuted(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.unary("permute", value, move |g| g.permuted(&inverse).expect("permute grad")))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::dim("narrow", self.shape(), &[axis, start, len]));
        }
        let shape = self.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let value = Tensor::from_parts(oshape, out);
        Ok(self.unary("narrow", value, move |g| {
            let mut full = vec![0.0; outer * n * inner];
            let gd = g.data();
            for o in 0..outer {
                full[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::from_parts(shape, full)
        }))
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::dim("concat", first.shape(), &[axis]));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&p.value().data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::from_parts(shape.clone(), out);
        let refs: Vec<&Var> = parts.iter().collect();
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(first.tape().record("concat", value, &refs, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(extents.len());
            for ((&e, ps), &nd) in extents.iter().zip(&part_shapes).zip(need) {
                if nd {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + e * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(ps.clone(), d)));
                } else {
                    grads.push(None);
                }
                offset += e;
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{Tape, Var};
    use crate::tensor::Tensor;

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let t = Tape::new();
        let a = t.constant(Tensor::arange(&[2, 2, 3]));
        let b = t.constant(Tensor::full(&[2, 1, 3], -1.0));
        let c = Var::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().value(), a.value());
        assert_eq!(c.narrow(1, 2, 1).unwrap().value(), b.value());
    }

    #[test]
    fn concat_rejects_mismatch() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 3]));
        assert!(Var::concat(&[a, b], 1).is_err());
    }
}
