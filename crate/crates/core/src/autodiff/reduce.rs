//! Reductions and axis-wise normalizations.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

fn check_axis(op: &'static str, v: &Var, axis: usize) -> Result<()> {
    if axis >= v.rank() {
        return Err(Error::dim(op, v.shape(), &[axis]));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

/// Apply `f` to every 1-D lane along `axis`. The lane is gathered into a
/// contiguous buffer, transformed in place, and scattered back.
fn map_lanes(x: &Tensor, axis: usize, mut f: impl FnMut(&mut [f64])) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = x.data().to_vec();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                lane[k] = out[base + k * inner];
            }
            f(&mut lane);
            for k in 0..n {
                out[base + k * inner] = lane[k];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Two-input lane map used by backward passes: `f(lane_a, lane_b)` writes the
/// result into `lane_a`.
fn map_lanes2(a: &Tensor, b: &Tensor, axis: usize, mut f: impl FnMut(&mut [f64], &[f64])) -> Tensor {
    let (outer, n, inner) = split_axis(a.shape(), axis);
    let mut out = a.data().to_vec();
    let bd = b.data();
    let mut la = vec![0.0; n];
    let mut lb = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                la[k] = out[base + k * inner];
                lb[k] = bd[base + k * inner];
            }
            f(&mut la, &lb);
            for k in 0..n {
                out[base + k * inner] = la[k];
            }
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

fn softmax_lane(lane: &mut [f64]) {
    let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in lane.iter_mut() {
        *v /= s;
    }
}

fn log_softmax_lane(lane: &mut [f64]) {
    let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for v in lane.iter_mut() {
        *v -= lse;
    }
}

/// Expand a reduced gradient (shape with `axis` removed or kept as 1) back
/// over `axis`, scaling each lane element by `f(k)`.
fn expand_along(g: &Tensor, full: &[usize], axis: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
    let (outer, n, inner) = split_axis(full, axis);
    let gd = g.data();
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                let r = o * inner + i;
                out[o * n * inner + k * inner + i] = gd[r] * f(r, k);
            }
        }
    }
    Tensor::from_parts(full.to_vec(), out)
}

impl Var {
    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        let s = self.value().sum();
        self.unary("sum", Tensor::scalar(s), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("sum_axis", self, axis)?;
        let shape = self.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value().data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &xd[o * n * inner + k * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), out);
        Ok(self.unary("sum_axis", value, move |g| expand_along(g, &shape, axis, |_, _| 1.0)))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("mean_axis", self, axis)?;
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Maximum along `axis`. The gradient flows to the arg-max only; ties go
    /// to the lowest index.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("max_axis", self, axis)?;
        let shape = self.shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value().data();
        let mut vals = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = xd[o * n * inner + k * inner + i];
                    let r = o * inner + i;
                    if v > vals[r] || k == 0 {
                        vals[r] = v;
                        arg[r] = k;
                    }
                }
            }
        }
        let value = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), vals);
        Ok(self.unary("max_axis", value, move |g| {
            expand_along(g, &shape, axis, |r, k| if arg[r] == k { 1.0 } else { 0.0 })
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        check_axis("softmax", self, axis)?;
        let y = map_lanes(self.value(), axis, softmax_lane);
        let saved = y.clone();
        Ok(self.unary("softmax", y, move |g| {
            map_lanes2(g, &saved, axis, |gl, yl| {
                let dot: f64 = gl.iter().zip(yl).map(|(a, b)| a * b).sum();
                for (gv, &yv) in gl.iter_mut().zip(yl) {
                    *gv = yv * (*gv - dot);
                }
            })
        }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self, axis)?;
        let y = map_lanes(self.value(), axis, log_softmax_lane);
        let saved = y.clone();
        Ok(self.unary("log_softmax", y, move |g| {
            map_lanes2(g, &saved, axis, |gl, yl| {
                let s: f64 = gl.iter().sum();
                for (gv, &lv) in gl.iter_mut().zip(yl) {
                    *gv -= lv.exp() * s;
                }
            })
        }))
    }

    /// Zero-mean, unit-variance (biased estimate) along `axis`.
    pub fn standardize(&self, axis: usize, eps: f64) -> Result<Var> {
        check_axis("standardize", self, axis)?;
        let shape = self.shape().to_vec();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut inv_std = Vec::with_capacity(outer * inner);
        let y = map_lanes(self.value(), axis, |lane| {
            let n = lane.len() as f64;
            let mu = lane.iter().sum::<f64>() / n;
            let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for v in lane.iter_mut() {
                *v = (*v - mu) * is;
            }
        });
        let saved = y.clone();
        Ok(self.unary("standardize", y, move |g| {
            let mut lane_idx = 0;
            map_lanes2(g, &saved, axis, |gl, yl| {
                let n = gl.len() as f64;
                let mg = gl.iter().sum::<f64>() / n;
                let mgy = gl.iter().zip(yl).map(|(a, b)| a * b).sum::<f64>() / n;
                let is = inv_std[lane_idx];
                lane_idx += 1;
                for (gv, &yv) in gl.iter_mut().zip(yl) {
                    *gv = is * (*gv - mg - yv * mgy);
                }
            })
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn softmax_analytic_case() {
        let t = Tape::new();
        let x = t.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
        let y = x.softmax(0).unwrap();
        assert!((y.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((y.value().data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_constant_lane_is_uniform() {
        let t = Tape::new();
        let x = t.constant(Tensor::full(&[3, 5], 7.5));
        let y = x.softmax(1).unwrap();
        for &v in y.value().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let t = Tape::new();
        let x = t.leaf(Tensor::new(&[3, 1], vec![2.0, 2.0, 1.0]).unwrap());
        let m = x.max_axis(0, false).unwrap();
        let g = t.backward(&m.sum()).unwrap();
        assert_eq!(g.wrt(&x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_axis_middle() {
        let t = Tape::new();
        let x = t.constant(Tensor::arange(&[2, 3, 2]));
        let s = x.sum_axis(1, false).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.value().data(), &[6.0, 9.0, 24.0, 27.0]);
        let k = x.sum_axis(1, true).unwrap();
        assert_eq!(k.shape(), &[2, 1, 2]);
    }

    #[test]
    fn standardize_moments() {
        let t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap());
        let y = x.standardize(1, 0.0).unwrap();
        for row in y.value().data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| a * a).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
