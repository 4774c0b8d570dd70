//! Pointwise arithmetic with NumPy-style broadcasting, and unary activations.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (rank-aligned on the right), with
/// zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output element with the flat offsets of the two operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut k = 0;
    while k < n {
        for j in 0..last {
            f(k + j, oa + j * la, ob + j * lb);
        }
        k += last;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum `g` (shaped like the broadcast output) down to `shape`.
pub(crate) fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let st = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![0.0; numel(shape)];
    let gd = g.data();
    for_each_broadcast(out, &st, &zeros, |k, ia, _| acc[ia] += gd[k]);
    Tensor::from_parts(shape.to_vec(), acc)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, out: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts(out.to_vec(), data);
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut data = vec![0.0; numel(out)];
    for_each_broadcast(out, &sa, &sb, |k, ia, ib| data[k] = f(ad[ia], bd[ib]));
    Tensor::from_parts(out.to_vec(), data)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }
}

fn binary(a: &Var, b: &Var, op: BinOp) -> Result<Var> {
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dim(op.name(), a.shape(), b.shape()))?;
    let value = match op {
        BinOp::Add => zip_broadcast(a.value(), b.value(), &out, |x, y| x + y),
        BinOp::Sub => zip_broadcast(a.value(), b.value(), &out, |x, y| x - y),
        BinOp::Mul => zip_broadcast(a.value(), b.value(), &out, |x, y| x * y),
        BinOp::Div => zip_broadcast(a.value(), b.value(), &out, |x, y| x / y),
    };
    let (av, bv) = (a.value().clone(), b.value().clone());
    Ok(a.tape().record(op.name(), value, &[a, b], move |g, need| {
        let ga = need[0].then(|| {
            let full = match op {
                BinOp::Add | BinOp::Sub => g.clone(),
                BinOp::Mul => zip_broadcast(g, &bv, g.shape(), |g, y| g * y),
                BinOp::Div => zip_broadcast(g, &bv, g.shape(), |g, y| g / y),
            };
            sum_to_shape(&full, av.shape())
        });
        let gb = need[1].then(|| {
            let full = match op {
                BinOp::Add => g.clone(),
                BinOp::Sub => g.map(|v| -v),
                BinOp::Mul => zip_broadcast(g, &av, g.shape(), |g, x| g * x),
                BinOp::Div => {
                    // d(x/y)/dy = -x/y²
                    let q = zip_broadcast(&av, &bv, g.shape(), |x, y| -x / (y * y));
                    zip_broadcast(g, &q, g.shape(), |g, q| g * q)
                }
            };
            sum_to_shape(&full, bv.shape())
        });
        vec![ga, gb]
    }))
}

/// Derivative given `t = tanh(GELU_C·(x + 0.044715x³))` from the forward pass.
fn gelu_grad_scalar(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    // tanh(u) = 1 − 2/(e^{2u} + 1); exp is cheaper than libm tanh and the
    // form saturates cleanly at ±1.
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        binary(self, other, BinOp::Div)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var {
        self.unary("scale", self.value().map(|v| v * s), move |g| g.map(|v| v * s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary("add_scalar", self.value().map(|v| v + s), |g| g.clone())
    }

    pub fn exp(&self) -> Var {
        let y = self.value().map(f64::exp);
        let saved = y.clone();
        self.unary("exp", y, move |g| zip_broadcast(g, &saved, g.shape(), |g, y| g * y))
    }

    pub fn ln(&self) -> Var {
        let x = self.value().clone();
        self.unary("ln", x.map(f64::ln), move |g| zip_broadcast(g, &x, g.shape(), |g, x| g / x))
    }

    pub fn powf(&self, p: f64) -> Var {
        let x = self.value().clone();
        self.unary("powf", x.map(|v| v.powf(p)), move |g| {
            zip_broadcast(g, &x, g.shape(), |g, x| g * p * x.powf(p - 1.0))
        })
    }

    pub fn sigmoid(&self) -> Var {
        let y = self.value().map(sigmoid_scalar);
        let saved = y.clone();
        self.unary("sigmoid", y, move |g| {
            zip_broadcast(g, &saved, g.shape(), |g, y| g * y * (1.0 - y))
        })
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&self) -> Var {
        let x = self.value().clone();
        self.unary("log_sigmoid", x.map(log_sigmoid_scalar), move |g| {
            zip_broadcast(g, &x, g.shape(), |g, x| g * sigmoid_scalar(-x))
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        let x = self.value().clone();
        let t = x.map(gelu_tanh);
        let y = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(t.data()).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect(),
        );
        self.unary("gelu", y, move |g| {
            let d = g.data().iter().zip(x.data()).zip(t.data()).map(|((&g, &x), &t)| g * gelu_grad_scalar(x, t));
            Tensor::from_parts(g.shape().to_vec(), d.collect())
        })
    }

    pub fn relu(&self) -> Var {
        let x = self.value().clone();
        self.unary("relu", x.map(|v| v.max(0.0)), move |g| {
            zip_broadcast(g, &x, g.shape(), |g, x| if x > 0.0 { g } else { 0.0 })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1, 4], &[2, 1]), Some(vec![3, 2, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn broadcast_add_and_reduce_back() {
        let t = Tape::new();
        let a = t.leaf(Tensor::arange(&[2, 3]));
        let b = t.leaf(Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap());
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let loss = c.sum();
        let g = t.backward(&loss).unwrap();
        assert_eq!(g.wrt(&b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(&a).data(), &[1.0; 6]);
    }

    #[test]
    fn mismatched_shapes_report_both() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4]));
        match a.mul(&b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((log_sigmoid_scalar(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid_scalar(800.0).abs() < 1e-300);
        assert!((log_sigmoid_scalar(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }
}
