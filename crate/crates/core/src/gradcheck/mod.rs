//! Central-difference verification of tape gradients.

mod suite;

pub use suite::{end_to_end_check, op_cases, run_op_suite, CaseResult, OpCase, E2E_TOLERANCE, OP_TOLERANCE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per input (sampled
    /// deterministically); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Largest `|analytic − numeric| / max(1, |numeric|)` over the checked
/// coordinates of `x`, for a scalar-valued `f`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let opts = GradCheckOptions { eps, ..Default::default() };
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), &opts)
}

/// [`grad_check`] over several inputs at once. Every input is a trainable leaf
/// on the same tape.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&vars)?;
        scalar_of(&out)
    };

    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&leaves)?;
    scalar_of(&out)?;
    let grads = tape.backward(&out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + opts.eps;
            let fp = eval(&work)?;
            work[i].data_mut()[k] = orig - opts.eps;
            let fm = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient error at input {i}, coordinate {k}")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(v: &Var) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
