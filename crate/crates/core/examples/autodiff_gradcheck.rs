//! Build a small expression on the tape, pull gradients back through it and
//! compare them with central differences. Then run the shipped per-op suite.

use ecenet::gradcheck::{grad_check_many, run_op_suite, GradCheckOptions, OP_TOLERANCE};
use ecenet::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ecenet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[3, 4], &mut rng);
    let w = Tensor::randn(&[4, 2], &mut rng);

    // loss = Σ softmax(x·w, axis 1) ⊙ sigmoid(x·w)
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let z = xv.matmul(&wv)?;
    let loss = z.softmax(1)?.mul(&z.sigmoid())?.sum();
    let grads = tape.backward(&loss)?;
    println!("loss = {:.6}", loss.item());
    println!("dloss/dw =\n{:?}", grads.wrt(&wv).data());

    let err = grad_check_many(
        |v| {
            let z = v[0].matmul(&v[1])?;
            Ok(z.softmax(1)?.mul(&z.sigmoid())?.sum())
        },
        &[x, w],
        &GradCheckOptions::default(),
    )?;
    println!("max relative error vs finite differences: {err:.2e}");

    let results = run_op_suite(&[0, 1, 2], 1e-5)?;
    let worst = results.iter().map(|r| r.max_err).fold(0.0, f64::max);
    println!("{} operations checked, worst {worst:.2e} (tolerance {OP_TOLERANCE:e})", results.len());
    Ok(())
}
