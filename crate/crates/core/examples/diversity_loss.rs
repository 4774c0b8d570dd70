//! How the diversity loss reacts to channels that spread out versus channels
//! that pile onto the same pixels.

use ecenet::feature_reconstruction::diversity_loss;
use ecenet::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(y: &Tensor) -> f64 {
    let tape = Tape::no_grad();
    diversity_loss(&tape.constant(y.clone())).expect("C×H×W input").item()
}

fn main() {
    let (c, side) = (4, 4);
    println!("flat channels:          {:.4}", loss(&Tensor::full(&[c, side, side], 1.0)));

    // Every channel peaks on the same pixel.
    let mut stacked = Tensor::zeros(&[c, side, side]);
    for ch in 0..c {
        stacked.data_mut()[ch * side * side] = 8.0;
    }
    println!("peaks on one pixel:     {:.4}", loss(&stacked));

    for t in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let mut spread = Tensor::zeros(&[c, side, side]);
        for ch in 0..c {
            spread.data_mut()[ch * side * side + ch * 5] = t;
        }
        println!("distinct peaks, t={t:>4}: {:.4}", loss(&spread));
    }

    let noise = Tensor::randn(&[c, side, side], &mut ChaCha8Rng::seed_from_u64(1));
    println!("gaussian noise:         {:.4}", loss(&noise));
}
