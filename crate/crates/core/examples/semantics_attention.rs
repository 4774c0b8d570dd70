//! One attention-and-update step: features query the class embeddings, the
//! similarity map becomes a new mask stack, and the gated updater folds the
//! embeddings pooled from it back in.

use ecenet::class_extraction::ClassExtractor;
use ecenet::params::{ParamBuilder, ParamStore};
use ecenet::semantics_attention::{SemanticsAttention, UpdaterKind};
use ecenet::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ecenet::Result<()> {
    let (c, n, h, w) = (16, 4, 6, 6);
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, 3);
    let ece = ClassExtractor::new(&mut pb, "ece", 1.0, n, c);
    let sau = SemanticsAttention::new(&mut pb, "sau", c, 2, UpdaterKind::Gated)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[h * w, c], &mut rng);
    let g = Tensor::randn(&[n, c], &mut rng);
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    let out = sau.step(&p, &ece, &tape.constant(x.clone()), &tape.constant(g.clone()), h, w, 2)?;

    println!("similarity {:?} -> mask {:?}", out.sim.shape(), out.new_mask.logits.shape());
    println!("argmax class per pixel:");
    for row in out.new_mask.argmax().chunks(w) {
        println!("  {row:?}");
    }
    println!("features moved by {:.4} (max abs)", out.enhanced.value().max_abs_diff(&x));
    // The projection starts at zero, so a fresh block leaves g untouched.
    println!("embeddings moved by {:.4} (fresh block)", out.updated_g.value().max_abs_diff(&g));

    let id = store.find("sau.update.psi2_norm.beta").expect("projection bias");
    store.set(id, Tensor::full(&[c], 0.5))?;
    let p = store.bind(&tape);
    let out = sau.step(&p, &ece, &tape.constant(x), &tape.constant(g.clone()), h, w, 2)?;
    println!("embeddings moved by {:.4} (projection bias 0.5, gated)", out.updated_g.value().max_abs_diff(&g));
    Ok(())
}
