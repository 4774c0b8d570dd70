//! Pool a mask stack into per-class descriptors and project them to class
//! embeddings. Shows the pyramid schedule for a few class counts.

use ecenet::class_extraction::{pooled_width, pyramid_levels, ClassExtractor, MaskStack};
use ecenet::params::{ParamBuilder, ParamStore};
use ecenet::{Tape, Tensor};

fn main() -> ecenet::Result<()> {
    for (alpha, n) in [(1.0, 4), (1.0, 19), (1.0, 150), (3.0, 19)] {
        let levels = pyramid_levels(alpha, n);
        println!("alpha={alpha} N={n:<3} levels {levels:?} -> descriptor width {}", pooled_width(&levels));
    }

    let mut store = ParamStore::new();
    let ece = ClassExtractor::new(&mut ParamBuilder::new(&mut store, 0), "ece", 1.0, 4, 8);
    let tape = Tape::no_grad();
    let p = store.bind(&tape);

    // Class 0 covers the left half, class 1 the top-right corner, the other
    // two are empty.
    let mut logits = Tensor::full(&[4, 4, 4], -4.0);
    for i in 0..4 {
        for j in 0..2 {
            logits.data_mut()[i * 4 + j] = 4.0;
        }
    }
    for (i, j) in [(0, 2), (0, 3), (1, 3)] {
        logits.data_mut()[16 + i * 4 + j] = 4.0;
    }
    let mask = MaskStack { logits: tape.constant(logits), stage: 4 };
    let d = ece.descriptor(&mask.logits)?;
    for (n, row) in d.value().data().chunks(d.shape()[1]).enumerate() {
        println!("class {n} descriptor {row:?}");
    }
    let g = ece.extract(&p, &mask)?;
    println!("embeddings: {:?}", g.shape());
    for (n, row) in g.value().data().chunks(8).enumerate() {
        let fmt: Vec<String> = row.iter().map(|v| format!("{v:+.3}")).collect();
        println!("  g[{n}] = {}", fmt.join(" "));
    }
    Ok(())
}
