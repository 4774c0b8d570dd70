//! Generate synthetic shape scenes and print one label map as text.
//!
//! cargo run --release --example generate_dataset -- [seed] [out_dir]

use std::path::PathBuf;

use ecenet::data::{gen_shapes, save_dataset};

fn main() -> ecenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let out = args.next().map(PathBuf::from);

    let samples = gen_shapes(seed, 16, 64, 4)?;
    let glyph = *b".#o^";
    let first = &samples[0].labels;
    for y in (0..first.height).step_by(2) {
        let row: Vec<u8> = (0..first.width).step_by(1).map(|x| glyph[first.get(y, x) as usize]).collect();
        println!("{}", String::from_utf8_lossy(&row));
    }
    let mut counts = [0usize; 4];
    for s in &samples {
        for &l in &s.labels.data {
            counts[l as usize] += 1;
        }
    }
    println!("pixel share per class over {} samples: {:?}", samples.len(), counts.map(|c| c as f64 / (16.0 * 4096.0)));
    if let Some(dir) = out {
        save_dataset(&dir, &samples)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
