//! Predict one generated scene with a saved checkpoint and write both the
//! prediction and the ground truth as PGM images.
//!
//! cargo run --release --example export_masks -- [run_dir] [index]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use ecenet::class_extraction::{argmax_classes, write_pgm};
use ecenet::cli::{load_model, CHECKPOINT_FILE};
use ecenet::data::gen_sample;

fn main() -> ecenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/shapes"));
    let index: u64 = args.next().map(|s| s.parse().expect("index")).unwrap_or(0);

    let (net, store) = load_model(&dir.join(CHECKPOINT_FILE), None)?;
    let n = net.config.n_classes;
    let sample = gen_sample(1234, index, 64, n);
    let pred = argmax_classes(&net.predict(&store, &sample.image)?);
    let agree = pred.iter().zip(&sample.labels.data).filter(|(a, b)| a == b).count();

    for (name, labels) in [("pred.pgm", &pred), ("truth.pgm", &sample.labels.data)] {
        let path = dir.join(name);
        write_pgm(&mut BufWriter::new(File::create(&path)?), labels, 64, 64, n)?;
        println!("wrote {}", path.display());
    }
    println!("pixel accuracy {:.4}", agree as f64 / pred.len() as f64);
    Ok(())
}
