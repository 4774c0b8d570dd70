//! Score a saved checkpoint on freshly generated scenes and print the
//! confusion matrix.
//!
//! cargo run --release --example evaluate_miou -- [run_dir] [count]

use std::path::PathBuf;

use ecenet::cli::{load_model, CHECKPOINT_FILE};
use ecenet::data::gen_shapes_from;
use ecenet::train::{evaluate, HELDOUT_START};

fn main() -> ecenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/shapes"));
    let count: usize = args.next().map(|s| s.parse().expect("count")).unwrap_or(64);

    let (net, store) = load_model(&dir.join(CHECKPOINT_FILE), None)?;
    let n = net.config.n_classes;
    // Indices far past anything a training run draws.
    let samples = gen_shapes_from(99, HELDOUT_START, count, 64, n)?;
    let report = evaluate(&net, &store, &samples)?;

    println!("confusion (rows = ground truth):");
    for gt in 0..n {
        let row: Vec<String> = (0..n).map(|p| format!("{:>7}", report.confusion.get(gt, p))).collect();
        println!("  {gt}: {}", row.join(""));
    }
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c} IoU {v:.4}"),
            None => println!("class {c} absent"),
        }
    }
    println!("mIoU {:.4}", report.miou);
    Ok(())
}
