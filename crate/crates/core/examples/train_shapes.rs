//! Train on synthetic shapes and save a checkpoint that `evaluate_miou` and
//! `export_masks` can load.
//!
//! cargo run --release --example train_shapes -- [steps] [out_dir]
//!
//! The reference run uses 2000 steps; a few hundred already give a usable
//! model.

use std::fs;
use std::path::PathBuf;

use ecenet::cli::{CHECKPOINT_FILE, CONFIG_FILE};
use ecenet::train::{train, TrainConfig};

fn main() -> ecenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u32 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(300);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/shapes"));

    let cfg = TrainConfig {
        steps,
        eval_interval: 100,
        ..TrainConfig::default()
    };
    let outcome = train(&cfg, |line| {
        if line.miou.is_some() || line.step % 25 == 0 {
            println!("{line}");
        }
    })?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    println!("held-out mIoU {:.4}, saved to {}", outcome.final_miou.unwrap_or(f64::NAN), out.display());
    Ok(())
}
