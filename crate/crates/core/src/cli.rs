//! Command-line front end. Machine-readable results go to `out`, diagnostics
//! to `err`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or shape
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::class_extraction::{argmax_classes, write_pgm};
use crate::data::{gen_shapes, load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{end_to_end_check, run_op_suite, E2E_TOLERANCE, OP_TOLERANCE};
use crate::model::{Checkpoint, EceNet};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{default_seed, evaluate, train, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.ecen";
pub const METRICS_FILE: &str = "metrics.log";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "ecenet", about = "Train and evaluate the explicit class embedding segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic image/label TNSR pairs.
    GenData {
        /// Defaults to $ECENET_SEED, else 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; writes checkpoint, metric log and the
    /// resolved config into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU and mIoU of a checkpoint on a TNSR dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Also check the full training loss of a micro model.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Write the argmax class map of one image as a binary PGM.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Dimension { .. } | Error::Contract(_) | Error::Data(_) | Error::Io(_) => 2,
        Error::Numerical(_) => 3,
    }
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenData {
            seed,
            count,
            size,
            classes,
            out: dir,
        } => {
            if size == 0 || !size.is_multiple_of(32) {
                return Err(Error::Config(format!("--size must be a positive multiple of 32, got {size}")));
            }
            let seed = match seed {
                Some(s) => s,
                None => default_seed()?,
            };
            let samples = gen_shapes(seed, count, size, classes)?;
            save_dataset(&dir, &samples)?;
            writeln!(out, "samples={count} size={size} classes={classes} seed={seed}")?;
            Ok(0)
        }
        Command::Train { config, out: dir } => {
            let cfg = TrainConfig::parse(&read_text(&config)?)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
            let mut log = fs::File::create(dir.join(METRICS_FILE))?;
            let mut io_err = None;
            let outcome = train(&cfg, |line| {
                let r = writeln!(log, "{line}").and_then(|_| writeln!(out, "{line}"));
                if let Err(e) = r {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            writeln!(err, "wrote {}", dir.join(CHECKPOINT_FILE).display())?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data,
            config,
        } => {
            let (net, store) = load_model(&checkpoint, config.as_deref())?;
            let samples = load_dataset(&data)?;
            let report = evaluate(&net, &store, &samples)?;
            writeln!(out, "class iou")?;
            for (c, iou) in report.per_class.iter().enumerate() {
                match iou {
                    Some(v) => writeln!(out, "{c} {v:.4}")?,
                    None => writeln!(out, "{c} -")?,
                }
            }
            writeln!(out, "mIoU {:.4}", report.miou)?;
            Ok(0)
        }
        Command::Gradcheck { full, seeds } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (0..seeds).collect();
            let mut failed = false;
            for r in run_op_suite(&seed_list, 1e-5)? {
                let ok = r.max_err < OP_TOLERANCE;
                failed |= !ok;
                writeln!(out, "{} max_err={:.3e} {}", r.name, r.max_err, verdict(ok))?;
            }
            if full {
                let e = end_to_end_check(0, 2)?;
                let ok = e < E2E_TOLERANCE;
                failed |= !ok;
                writeln!(out, "end_to_end max_err={e:.3e} {}", verdict(ok))?;
            }
            if failed {
                writeln!(err, "gradient check above tolerance")?;
                return Ok(3);
            }
            Ok(0)
        }
        Command::ExportMasks {
            checkpoint,
            image,
            out: path,
            config,
        } => {
            let (net, store) = load_model(&checkpoint, config.as_deref())?;
            let img = Tensor::read_tnsr(&mut fs::File::open(&image)?)?;
            let logits = net.predict(&store, &img)?;
            let (h, w) = (logits.shape()[1], logits.shape()[2]);
            let labels = argmax_classes(&logits);
            let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
            write_pgm(&mut f, &labels, h, w, net.config.n_classes)?;
            f.flush()?;
            writeln!(err, "wrote {} ({w}×{h})", path.display())?;
            Ok(0)
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

/// Rebuild the model a checkpoint was trained with. The architecture comes
/// from the config file, whose hash must match the checkpoint's.
pub fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(EceNet, ParamStore)> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(CONFIG_FILE),
    };
    let cfg = TrainConfig::parse(&read_text(&config_path)?)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model_cfg = cfg.model_config();
    if ck.config_hash != model_cfg.hash() {
        return Err(Error::Data(format!(
            "checkpoint {} was not trained with config {}",
            checkpoint.display(),
            config_path.display()
        )));
    }
    let (net, mut store) = EceNet::init(model_cfg, cfg.seed)?;
    ck.apply_to(&mut store)?;
    Ok((net, store))
}
