//! Training configuration, the optimization loop and held-out evaluation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::class_extraction::argmax_classes;
use crate::data::{gen_sample, SegSample};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{overall_loss, Checkpoint, EceNet, EncoderConfig, LossWeights, ModelConfig, NamedTensor};
use crate::params::ParamStore;
use crate::semantics_attention::UpdaterKind;
use crate::tensor::Tensor;

/// Environment variable supplying the seed when a config or command leaves
/// it unset.
pub const SEED_ENV: &str = "ECENET_SEED";

/// Held-out samples are drawn from this index onwards of the seed's stream,
/// far past anything training consumes.
pub const HELDOUT_START: u64 = 1 << 40;

/// Seed from [`SEED_ENV`], or 0 when unset.
pub fn default_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_classes: usize,
    pub alpha: f64,
    pub width: usize,
    pub heads: usize,
    pub encoder_widths: [usize; 4],
    pub encoder_blocks: usize,
    pub use_fr: bool,
    pub updater: UpdaterKind,
    pub loss: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: u32,
    pub steps: u32,
    pub batch_size: usize,
    /// Evaluate on the held-out set every this many steps (0: only at the
    /// end).
    pub eval_interval: u32,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            seed: 0,
            image_size: 64,
            n_classes: m.n_classes,
            alpha: m.alpha,
            width: m.width,
            heads: m.heads,
            encoder_widths: m.encoder.widths,
            encoder_blocks: m.encoder.blocks,
            use_fr: m.use_fr,
            updater: m.updater,
            loss: LossWeights::default(),
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 100,
            steps: 2000,
            batch_size: 8,
            eval_interval: 500,
            eval_samples: 64,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

impl fmt::Display for UpdaterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdaterKind::Gated => "gated",
            UpdaterKind::Plus => "plus",
        })
    }
}

impl FromStr for UpdaterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(UpdaterKind::Gated),
            "plus" => Ok(UpdaterKind::Plus),
            _ => Err(Error::Config(format!("unknown updater {s:?} (expected gated or plus)"))),
        }
    }
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment. Keys left out keep
    /// their defaults, except `seed`, which falls back to [`SEED_ENV`].
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seed = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            match key {
                "seed" => seed = Some(parse_value(key, value)?),
                "image_size" => cfg.image_size = parse_value(key, value)?,
                "n_classes" => cfg.n_classes = parse_value(key, value)?,
                "alpha" => cfg.alpha = parse_value(key, value)?,
                "width" => cfg.width = parse_value(key, value)?,
                "heads" => cfg.heads = parse_value(key, value)?,
                "encoder_widths" => {
                    let ws = value
                        .split(',')
                        .map(|w| parse_value::<usize>(key, w.trim()))
                        .collect::<Result<Vec<_>>>()?;
                    cfg.encoder_widths = ws
                        .try_into()
                        .map_err(|_| Error::Config("encoder_widths needs four values".into()))?;
                }
                "encoder_blocks" => cfg.encoder_blocks = parse_value(key, value)?,
                "use_fr" => cfg.use_fr = parse_bool(key, value)?,
                "updater" => cfg.updater = value.parse()?,
                "lambda_div" => cfg.loss.lambda_div = parse_value(key, value)?,
                "lambda_focal" => cfg.loss.lambda_focal = parse_value(key, value)?,
                "lambda_dice" => cfg.loss.lambda_dice = parse_value(key, value)?,
                "focal_gamma" => cfg.loss.focal_gamma = parse_value(key, value)?,
                "focal_alpha" => cfg.loss.focal_alpha = parse_value(key, value)?,
                "lr" => cfg.lr = parse_value(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_value(key, value)?,
                "beta1" => cfg.beta1 = parse_value(key, value)?,
                "beta2" => cfg.beta2 = parse_value(key, value)?,
                "warmup_steps" => cfg.warmup_steps = parse_value(key, value)?,
                "steps" => cfg.steps = parse_value(key, value)?,
                "batch_size" => cfg.batch_size = parse_value(key, value)?,
                "eval_interval" => cfg.eval_interval = parse_value(key, value)?,
                "eval_samples" => cfg.eval_samples = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        cfg.seed = match seed {
            Some(s) => s,
            None => default_seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let w = self.encoder_widths;
        format!(
            "seed = {}\nimage_size = {}\nn_classes = {}\nalpha = {:?}\nwidth = {}\nheads = {}\n\
             encoder_widths = {}, {}, {}, {}\nencoder_blocks = {}\nuse_fr = {}\nupdater = {}\n\
             lambda_div = {:?}\nlambda_focal = {:?}\nlambda_dice = {:?}\nfocal_gamma = {:?}\nfocal_alpha = {:?}\n\
             lr = {:?}\nweight_decay = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\nwarmup_steps = {}\nsteps = {}\n\
             batch_size = {}\neval_interval = {}\neval_samples = {}\n",
            self.seed,
            self.image_size,
            self.n_classes,
            self.alpha,
            self.width,
            self.heads,
            w[0],
            w[1],
            w[2],
            w[3],
            self.encoder_blocks,
            self.use_fr,
            self.updater,
            self.loss.lambda_div,
            self.loss.lambda_focal,
            self.loss.lambda_dice,
            self.loss.focal_gamma,
            self.loss.focal_alpha,
            self.lr,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.warmup_steps,
            self.steps,
            self.batch_size,
            self.eval_interval,
            self.eval_samples,
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_classes: self.n_classes,
            alpha: self.alpha,
            width: self.width,
            heads: self.heads,
            encoder: EncoderConfig {
                patch: 4,
                widths: self.encoder_widths,
                blocks: self.encoder_blocks,
            },
            use_fr: self.use_fr,
            updater: self.updater,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let rates = [self.lr, self.weight_decay];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if ![self.beta1, self.beta2].iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Training sample `i` of this run.
    pub fn train_sample(&self, i: u64) -> SegSample {
        gen_sample(self.seed, i, self.image_size, self.n_classes)
    }

    /// The held-out evaluation set of this run.
    pub fn heldout(&self) -> Vec<SegSample> {
        (0..self.eval_samples as u64)
            .into_par_iter()
            .map(|i| gen_sample(self.seed, HELDOUT_START + i, self.image_size, self.n_classes))
            .collect()
    }
}

/// One metric-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub ce: f64,
    pub mask: f64,
    pub div: f64,
    pub miou: Option<f64>,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} ce={:.6} mask={:.6} div={:.6} miou=",
            self.step, self.loss, self.ce, self.mask, self.div
        )?;
        match self.miou {
            Some(m) => write!(f, "{m:.6}"),
            None => f.write_str("-"),
        }
    }
}

/// Decoupled-weight-decay Adam with linear warmup. Parameters and both
/// moments are kept on the `f32` grid after every step, so a checkpoint
/// captures the optimizer state exactly.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u32,
    pub step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            warmup_steps: cfg.warmup_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate used for step `t` (1-based).
    pub fn lr_at(&self, t: u32) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = store.iter().nth(k).map(|(_, p)| p.decay).unwrap_or(false) && self.weight_decay > 0.0;
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = snap(b1 * m[i] + (1.0 - b1) * g[i]);
                v[i] = snap(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
                let mut x = p[i];
                if decay {
                    x -= lr * self.weight_decay * x;
                }
                x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = snap(x);
            }
        }
    }

    /// First and second moments named after their parameters.
    pub fn moments(&self, store: &ParamStore) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (k, (_, p)) in store.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{}.m", p.name),
                value: self.m[k].clone(),
            });
            out.push(NamedTensor {
                name: format!("{}.v", p.name),
                value: self.v[k].clone(),
            });
        }
        out
    }
}

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

pub struct EvalReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Argmax predictions of `net` on each sample, scored against its labels.
pub fn evaluate(net: &EceNet, store: &ParamStore, samples: &[SegSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation on an empty dataset"));
    }
    let n = net.config.n_classes;
    let parts = samples
        .par_iter()
        .map(|s| {
            s.labels.validate(n)?;
            let logits = net.predict(store, &s.image)?;
            let mut cm = ConfusionMatrix::new(n);
            cm.add(&s.labels.data, &argmax_classes(&logits))?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(n);
    for p in &parts {
        confusion.merge(p)?;
    }
    Ok(EvalReport {
        miou: confusion.miou()?,
        per_class: confusion.per_class_iou(),
        confusion,
    })
}

pub struct TrainOutcome {
    pub net: EceNet,
    pub store: ParamStore,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogLine>,
    /// Held-out mIoU after the last step, if `eval_samples > 0`.
    pub final_miou: Option<f64>,
}

/// Run the optimization loop. `on_log` sees every metric line as it is
/// produced.
pub fn train(cfg: &TrainConfig, mut on_log: impl FnMut(&LogLine)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let hash = model_cfg.hash();
    let (net, mut store) = EceNet::init(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&store, cfg);
    let heldout = cfg.heldout();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut final_miou = None;

    for step in 1..=cfg.steps as u64 {
        let mut grad_sum: Option<Vec<Tensor>> = None;
        let (mut loss, mut ce, mut mask, mut div) = (0.0, 0.0, 0.0, 0.0);
        for b in 0..cfg.batch_size as u64 {
            let sample = cfg.train_sample((step - 1) * cfg.batch_size as u64 + b);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let out = net.forward(&p, &tape.constant(sample.image))?;
            let parts = overall_loss(&out, &sample.labels, &cfg.loss)?;
            let total = parts.total.item();
            if !total.is_finite() {
                let culprit = tape
                    .first_non_finite()
                    .map(|nf| format!("first non-finite tensor: node {} ({}) of shape {:?}", nf.node, nf.op, nf.shape))
                    .unwrap_or_else(|| "no non-finite intermediate found".into());
                return Err(Error::Numerical(format!("loss is {total} at step {step}; {culprit}")));
            }
            loss += total;
            ce += parts.ce;
            mask += parts.mask;
            div += parts.div;
            let grads = p.gradients(&tape.backward(&parts.total)?);
            grad_sum = Some(match grad_sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        let bs = cfg.batch_size as f64;
        let mut grads = grad_sum.expect("batch_size > 0");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x /= bs);
        }
        if let Some((k, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            let name = &store.iter().nth(k).expect("index in range").1.name;
            return Err(Error::Numerical(format!("non-finite gradient for {name} at step {step}")));
        }
        opt.update(&mut store, &grads);

        let last = step == cfg.steps as u64;
        let due = last || (cfg.eval_interval > 0 && step % cfg.eval_interval as u64 == 0);
        let miou = if due && !heldout.is_empty() {
            Some(evaluate(&net, &store, &heldout)?.miou)
        } else {
            None
        };
        if last {
            final_miou = miou;
        }
        let line = LogLine {
            step,
            loss: loss / bs,
            ce: ce / bs,
            mask: mask / bs,
            div: div / bs,
            miou,
        };
        on_log(&line);
        log.push(line);
    }

    let checkpoint = Checkpoint::from_store(&store, cfg.steps, opt.moments(&store), hash);
    Ok(TrainOutcome {
        net,
        store,
        checkpoint,
        log,
        final_miou,
    })
}
