//! The shipped finite-difference suite: every differentiable tensor
//! operation and parameterized block, plus an end-to-end check of the full
//! training loss on a micro model.
//!
//! Each case is reduced to a scalar by contracting its output with a fixed
//! random tensor, so every output coordinate contributes to the check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_many, GradCheckOptions};
use crate::autodiff::{Tape, Var};
use crate::class_extraction::{ClassExtractor, MaskHead, MaskStack};
use crate::data::{gen_sample, LabelMap};
use crate::error::{Error, Result};
use crate::feature_reconstruction::{diversity_loss, FeatureReconstruction};
use crate::model::{cross_entropy_loss, dice_loss, focal_loss, overall_loss, EceNet, EncoderConfig, LossWeights, ModelConfig};
use crate::nn::{Attention, ChannelNorm, Conv1x1, Conv2d, GhostExpand, InstanceNorm, LayerNorm, Linear, MlpBlock, SeBlock};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::semantics_attention::{SemanticsAttention, UpdaterKind};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const E2E_TOLERANCE: f64 = 1e-4;

type OpFn = Box<dyn Fn(&[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    /// Inputs for one draw and the operation applied to them.
    pub build: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, OpFn),
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    /// Worst relative error over all seeds.
    pub max_err: f64,
}

fn rn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Normal draws pushed at least 0.2 away from zero (for kinks at 0).
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng).map(|v| v.signum() * (v.abs() + 0.2))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn op(f: impl Fn(&[Var]) -> Result<Var> + 'static) -> OpFn {
    Box::new(f)
}

/// A block case: `x` first, then every parameter of `store` in order.
fn block_case(x: Tensor, store: ParamStore, f: impl Fn(&Bound, &Var) -> Result<Var> + 'static) -> (Vec<Tensor>, OpFn) {
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, p)| randomize(&p.value)));
    (inputs, op(move |v| f(&Bound::from_vars(v[1..].to_vec()), &v[0])))
}

/// Parameters are redrawn around their initial value so zero-initialized
/// layers and unit norm scales still exercise every gradient path.
fn randomize(t: &Tensor) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(t.numel() as u64 ^ 0x5eed);
    let noise = Tensor::uniform(t.shape(), -0.5, 0.5, &mut rng);
    Tensor::new(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).expect("same shape")
}

fn seeded_store(rng: &mut ChaCha8Rng) -> (ParamStore, u64) {
    (ParamStore::new(), rng.gen())
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add_broadcast", build: |r| (vec![rn(r, &[3, 4]), rn(r, &[4])], op(|v| v[0].add(&v[1]))) },
        OpCase { name: "sub_broadcast", build: |r| (vec![rn(r, &[2, 3, 1]), rn(r, &[3, 4])], op(|v| v[0].sub(&v[1]))) },
        OpCase { name: "mul_broadcast", build: |r| (vec![rn(r, &[2, 1, 4]), rn(r, &[3, 1])], op(|v| v[0].mul(&v[1]))) },
        OpCase { name: "div", build: |r| (vec![rn(r, &[3, 4]), positive(r, &[3, 4])], op(|v| v[0].div(&v[1]))) },
        OpCase { name: "neg", build: |r| (vec![rn(r, &[5])], op(|v| Ok(v[0].neg()))) },
        OpCase { name: "scale", build: |r| (vec![rn(r, &[2, 3])], op(|v| Ok(v[0].scale(-1.7)))) },
        OpCase { name: "add_scalar", build: |r| (vec![rn(r, &[4])], op(|v| Ok(v[0].add_scalar(0.3)))) },
        OpCase { name: "exp", build: |r| (vec![rn(r, &[6])], op(|v| Ok(v[0].exp()))) },
        OpCase { name: "ln", build: |r| (vec![positive(r, &[6])], op(|v| Ok(v[0].ln()))) },
        OpCase { name: "powf", build: |r| (vec![positive(r, &[6])], op(|v| Ok(v[0].powf(2.5)))) },
        OpCase { name: "sigmoid", build: |r| (vec![rn(r, &[3, 3])], op(|v| Ok(v[0].sigmoid()))) },
        OpCase { name: "log_sigmoid", build: |r| (vec![rn(r, &[3, 3]).map(|x| 4.0 * x)], op(|v| Ok(v[0].log_sigmoid()))) },
        OpCase { name: "gelu", build: |r| (vec![rn(r, &[3, 4]).map(|x| 2.0 * x)], op(|v| Ok(v[0].gelu()))) },
        OpCase { name: "relu", build: |r| (vec![off_zero(r, &[8])], op(|v| Ok(v[0].relu()))) },
        OpCase { name: "sum", build: |r| (vec![rn(r, &[2, 3])], op(|v| Ok(v[0].sum()))) },
        OpCase { name: "mean", build: |r| (vec![rn(r, &[2, 3])], op(|v| Ok(v[0].mean()))) },
        OpCase { name: "sum_axis", build: |r| (vec![rn(r, &[2, 3, 4])], op(|v| v[0].sum_axis(1, false))) },
        OpCase { name: "mean_axis", build: |r| (vec![rn(r, &[2, 3, 4])], op(|v| v[0].mean_axis(2, true))) },
        OpCase { name: "max_axis", build: |r| (vec![rn(r, &[4, 5])], op(|v| v[0].max_axis(0, false))) },
        OpCase { name: "softmax", build: |r| (vec![rn(r, &[3, 5])], op(|v| v[0].softmax(1))) },
        OpCase { name: "log_softmax", build: |r| (vec![rn(r, &[4, 3])], op(|v| v[0].log_softmax(0))) },
        OpCase { name: "standardize", build: |r| (vec![rn(r, &[3, 6])], op(|v| v[0].standardize(1, 1e-5))) },
        OpCase { name: "matmul", build: |r| (vec![rn(r, &[3, 4]), rn(r, &[4, 2])], op(|v| v[0].matmul(&v[1]))) },
        OpCase {
            name: "linear",
            build: |r| (vec![rn(r, &[5, 3]), rn(r, &[4, 3]), rn(r, &[4])], op(|v| v[0].linear(&v[1], &v[2]))),
        },
        OpCase { name: "transpose", build: |r| (vec![rn(r, &[3, 5])], op(|v| v[0].t())) },
        OpCase { name: "reshape", build: |r| (vec![rn(r, &[2, 6])], op(|v| v[0].reshape(&[3, 4]))) },
        OpCase { name: "permute", build: |r| (vec![rn(r, &[2, 3, 4])], op(|v| v[0].permute(&[2, 0, 1]))) },
        OpCase { name: "narrow", build: |r| (vec![rn(r, &[3, 6])], op(|v| v[0].narrow(1, 2, 3))) },
        OpCase {
            name: "concat",
            build: |r| (vec![rn(r, &[2, 3]), rn(r, &[2, 2])], op(|v| Var::concat(&[v[0].clone(), v[1].clone()], 1))),
        },
        OpCase {
            name: "conv2d",
            build: |r| {
                let ins = vec![rn(r, &[2, 5, 6]), rn(r, &[3, 2, 3, 3]), rn(r, &[3])];
                (ins, op(|v| v[0].conv2d(&v[1], &v[2], 2, 1)))
            },
        },
        OpCase {
            name: "conv2d_patch",
            build: |r| {
                let ins = vec![rn(r, &[3, 8, 8]), rn(r, &[2, 3, 4, 4]), rn(r, &[2])];
                (ins, op(|v| v[0].conv2d(&v[1], &v[2], 4, 0)))
            },
        },
        OpCase {
            name: "conv1x1",
            build: |r| (vec![rn(r, &[3, 2, 4]), rn(r, &[2, 3]), rn(r, &[2])], op(|v| v[0].conv1x1(&v[1], &v[2]))),
        },
        OpCase { name: "dwconv3x3", build: |r| (vec![rn(r, &[2, 4, 5]), rn(r, &[2, 3, 3])], op(|v| v[0].dwconv3x3(&v[1]))) },
        OpCase { name: "dwconv3x3_1x1", build: |r| (vec![rn(r, &[3, 1, 1]), rn(r, &[3, 3, 3])], op(|v| v[0].dwconv3x3(&v[1]))) },
        OpCase {
            name: "adaptive_avg_pool2d",
            build: |r| (vec![rn(r, &[2, 5, 7])], op(|v| v[0].adaptive_avg_pool2d(3, 2))),
        },
        OpCase { name: "pixel_shuffle", build: |r| (vec![rn(r, &[8, 2, 3])], op(|v| v[0].pixel_shuffle(2))) },
        OpCase { name: "pixel_unshuffle", build: |r| (vec![rn(r, &[2, 4, 6])], op(|v| v[0].pixel_unshuffle(2))) },
        OpCase { name: "bilinear_up", build: |r| (vec![rn(r, &[2, 3, 4])], op(|v| v[0].bilinear_resize(7, 9))) },
        OpCase { name: "bilinear_down", build: |r| (vec![rn(r, &[2, 8, 6])], op(|v| v[0].bilinear_resize(3, 4))) },
        OpCase {
            name: "nn_linear",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = Linear::new(&mut ParamBuilder::new(&mut s, seed), "l", 4, 3);
                block_case(rn(r, &[5, 4]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "nn_conv1x1",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = Conv1x1::new(&mut ParamBuilder::new(&mut s, seed), "c", 3, 4);
                block_case(rn(r, &[3, 3, 2]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "nn_conv2d",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = Conv2d::new(&mut ParamBuilder::new(&mut s, seed), "c", 2, 3, 2, 2, 0);
                block_case(rn(r, &[2, 4, 4]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "layer_norm",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = LayerNorm::new(&mut ParamBuilder::new(&mut s, seed), "ln", 5);
                block_case(rn(r, &[3, 5]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "channel_norm",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = ChannelNorm::new(&mut ParamBuilder::new(&mut s, seed), "cn", 4);
                block_case(rn(r, &[4, 2, 3]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "instance_norm",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = InstanceNorm::new(&mut ParamBuilder::new(&mut s, seed), "in", 3);
                block_case(rn(r, &[3, 3, 3]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "se_block",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = SeBlock::new(&mut ParamBuilder::new(&mut s, seed), "se", 8);
                block_case(rn(r, &[8, 2, 2]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "ghost_expand",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = GhostExpand::new(&mut ParamBuilder::new(&mut s, seed), "g", 2, 4).expect("factor 4");
                block_case(rn(r, &[2, 3, 3]), s, move |p, x| l.forward(p, x))
            },
        },
        OpCase {
            name: "attention",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = Attention::new(&mut ParamBuilder::new(&mut s, seed), "a", 4, 2).expect("4 = 2·2");
                let kv = rn(r, &[3, 4]);
                block_case(rn(r, &[5, 4]), s, move |p, x| {
                    let kv = x.tape().constant(kv.clone());
                    let o = l.forward(p, x, &kv)?;
                    Var::concat(&[o.out, o.sim], 1)
                })
            },
        },
        OpCase {
            name: "mlp_block",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = MlpBlock::new(&mut ParamBuilder::new(&mut s, seed), "m", 2);
                block_case(rn(r, &[6, 2]), s, move |p, x| l.forward(p, x, 2, 3))
            },
        },
        OpCase {
            name: "feature_reconstruction",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = FeatureReconstruction::new(&mut ParamBuilder::new(&mut s, seed), "fr", 4).expect("even");
                block_case(rn(r, &[4, 3, 3]), s, move |p, x| {
                    let o = l.forward(p, x)?;
                    Var::concat(&[o.y, o.y_diverse], 0)
                })
            },
        },
        OpCase { name: "diversity_loss", build: |r| (vec![rn(r, &[3, 2, 3])], op(|v| diversity_loss(&v[0]))) },
        OpCase {
            name: "ece_extract",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = ClassExtractor::new(&mut ParamBuilder::new(&mut s, seed), "ece", 1.0, 5, 3);
                block_case(rn(r, &[5, 4, 5]), s, move |p, x| l.extract(p, &MaskStack { logits: x.clone(), stage: 1 }))
            },
        },
        OpCase {
            name: "mask_head",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let l = MaskHead::new(&mut ParamBuilder::new(&mut s, seed), "mh", 3, 2);
                block_case(rn(r, &[3, 2, 2]), s, move |p, x| Ok(l.forward(p, x, 4)?.logits))
            },
        },
        OpCase {
            name: "sau_step",
            build: |r| {
                let (mut s, seed) = seeded_store(r);
                let (sau, ece) = {
                    let mut pb = ParamBuilder::new(&mut s, seed);
                    let sau = SemanticsAttention::new(&mut pb, "sau", 4, 2, UpdaterKind::Gated).expect("4 = 2·2");
                    (sau, ClassExtractor::new(&mut pb, "ece", 1.0, 3, 4))
                };
                let g = rn(r, &[3, 4]);
                block_case(rn(r, &[6, 4]), s, move |p, x| {
                    let g = x.tape().constant(g.clone());
                    let o = sau.step(p, &ece, x, &g, 2, 3, 2)?;
                    Var::concat(&[o.enhanced, o.updated_g], 0)
                })
            },
        },
        OpCase {
            name: "cross_entropy",
            build: |r| {
                let labels = LabelMap::new(2, 3, (0..6).map(|_| r.gen_range(0..3)).collect()).expect("2×3");
                (vec![rn(r, &[3, 2, 3])], op(move |v| cross_entropy_loss(&v[0], &labels)))
            },
        },
        OpCase {
            name: "focal_dice",
            build: |r| {
                let target = Tensor::new(&[2, 3, 3], (0..18).map(|_| r.gen_range(0..2) as f64).collect()).expect("2×3×3");
                let valid = Tensor::ones(&[1, 3, 3]);
                (
                    vec![rn(r, &[2, 3, 3]).map(|x| 2.0 * x)],
                    op(move |v| {
                        let f = focal_loss(&v[0], &target, &valid, 2.0, 0.25)?;
                        f.add(&dice_loss(&v[0], &target, &valid)?)
                    }),
                )
            },
        },
    ]
}

/// Run every case once per seed and report its worst error.
pub fn run_op_suite(seeds: &[u64], eps: f64) -> Result<Vec<CaseResult>> {
    op_cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for &seed in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (inputs, f) = (case.build)(&mut rng);
                let shape = {
                    let tape = Tape::no_grad();
                    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                    f(&vars)?.shape().to_vec()
                };
                let proj = Tensor::randn(&shape, &mut rng);
                let scalar = |v: &[Var]| -> Result<Var> {
                    let y = f(v)?;
                    Ok(y.mul(&y.tape().constant(proj.clone()))?.sum())
                };
                let opts = GradCheckOptions { eps, max_coords: None, seed };
                let err = grad_check_many(scalar, &inputs, &opts)
                    .map_err(|e| Error::Numerical(format!("{}: {e}", case.name)))?;
                worst = worst.max(err);
            }
            Ok(CaseResult { name: case.name, max_err: worst })
        })
        .collect()
}

/// Micro configuration for the end-to-end check.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        n_classes: 4,
        alpha: 1.0,
        width: 8,
        heads: 2,
        encoder: EncoderConfig {
            patch: 4,
            widths: [4, 4, 8, 8],
            blocks: 1,
        },
        use_fr: true,
        updater: UpdaterKind::Gated,
    }
}

/// Gradient check of the full training loss of a micro model on one 64×64
/// sample, with respect to the image and a sample of `coords_per_tensor`
/// coordinates from every parameter tensor.
pub fn end_to_end_check(seed: u64, coords_per_tensor: usize) -> Result<f64> {
    let cfg = micro_model_config();
    let (net, store) = EceNet::init(cfg.clone(), seed)?;
    let sample = gen_sample(seed, 0, 64, cfg.n_classes);
    let mut inputs = vec![sample.image.clone()];
    inputs.extend(store.iter().map(|(_, p)| randomize(&p.value)));
    let weights = LossWeights::default();
    let f = |v: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(v[1..].to_vec());
        let out = net.forward(&p, &v[0])?;
        Ok(overall_loss(&out, &sample.labels, &weights)?.total)
    };
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_coords: Some(coords_per_tensor),
        seed,
    };
    grad_check_many(f, &inputs, &opts)
}
