//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use ecenet::params::ParamStore;
use ecenet::Tensor;

/// Loss from its definition: spatial softmax per channel, max over channels
/// at each position, summed, then `1 − sum/𝒞`.
pub fn diversity_oracle(y: &Tensor) -> f64 {
    let [c, h, w] = *y.shape() else { panic!("C×H×W expected") };
    let hw = h * w;
    let soft: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let row = &y.data()[j * hw..(j + 1) * hw];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(|v| (v - m).exp() / z).collect()
        })
        .collect();
    let total: f64 = (0..hw)
        .map(|k| (0..c).map(|j| soft[j][k]).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    1.0 - total / c as f64
}

/// Reorder the leading axis: row `i` of the result is row `perm[i]` of `t`.
pub fn permute_leading(t: &Tensor, perm: &[usize]) -> Tensor {
    let row = t.numel() / t.shape()[0];
    let data = perm.iter().flat_map(|&i| t.data()[i * row..(i + 1) * row].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Reorder the columns of a matrix: column `j` of the result is column
/// `perm[j]` of `t`.
pub fn permute_columns(t: &Tensor, perm: &[usize]) -> Tensor {
    let [r, c] = *t.shape() else { panic!("matrix expected") };
    let data = (0..r).flat_map(|i| perm.iter().map(move |&j| (i, j))).map(|(i, j)| t.data()[i * c + j]).collect();
    Tensor::new(&[r, c], data).unwrap()
}

/// Fisher–Yates shuffle driven by a simple LCG, so permutations stay
/// independent of the library's RNG use.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    for i in (1..n).rev() {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let j = (s >> 33) as usize % (i + 1);
        p.swap(i, j);
    }
    p
}

/// mIoU from per-class pixel sets, no confusion matrix involved.
pub fn brute_force_miou(gt: &[u8], pred: &[u8], n: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..n as u8 {
        let g: std::collections::BTreeSet<usize> = (0..gt.len()).filter(|&k| gt[k] == c).collect();
        if g.is_empty() {
            continue;
        }
        let p: std::collections::BTreeSet<usize> = (0..pred.len()).filter(|&k| pred[k] == c).collect();
        ious.push(g.intersection(&p).count() as f64 / g.union(&p).count() as f64);
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

pub fn set_param(store: &mut ParamStore, name: &str, value: Tensor) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.set(id, value).unwrap();
}

pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
}

/// Replace every parameter whose name starts with `prefix` by a standard
/// normal draw scaled by `scale`, so zero-initialized layers take part too.
pub fn randomize_params(store: &mut ParamStore, prefix: &str, scale: f64, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, &mut rng).map(|v| v * scale)).unwrap();
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x·Wᵀ + b` on plain vectors, `W` row-major `out×in`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_in = x.len();
    (0..b.len())
        .map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>())
        .collect()
}

/// Standardize a lane with population variance and `eps = 1e-5`.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
}

/// Largest deviation from joint class-permutation equivariance of one SAU
/// step with every parameter randomized (gate and projection included):
/// `sim` columns, mask slices and updated rows must follow the permutation
/// of `g`, `enhanced` must not move.
pub fn sau_equivariance_error(seed: u64) -> f64 {
    use ecenet::class_extraction::ClassExtractor;
    use ecenet::params::ParamBuilder;
    use ecenet::semantics_attention::{SemanticsAttention, UpdaterKind};
    use ecenet::Tape;
    use rand::SeedableRng;

    let (c, n, h, w) = (8, 4, 4, 4);
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, seed);
    let ece = ClassExtractor::new(&mut pb, "ece", 1.0, n, c);
    let sau = SemanticsAttention::new(&mut pb, "sau", c, 2, UpdaterKind::Gated).unwrap();
    randomize_params(&mut store, "", 0.5, seed + 1000);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[h * w, c], &mut rng);
    let g = Tensor::randn(&[n, c], &mut rng);
    let perm = permutation(n, seed);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let xv = tape.constant(x);
    let a = sau.step(&p, &ece, &xv, &tape.constant(g.clone()), h, w, 3).unwrap();
    let b = sau.step(&p, &ece, &xv, &tape.constant(permute_leading(&g, &perm)), h, w, 3).unwrap();

    let mut err = a.enhanced.value().max_abs_diff(b.enhanced.value());
    err = err.max(permute_columns(a.sim.value(), &perm).max_abs_diff(b.sim.value()));
    err = err.max(permute_leading(a.new_mask.logits.value(), &perm).max_abs_diff(b.new_mask.logits.value()));
    err.max(permute_leading(a.updated_g.value(), &perm).max_abs_diff(b.updated_g.value()))
}
