//! Procedurally generated shape-segmentation samples.
//!
//! Each sample paints one to four rectangles, circles and triangles over a
//! textured grey background. The class of a shape decides both its geometry
//! (`(class − 1) mod 3`: rectangle, circle, triangle) and its base colour, so
//! colour and form both carry the label. Ground truth is the exact
//! rasterization at pixel centres, later shapes occluding earlier ones.
//!
//! Sample `i` of a set is drawn from its own ChaCha stream, so any prefix of a
//! generated set is reproducible on its own and samples can be produced in
//! parallel.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label excluded from losses and confusion counts.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("LabelMap", &[height, width], &[data.len()]));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Check every label is a class index below `n_classes` or the ignore
    /// label.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= n_classes) {
            Some(l) => Err(Error::Data(format!("label {l} out of range for {n_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour downsampling by an integer factor, sampling the
    /// pixel nearest each output cell's centre.
    pub fn downsample(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::dim("downsample", &[self.height, self.width], &[factor]));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let off = factor / 2;
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y * factor + off, x * factor + off))
            .collect();
        LabelMap::new(h, w, data)
    }

    /// `N×H×W` indicator tensor; ignored pixels are zero in every slice.
    pub fn one_hot(&self, n_classes: usize) -> Result<Tensor> {
        self.validate(n_classes)?;
        let plane = self.height * self.width;
        let mut d = vec![0.0; n_classes * plane];
        for (k, &l) in self.data.iter().enumerate() {
            if l != IGNORE_LABEL {
                d[l as usize * plane + k] = 1.0;
            }
        }
        Tensor::new(&[n_classes, self.height, self.width], d)
    }

    /// `1×H×W` tensor with 1 on labelled pixels and 0 on ignored ones.
    pub fn valid_mask(&self) -> Tensor {
        let d = self
            .data
            .iter()
            .map(|&l| if l == IGNORE_LABEL { 0.0 } else { 1.0 })
            .collect();
        Tensor::from_parts(vec![1, self.height, self.width], d)
    }

    pub fn to_tensor(&self) -> Tensor {
        let d = self.data.iter().map(|&l| l as f64).collect();
        Tensor::from_parts(vec![self.height, self.width], d)
    }

    pub fn from_tensor(t: &Tensor) -> Result<LabelMap> {
        let [h, w] = *t.shape() else {
            return Err(Error::Data(format!("label tensor must be H×W, got {:?}", t.shape())));
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Data(format!("label value {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelMap::new(h, w, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub fn of_class(class: usize) -> ShapeKind {
        match (class - 1) % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Circle,
            _ => ShapeKind::Triangle,
        }
    }
}

/// Base RGB colour of a foreground class: hues spread evenly over the
/// colour wheel.
pub fn class_color(class: usize, n_classes: usize) -> [f64; 3] {
    let fg = (n_classes - 1).max(1) as f64;
    let hue = (class - 1) as f64 / fg * 6.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

enum Geometry {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Tri { v: [(f64, f64); 3] },
}

impl Geometry {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Geometry::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Tri { v } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            }
        }
    }

    fn random<R: Rng>(kind: ShapeKind, size: f64, rng: &mut R) -> Geometry {
        let cx = rng.gen_range(0.15 * size..0.85 * size);
        let cy = rng.gen_range(0.15 * size..0.85 * size);
        match kind {
            ShapeKind::Rectangle => {
                let hw = rng.gen_range(0.12 * size..0.25 * size);
                let hh = rng.gen_range(0.12 * size..0.25 * size);
                Geometry::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            ShapeKind::Circle => Geometry::Circle {
                cx,
                cy,
                r: rng.gen_range(0.12 * size..0.24 * size),
            },
            ShapeKind::Triangle => {
                let r = rng.gen_range(0.18 * size..0.32 * size);
                let rot = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = rot + k * std::f64::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Geometry::Tri { v }
            }
        }
    }
}

/// One sample from its own random stream.
pub fn gen_sample(seed: u64, index: u64, size: usize, n_classes: usize) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        if let Some(s) = try_sample(&mut rng, size, n_classes) {
            return s;
        }
    }
}

fn try_sample(rng: &mut ChaCha8Rng, size: usize, n_classes: usize) -> Option<SegSample> {
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    let mut labels = vec![0u8; plane];

    let base = rng.gen_range(0.3..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    let (fx, fy, phase) = (
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..size {
        for x in 0..size {
            let tex = 0.06 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..3 {
                img[c * plane + y * size + x] = base + tint[c] + tex + rng.gen_range(-0.04..0.04);
            }
        }
    }

    let n_shapes = rng.gen_range(1..=4);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..n_classes);
        let geom = Geometry::random(ShapeKind::of_class(class), size as f64, rng);
        let base = class_color(class, n_classes);
        let color: [f64; 3] = std::array::from_fn(|c| base[c] + rng.gen_range(-0.08..0.08));
        for y in 0..size {
            for x in 0..size {
                if geom.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * size + x] = class as u8;
                    for c in 0..3 {
                        img[c * plane + y * size + x] = color[c] + rng.gen_range(-0.04..0.04);
                    }
                }
            }
        }
    }
    if labels.iter().all(|&l| l == 0) {
        return None;
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Some(SegSample {
        image: Tensor::new(&[3, size, size], img).ok()?,
        labels: LabelMap::new(size, size, labels).ok()?,
    })
}

/// `count` samples of side `size`; sample `i` depends only on `(seed, i)`.
pub fn gen_shapes(seed: u64, count: usize, size: usize, n_classes: usize) -> Result<Vec<SegSample>> {
    gen_shapes_from(seed, 0, count, size, n_classes)
}

/// Samples `start..start+count` of the stream identified by `seed`.
pub fn gen_shapes_from(seed: u64, start: u64, count: usize, size: usize, n_classes: usize) -> Result<Vec<SegSample>> {
    if !(2..=255).contains(&n_classes) {
        return Err(Error::Config(format!("need 2..=255 classes, got {n_classes}")));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| gen_sample(seed, start + i, size, n_classes))
        .collect())
}

/// Write `image_NNNNN.tnsr` / `label_NNNNN.tnsr` pairs into `dir`.
pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let mut f = fs::File::create(dir.join(format!("image_{i:05}.tnsr")))?;
        s.image.write_tnsr(&mut f)?;
        let mut f = fs::File::create(dir.join(format!("label_{i:05}.tnsr")))?;
        s.labels.to_tensor().write_tnsr(&mut f)?;
    }
    Ok(())
}

/// Read every `image_*.tnsr` in `dir` with its matching `label_*.tnsr`, in
/// file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("image_") && n.ends_with(".tnsr"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| {
            let image = Tensor::read_tnsr(&mut fs::File::open(dir.join(n))?)?;
            let label_name = n.replacen("image_", "label_", 1);
            let lt = Tensor::read_tnsr(&mut fs::File::open(dir.join(&label_name)).map_err(|e| {
                Error::Data(format!("missing {label_name}: {e}"))
            })?)?;
            let labels = LabelMap::from_tensor(&lt)?;
            match *image.shape() {
                [3, h, w] if h == labels.height && w == labels.width => Ok(SegSample { image, labels }),
                _ => Err(Error::dim("load_dataset", image.shape(), &[labels.height, labels.width])),
            }
        })
        .collect()
}
