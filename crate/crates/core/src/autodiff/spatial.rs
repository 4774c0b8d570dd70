//! Operations on channels-first `C×H×W` maps.

use super::linalg::{gemm, matmul_t, MatRef};
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn chw(op: &'static str, v: &Var) -> Result<(usize, usize, usize)> {
    match *v.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, v.shape(), &[])),
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (row, &b) in out.chunks_mut(plane).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], plane: usize) -> Vec<f64> {
    g.chunks(plane).map(|r| r.iter().sum()).collect()
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Input coordinate for output position `o` and kernel tap `t`, if in
    /// bounds.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, ext: usize) -> Option<usize> {
        let p = (o * stride + t) as isize - pad as isize;
        (p >= 0 && (p as usize) < ext).then_some(p as usize)
    }
}

fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let cols = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.k * g.k * cols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * cols;
                for oi in 0..g.oh {
                    let Some(ii) = ConvGeom::src(oi, ki, g.stride, g.pad, g.h) else { continue };
                    for oj in 0..g.ow {
                        if let Some(jj) = ConvGeom::src(oj, kj, g.stride, g.pad, g.w) {
                            out[row + oi * g.ow + oj] = x[(c * g.h + ii) * g.w + jj];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_data: &[f64], g: ConvGeom) -> Vec<f64> {
    let cols = g.oh * g.ow;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * cols;
                for oi in 0..g.oh {
                    let Some(ii) = ConvGeom::src(oi, ki, g.stride, g.pad, g.h) else { continue };
                    for oj in 0..g.ow {
                        if let Some(jj) = ConvGeom::src(oj, kj, g.stride, g.pad, g.w) {
                            x[(c * g.h + ii) * g.w + jj] += cols_data[row + oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Per-channel 3×3 correlation with zero padding 1.
fn dw3x3_forward(x: &[f64], k: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let xp = &x[ch * h * w..][..h * w];
        let kp = &k[ch * 9..][..9];
        let op = &mut out[ch * h * w..][..h * w];
        for di in 0..3 {
            for dj in 0..3 {
                let kv = kp[di * 3 + dj];
                if kv == 0.0 {
                    continue;
                }
                for i in 0..h {
                    let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else { continue };
                    let (j0, j1) = if dj == 0 { (1, w) } else if dj == 2 { (0, w - 1) } else { (0, w) };
                    let srow = &xp[si * w..][..w];
                    let orow = &mut op[i * w..][..w];
                    for j in j0..j1 {
                        orow[j] += kv * srow[j + dj - 1];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dw3x3_backward(g: &[f64], x: &[f64], k: &[f64], c: usize, h: usize, w: usize, need_x: bool, need_k: bool) -> (Vec<f64>, Vec<f64>) {
    let mut gx = if need_x { vec![0.0; c * h * w] } else { Vec::new() };
    let mut gk = vec![0.0; if need_k { c * 9 } else { 0 }];
    for ch in 0..c {
        let gp = &g[ch * h * w..][..h * w];
        let xp = &x[ch * h * w..][..h * w];
        for di in 0..3 {
            for dj in 0..3 {
                let kv = k[ch * 9 + di * 3 + dj];
                let mut acc = 0.0;
                for i in 0..h {
                    let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else { continue };
                    let (j0, j1) = if dj == 0 { (1, w) } else if dj == 2 { (0, w - 1) } else { (0, w) };
                    let grow = &gp[i * w..][..w];
                    if need_k {
                        let srow = &xp[si * w..][..w];
                        for j in j0..j1 {
                            acc += grow[j] * srow[j + dj - 1];
                        }
                    }
                    if need_x {
                        let gxrow = &mut gx[ch * h * w + si * w..][..w];
                        for j in j0..j1 {
                            gxrow[j + dj - 1] += kv * grow[j];
                        }
                    }
                }
                if need_k {
                    gk[ch * 9 + di * 3 + dj] = acc;
                }
            }
        }
    }
    (gx, gk)
}

/// Row ranges of adaptive pooling bins: `[⌊iH/o⌋, ⌈(i+1)H/o⌉)`.
pub(crate) fn pool_bins(ext: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * ext) / out, ((i + 1) * ext).div_ceil(out)))
        .collect()
}

/// Source taps for half-pixel-centred bilinear resampling.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Var {
    /// Dense 2-D convolution (cross-correlation) with square kernels:
    /// `x: C_in×H×W`, `w: C_out×C_in×k×k`, `b: C_out`.
    pub fn conv2d(&self, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = chw("conv2d", self)?;
        let (co, k) = match *w.shape() {
            [co, ci, k1, k2] if ci == c && k1 == k2 && k1 > 0 => (co, k1),
            _ => return Err(Error::dim("conv2d", self.shape(), w.shape())),
        };
        if b.shape() != [co] || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim("conv2d", self.shape(), w.shape()));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let plane = geom.oh * geom.ow;
        let ckk = c * k * k;
        let cols = im2col(self.value().data(), geom);
        let wv = w.value().clone();
        let mut out = vec![0.0; co * plane];
        add_channel_bias(&mut out, b.value().data(), plane);
        gemm(MatRef::new(wv.data(), co, ckk), MatRef::new(&cols, ckk, plane), &mut out, 1.0);
        let value = Tensor::from_parts(vec![co, geom.oh, geom.ow], out);
        let (xshape, wshape) = (self.shape().to_vec(), w.shape().to_vec());
        Ok(self.tape().record("conv2d", value, &[self, w, b], move |g, need| {
            let gm = MatRef::new(g.data(), co, plane);
            let gx = need[0].then(|| {
                let gcols = matmul_t(MatRef::new(wv.data(), co, ckk).t(), gm);
                Tensor::from_parts(xshape, col2im(&gcols, geom))
            });
            let gw = need[1].then(|| Tensor::from_parts(wshape, matmul_t(gm, MatRef::new(&cols, ckk, plane).t())));
            let gb = need[2].then(|| Tensor::from_parts(vec![co], channel_sums(g.data(), plane)));
            vec![gx, gw, gb]
        }))
    }

    /// Pointwise convolution `x: C_in×H×W`, `w: C_out×C_in`, `b: C_out`.
    pub fn conv1x1(&self, w: &Var, b: &Var) -> Result<Var> {
        let (c, h, wd) = chw("conv1x1", self)?;
        let co = match *w.shape() {
            [co, ci] if ci == c => co,
            _ => return Err(Error::dim("conv1x1", self.shape(), w.shape())),
        };
        if b.shape() != [co] {
            return Err(Error::dim("conv1x1", w.shape(), b.shape()));
        }
        let plane = h * wd;
        let (x, wv) = (self.value().clone(), w.value().clone());
        let mut out = vec![0.0; co * plane];
        add_channel_bias(&mut out, b.value().data(), plane);
        gemm(MatRef::new(wv.data(), co, c), MatRef::new(x.data(), c, plane), &mut out, 1.0);
        let value = Tensor::from_parts(vec![co, h, wd], out);
        Ok(self.tape().record("conv1x1", value, &[self, w, b], move |g, need| {
            let gm = MatRef::new(g.data(), co, plane);
            let gx = need[0].then(|| {
                Tensor::from_parts(vec![c, h, wd], matmul_t(MatRef::new(wv.data(), co, c).t(), gm))
            });
            let gw = need[1].then(|| Tensor::from_parts(vec![co, c], matmul_t(gm, MatRef::new(x.data(), c, plane).t())));
            let gb = need[2].then(|| Tensor::from_parts(vec![co], channel_sums(g.data(), plane)));
            vec![gx, gw, gb]
        }))
    }

    /// Depthwise 3×3 correlation, zero padding 1; `k: C×3×3`.
    pub fn dwconv3x3(&self, k: &Var) -> Result<Var> {
        let (c, h, w) = chw("dwconv3x3", self)?;
        if k.shape() != [c, 3, 3] {
            return Err(Error::dim("dwconv3x3", self.shape(), k.shape()));
        }
        let (x, kv) = (self.value().clone(), k.value().clone());
        let value = Tensor::from_parts(vec![c, h, w], dw3x3_forward(x.data(), kv.data(), c, h, w));
        Ok(self.tape().record("dwconv3x3", value, &[self, k], move |g, need| {
            let (gx, gk) = dw3x3_backward(g.data(), x.data(), kv.data(), c, h, w, need[0], need[1]);
            vec![
                need[0].then(|| Tensor::from_parts(vec![c, h, w], gx)),
                need[1].then(|| Tensor::from_parts(vec![c, 3, 3], gk)),
            ]
        }))
    }

    /// Mean over adaptive bins; output bin `(i, j)` covers rows
    /// `[⌊iH/oh⌋, ⌈(i+1)H/oh⌉)` and the analogous columns.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = chw("adaptive_avg_pool2d", self)?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::dim("adaptive_avg_pool2d", self.shape(), &[c, oh, ow]));
        }
        let (rows, cols) = (pool_bins(h, oh), pool_bins(w, ow));
        let xd = self.value().data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let p = &xd[ch * h * w..][..h * w];
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += p[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let value = Tensor::from_parts(vec![c, oh, ow], out);
        Ok(self.unary("adaptive_avg_pool2d", value, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for (i, &(r0, r1)) in rows.iter().enumerate() {
                    for (j, &(c0, c1)) in cols.iter().enumerate() {
                        let v = gd[(ch * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            gx[ch * h * w + r * w + c0..ch * h * w + r * w + c1]
                                .iter_mut()
                                .for_each(|a| *a += v);
                        }
                    }
                }
            }
            Tensor::from_parts(vec![c, h, w], gx)
        }))
    }

    /// Sub-pixel rearrangement `C·r²×H×W → C×rH×rW`:
    /// `out[c, h·r+i, w·r+j] = in[c·r²+i·r+j, h, w]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var> {
        chw("pixel_shuffle", self)?;
        let value = shuffle(self.value(), r)?;
        Ok(self.unary("pixel_shuffle", value, move |g| unshuffle(g, r).expect("pixel_shuffle grad")))
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Var> {
        let value = unshuffle(self.value(), r)?;
        Ok(self.unary("pixel_unshuffle", value, move |g| shuffle(g, r).expect("pixel_unshuffle grad")))
    }

    /// Bilinear resampling with half-pixel centres (no corner alignment).
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = chw("bilinear_resize", self)?;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("bilinear_resize", self.shape(), &[c, oh, ow]));
        }
        if (oh, ow) == (h, w) {
            return Ok(self.unary("bilinear_resize", self.value().clone(), |g| g.clone()));
        }
        let (ry, rx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
        let xd = self.value().data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let p = &xd[ch * h * w..][..h * w];
            for &(y0, y1, ly) in &ry {
                for &(x0, x1, lx) in &rx {
                    let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                    let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
        let value = Tensor::from_parts(vec![c, oh, ow], out);
        Ok(self.unary("bilinear_resize", value, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                let p = &mut gx[ch * h * w..][..h * w];
                for (i, &(y0, y1, ly)) in ry.iter().enumerate() {
                    for (j, &(x0, x1, lx)) in rx.iter().enumerate() {
                        let v = gd[(ch * oh + i) * ow + j];
                        p[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                        p[y0 * w + x1] += v * (1.0 - ly) * lx;
                        p[y1 * w + x0] += v * ly * (1.0 - lx);
                        p[y1 * w + x1] += v * ly * lx;
                    }
                }
            }
            Tensor::from_parts(vec![c, h, w], gx)
        }))
    }
}

fn shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [cr, h, w] = *x.shape() else {
        return Err(Error::dim("pixel_shuffle", x.shape(), &[r]));
    };
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::dim("pixel_shuffle", x.shape(), &[r]));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![0.0; cr * h * w];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let src = &xd[(ch * r * r + i * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * oh + y * r + i) * ow + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

fn unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [c, oh, ow] = *x.shape() else {
        return Err(Error::dim("pixel_unshuffle", x.shape(), &[r]));
    };
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::dim("pixel_unshuffle", x.shape(), &[r]));
    }
    let (h, w) = (oh / r, ow / r);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let dst = &mut out[(ch * r * r + i * r + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = xd[(ch * oh + y * r + i) * ow + xx * r + j];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c * r * r, h, w], out))
}
