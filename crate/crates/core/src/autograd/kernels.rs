//! Forward and backward kernels for the tape operations.

use crate::tensor::{exact_sum, gemm, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Probabilities entering a log in the binary cross-entropy are clamped to
/// `[BCE_PROB_FLOOR, 1 - BCE_PROB_FLOOR]`.
pub const BCE_PROB_FLOOR: f64 = 1e-12;

pub(super) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            ci,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward(
    geom: &ConvGeom,
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    out: &mut Tensor,
) {
    let n = x.shape()[0];
    let co = w.shape()[0];
    let (kk, p) = (geom.patch(), geom.positions());
    let in_len = geom.ci * geom.h * geom.w;
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    let od = out.data_mut();
    for i in 0..n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let oi = &mut od[i * co * p..(i + 1) * co * p];
        let src: &[f64] = if geom.is_pointwise() {
            xi
        } else {
            geom.im2col(xi, &mut cols);
            &cols
        };
        gemm(co, kk, p, 1.0, w.data(), false, src, false, 0.0, oi);
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut oi[o * p..(o + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
}

pub(super) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(super) fn conv2d_backward(
    geom: &ConvGeom,
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let n = x.shape()[0];
    let co = w.shape()[0];
    let (kk, p) = (geom.patch(), geom.positions());
    let in_len = geom.ci * geom.h * geom.w;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[co]));
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    for i in 0..n {
        let gi = &g.data()[i * co * p..(i + 1) * co * p];
        if let Some(dw) = dw.as_mut() {
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            let src: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                geom.im2col(xi, &mut cols);
                &cols
            };
            gemm(co, p, kk, 1.0, gi, false, src, true, 1.0, dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.data_mut().iter_mut().enumerate() {
                *d += gi[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
            if geom.is_pointwise() {
                gemm(kk, co, p, 1.0, w.data(), true, gi, false, 1.0, dxi);
            } else {
                gemm(kk, co, p, 1.0, w.data(), true, gi, false, 0.0, &mut cols);
                geom.col2im(&cols, dxi);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(super) fn resize_forward(x: &Tensor, out: &mut Tensor) {
    let (n, c, h, w) = x.dims4().unwrap();
    let (_, _, oh, ow) = out.dims4().unwrap();
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let od = out.data_mut();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
}

pub(super) fn resize_backward(g: &Tensor, dx: &mut Tensor) {
    let (n, c, h, w) = dx.dims4().unwrap();
    let (_, _, oh, ow) = g.dims4().unwrap();
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let dd = dx.data_mut();
    for plane in 0..n * c {
        let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
}

pub(super) fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let hw = h * w;
    let mut out = x.clone();
    let od = out.data_mut();
    let mut max = vec![0.0; hw];
    let mut sum = vec![0.0; hw];
    for i in 0..n {
        let blk = &mut od[i * c * hw..(i + 1) * c * hw];
        max.fill(f64::NEG_INFINITY);
        for ch in 0..c {
            for (m, &v) in max.iter_mut().zip(&blk[ch * hw..(ch + 1) * hw]) {
                *m = m.max(v);
            }
        }
        sum.fill(0.0);
        for ch in 0..c {
            for ((v, &m), s) in blk[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .zip(&max)
                .zip(sum.iter_mut())
            {
                *v = (*v - m).exp();
                *s += *v;
            }
        }
        for ch in 0..c {
            for (v, &s) in blk[ch * hw..(ch + 1) * hw].iter_mut().zip(&sum) {
                *v /= s;
            }
        }
    }
    out
}

pub(super) fn softmax_channels_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let (n, c, h, w) = y.dims4().unwrap();
    let hw = h * w;
    let mut dx = Tensor::zeros(y.shape());
    let mut dot = vec![0.0; hw];
    for i in 0..n {
        let range = i * c * hw..(i + 1) * c * hw;
        let (yb, gb) = (&y.data()[range.clone()], &g.data()[range.clone()]);
        dot.fill(0.0);
        for ch in 0..c {
            let s = ch * hw..(ch + 1) * hw;
            for ((d, &yv), &gv) in dot.iter_mut().zip(&yb[s.clone()]).zip(&gb[s]) {
                *d += yv * gv;
            }
        }
        let db = &mut dx.data_mut()[range];
        for ch in 0..c {
            let s = ch * hw..(ch + 1) * hw;
            for (((o, &yv), &gv), &d) in db[s.clone()]
                .iter_mut()
                .zip(&yb[s.clone()])
                .zip(&gb[s])
                .zip(&dot)
            {
                *o = yv * (gv - d);
            }
        }
    }
    dx
}

/// Row softmax; the normaliser is a correctly rounded sum, so permuting a
/// row permutes its output exactly.
pub(super) fn softmax_last(x: &Tensor) -> Tensor {
    let len = *x.shape().last().unwrap();
    let mut out = x.clone();
    let mut partials = Vec::new();
    for row in out.data_mut().chunks_mut(len) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - m).exp();
        }
        let s = exact_sum(row.iter().copied(), &mut partials);
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(super) fn softmax_last_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let len = *y.shape().last().unwrap();
    let mut dx = Tensor::zeros(y.shape());
    for ((d, yr), gr) in dx
        .data_mut()
        .chunks_mut(len)
        .zip(y.data().chunks(len))
        .zip(g.data().chunks(len))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    dx
}

const L2_EPS: f64 = 1e-12;

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(super) fn l2_normalize(x: &Tensor, axis: usize) -> Tensor {
    let (outer, ext, inner) = axis_layout(x.shape(), axis);
    let mut out = x.clone();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * ext + e) * inner + i;
            let ss: f64 = (0..ext).map(|e| od[idx(e)] * od[idx(e)]).sum();
            let r = (ss + L2_EPS).sqrt();
            for e in 0..ext {
                od[idx(e)] /= r;
            }
        }
    }
    out
}

pub(super) fn l2_normalize_backward(x: &Tensor, y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, ext, inner) = axis_layout(x.shape(), axis);
    let mut dx = Tensor::zeros(x.shape());
    let (xd, yd, gd) = (x.data(), y.data(), g.data());
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * ext + e) * inner + i;
            let ss: f64 = (0..ext).map(|e| xd[idx(e)] * xd[idx(e)]).sum();
            let r = (ss + L2_EPS).sqrt();
            let dot: f64 = (0..ext).map(|e| gd[idx(e)] * yd[idx(e)]).sum();
            for e in 0..ext {
                dd[idx(e)] = (gd[idx(e)] - yd[idx(e)] * dot) / r;
            }
        }
    }
    dx
}

pub(super) fn cross_entropy(logits: &Tensor, labels: &[u8]) -> f64 {
    let (n, c, h, w) = logits.dims4().unwrap();
    let hw = h * w;
    let d = logits.data();
    let mut total = 0.0;
    let mut valid = 0usize;
    for i in 0..n {
        for p in 0..hw {
            let label = labels[i * hw + p];
            if label == IGNORE_LABEL {
                continue;
            }
            let at = |ch: usize| d[(i * c + ch) * hw + p];
            let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (at(ch) - m).exp()).sum::<f64>().ln();
            total += lse - at(usize::from(label));
            valid += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        total / valid as f64
    }
}

pub(super) fn cross_entropy_backward(logits: &Tensor, labels: &[u8], g: f64) -> Tensor {
    let (n, c, h, w) = logits.dims4().unwrap();
    let hw = h * w;
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut dx = Tensor::zeros(logits.shape());
    if valid == 0 {
        return dx;
    }
    let scale = g / valid as f64;
    let d = logits.data();
    let dd = dx.data_mut();
    for i in 0..n {
        for p in 0..hw {
            let label = labels[i * hw + p];
            if label == IGNORE_LABEL {
                continue;
            }
            let idx = |ch: usize| (i * c + ch) * hw + p;
            let m = (0..c).map(|ch| d[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..c).map(|ch| (d[idx(ch)] - m).exp()).sum();
            for ch in 0..c {
                let prob = (d[idx(ch)] - m).exp() / s;
                let onehot = if ch == usize::from(label) { 1.0 } else { 0.0 };
                dd[idx(ch)] = scale * (prob - onehot);
            }
        }
    }
    dx
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln clamp(σ(z))` and its derivative in `z`.
fn neg_log_sigmoid_clamped(z: f64) -> (f64, f64) {
    let hi = -BCE_PROB_FLOOR.ln();
    let lo = -(-BCE_PROB_FLOOR).ln_1p();
    let v = softplus(-z);
    if v >= hi {
        (hi, 0.0)
    } else if v <= lo {
        (lo, 0.0)
    } else {
        (v, sigmoid(z) - 1.0)
    }
}

pub(super) fn bce_mean(logits: &Tensor, target: bool) -> f64 {
    let sign = if target { 1.0 } else { -1.0 };
    let total: f64 = logits
        .data()
        .iter()
        .map(|&z| neg_log_sigmoid_clamped(sign * z).0)
        .sum();
    total / logits.numel() as f64
}

pub(super) fn bce_backward(logits: &Tensor, target: bool, g: f64) -> Tensor {
    let sign = if target { 1.0 } else { -1.0 };
    let scale = g / logits.numel() as f64;
    logits.map(|z| sign * scale * neg_log_sigmoid_clamped(sign * z).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_taps_identity_when_same_size() {
        for (o, &(i0, _, w0, w1)) in resize_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!((w0, w1), (1.0, 0.0));
        }
    }

    #[test]
    fn bce_clamps_extreme_logits() {
        let t = Tensor::new(&[2], vec![-1e6, 1e6]).unwrap();
        let l = bce_mean(&t, true);
        assert!(l.is_finite());
        assert!((l - 0.5 * (-BCE_PROB_FLOOR.ln() + -(-BCE_PROB_FLOOR).ln_1p())).abs() < 1e-9);
    }
}
