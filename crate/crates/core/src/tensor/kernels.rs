//! Raw array kernels shared by the forward and backward passes.

use super::Float;

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (&extent, &i) in shape.iter().zip(index) {
        assert!(i < extent, "index {i} out of range for extent {extent}");
        off = off * extent + i;
    }
    off
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// (outer, axis extent, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Writes `src` (of `shape`) permuted by `perm` into `out`, adding when `add`.
pub(crate) fn permute_into<S: Float>(src: &[S], shape: &[usize], perm: &[usize], out: &mut [S], add: bool) {
    let rank = shape.len();
    let n = src.len();
    if n == 0 {
        return;
    }
    let in_strides = strides(shape);
    let out_shape = permute_shape(shape, perm);
    let src_step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = rank - 1;
    let run = out_shape[last];
    let step = src_step[last];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut pos = 0usize;
    while pos < n {
        let dst = &mut out[pos..pos + run];
        if add {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += src[off + j * step];
            }
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[off + j * step];
            }
        }
        pos += run;
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn softmax_forward<S: Float>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![S::zero(); x.len()];
    if inner == 1 {
        for o in 0..outer {
            let row = &x[o * len..(o + 1) * len];
            let dst = &mut y[o * len..(o + 1) * len];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            let inv = S::one() / total;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        return y;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = S::neg_infinity();
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut total = S::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                y[base + a * inner] = e;
                total += e;
            }
            let inv = S::one() / total;
            for a in 0..len {
                y[base + a * inner] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<S: Float>(y: &[S], g: &[S], shape: &[usize], axis: usize, gx: &mut [S]) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = S::zero();
            for a in 0..len {
                let j = base + a * inner;
                dot += g[j] * y[j];
            }
            for a in 0..len {
                let j = base + a * inner;
                gx[j] += y[j] * (g[j] - dot);
            }
        }
    }
}

/// Returns (y, xhat, rstd) for normalization over the last axis of length `d`.
pub(crate) fn layer_norm_forward<S: Float>(
    x: &[S],
    d: usize,
    gain: &[S],
    bias: &[S],
    eps: S,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / d;
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    let inv_d = S::one() / S::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xh[j] = h;
            yr[j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<S: Float>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<S: Float>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

/// Non-overlapping k×k mean over the last two axes.
pub(crate) fn avg_pool2d<S: Float>(x: &[S], h: usize, w: usize, k: usize) -> Vec<S> {
    let planes = x.len() / (h * w);
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![S::zero(); planes * oh * ow];
    let scale = S::one() / S::lit((k * k) as f64);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            let orow = &mut dst[(i / k) * ow..(i / k + 1) * ow];
            let srow = &src[i * w..(i + 1) * w];
            for (j, &v) in srow.iter().enumerate() {
                orow[j / k] += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    out
}

/// Nearest-neighbour upsampling by `k` over the last two axes.
pub(crate) fn upsample_nearest2d<S: Float>(x: &[S], h: usize, w: usize, k: usize) -> Vec<S> {
    let planes = x.len() / (h * w);
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let srow = &src[(i / k) * w..(i / k + 1) * w];
            for (j, d) in dst[i * ow..(i + 1) * ow].iter_mut().enumerate() {
                *d = srow[j / k];
            }
        }
    }
    out
}
