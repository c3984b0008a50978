//! Local cross-entropy, cropped/pooled global supervision and cross-scale
//! consistency.

use crate::error::{Error, Result};
use crate::relay::{DualVars, RelayVariant};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Floor applied to probabilities inside the log.
pub const LOG_EPS: f64 = 1e-12;

/// Class map with `IGNORE` marking unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer of {} for {height}x{width}",
                classes.len()
            )));
        }
        Ok(Self { height, width, classes })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            classes: vec![value; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.classes[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.classes[r * self.width + c] = v;
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.classes.iter().map(|&c| c != IGNORE).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != IGNORE).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_loc: f64,
    pub w_glo: f64,
    pub w_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_loc: 1.0,
            w_glo: 0.1,
            w_con: 0.1,
        }
    }
}

/// Mean over masked-in cells of `-Σ_k y_k log softmax(z)_k`, averaged over
/// the batch. A sample whose mask is empty contributes 0 and increments the
/// graph's empty-mask counter.
pub fn xe_map<S: Float>(g: &mut Graph<S>, logits: Var, target: Var, mask: &[bool]) -> Result<Var> {
    let before = g.empty_mask_events();
    let v = g.cross_entropy(logits, target, mask, LOG_EPS)?;
    if g.empty_mask_events() > before {
        log::warn!("cross entropy over an empty mask");
    }
    Ok(v)
}

/// Central `G/g × G/g` region of `[.., G, G]` global logits.
pub fn crop_global<S: Float>(g: &mut Graph<S>, z_glob: Var, down: usize) -> Result<Var> {
    let shape = g.shape(z_glob);
    let r = shape.len();
    if r < 2 {
        return Err(Error::Shape(format!("crop_global on rank {r}")));
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if down == 0 || h % down != 0 || w % down != 0 {
        return Err(Error::Shape(format!("global grid {h}x{w} not divisible by {down}")));
    }
    let (ch, cw) = (h / down, w / down);
    Ok(g.crop2d(z_glob, (h - ch) / 2, (w - cw) / 2, ch, cw)?)
}

/// Class distributions over `k×k` blocks, `[B, K, H/k, W/k]`, plus the mask
/// of blocks holding at least one non-`IGNORE` pixel.
pub fn histo<S: Float>(labels: &[LabelMap], k: usize, classes: usize) -> Result<(Tensor<S>, Vec<bool>)> {
    let Some(first) = labels.first() else {
        return Err(Error::Shape("histo of an empty batch".into()));
    };
    let (h, w) = (first.height, first.width);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!("labels {h}x{w} not divisible by {k}")));
    }
    let (oh, ow) = (h / k, w / k);
    let cells = oh * ow;
    let mut data = vec![S::zero(); labels.len() * classes * cells];
    let mut mask = vec![false; labels.len() * cells];
    let mut counts = vec![0usize; classes];
    for (b, y) in labels.iter().enumerate() {
        if y.height != h || y.width != w {
            return Err(Error::Shape("label maps of differing size in one batch".into()));
        }
        for i in 0..oh {
            for j in 0..ow {
                counts.fill(0);
                let mut total = 0;
                for r in i * k..(i + 1) * k {
                    for c in j * k..(j + 1) * k {
                        let v = y.get(r, c);
                        if v == IGNORE {
                            continue;
                        }
                        let v = v as usize;
                        if v >= classes {
                            return Err(Error::Shape(format!("label {v} outside {classes} classes")));
                        }
                        counts[v] += 1;
                        total += 1;
                    }
                }
                if total == 0 {
                    continue;
                }
                mask[b * cells + i * ow + j] = true;
                for (cl, &n) in counts.iter().enumerate() {
                    data[(b * classes + cl) * cells + i * ow + j] = S::lit(n as f64 / total as f64);
                }
            }
        }
    }
    Ok((Tensor::new(&[labels.len(), classes, oh, ow], data)?, mask))
}

/// One-hot targets `[B, K, H, W]` and validity mask.
pub fn one_hot<S: Float>(labels: &[LabelMap], classes: usize) -> Result<(Tensor<S>, Vec<bool>)> {
    histo(labels, 1, classes)
}

/// Cross entropy of `z_loc` against the local labels at full resolution.
pub fn loss_local<S: Float>(g: &mut Graph<S>, z_loc: Var, labels: &[LabelMap]) -> Result<Var> {
    let classes = g.shape(z_loc)[1];
    let (target, mask) = one_hot::<S>(labels, classes)?;
    let t = g.constant(target);
    xe_map(g, z_loc, t, &mask)
}

fn aligned<S: Float>(g: &mut Graph<S>, z_glob: Var, down: usize, local: usize, k: usize) -> Result<Var> {
    let crop = crop_global(g, z_glob, down)?;
    let side = g.shape(crop)[2];
    if k == 0 || local % k != 0 || local / k != side {
        return Err(Error::Shape(format!(
            "cropped global grid {side} does not match pooled local grid {local}/{k}"
        )));
    }
    Ok(crop)
}

/// `XE(crop(z_glob), histo(y_loc))`.
pub fn loss_global<S: Float>(
    g: &mut Graph<S>,
    z_glob: Var,
    labels: &[LabelMap],
    down: usize,
    k: usize,
) -> Result<Var> {
    let classes = g.shape(z_glob)[1];
    let local = labels.first().map_or(0, |l| l.height);
    let crop = aligned(g, z_glob, down, local, k)?;
    let (target, mask) = histo::<S>(labels, k, classes)?;
    let t = g.constant(target);
    xe_map(g, crop, t, &mask)
}

/// `XE(crop(z_glob), avg_pool(softmax(z_loc)))`. With `stop_grad` the pooled
/// local target is a constant. `mask` selects pooled cells, one per sample
/// and cell.
pub fn loss_consistency<S: Float>(
    g: &mut Graph<S>,
    z_glob: Var,
    z_loc: Var,
    down: usize,
    k: usize,
    mask: &[bool],
    stop_grad: bool,
) -> Result<Var> {
    let local = g.shape(z_loc)[2];
    let crop = aligned(g, z_glob, down, local, k)?;
    let target = if stop_grad {
        let p = g.value(z_loc).clone();
        let p = g.constant(p);
        let p = g.softmax(p, 1)?;
        let pooled = g.avg_pool2d(p, k)?;
        let v = g.value(pooled).clone();
        g.constant(v)
    } else {
        let p = g.softmax(z_loc, 1)?;
        g.avg_pool2d(p, k)?
    };
    xe_map(g, crop, target, mask)
}

/// Loss terms of one step. Absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub local: Option<Var>,
    pub global: Option<Var>,
    pub consistency: Option<Var>,
}

/// Geometry the global terms need.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossGeometry {
    pub down: usize,
    pub pool: usize,
    pub stop_grad: bool,
}

/// Weighted objective for one variant's outputs. Terms whose inputs are
/// absent contribute nothing. A variant without a genuine local prediction
/// is trained on `L_glo` alone at unit weight.
pub fn combined<S: Float>(
    g: &mut Graph<S>,
    out: DualVars,
    labels: &[LabelMap],
    weights: LossWeights,
    variant: RelayVariant,
    geo: LossGeometry,
) -> Result<LossTerms> {
    let mut parts: Vec<Var> = Vec::new();
    let mut weighted = |g: &mut Graph<S>, v: Var, w: f64| -> Result<()> {
        if w != 0.0 {
            parts.push(g.scale(v, S::lit(w))?);
        }
        Ok(())
    };
    if !variant.supervises_local() {
        let z_glob = out
            .z_glob
            .ok_or_else(|| Error::Variant(format!("{variant} produced no global logits")))?;
        let glo = loss_global(g, z_glob, labels, geo.down, geo.pool)?;
        return Ok(LossTerms {
            total: glo,
            local: None,
            global: Some(glo),
            consistency: None,
        });
    }
    let loc = loss_local(g, out.z_loc, labels)?;
    weighted(g, loc, weights.w_loc)?;
    let (mut glo, mut con) = (None, None);
    if let Some(z_glob) = out.z_glob {
        let classes = g.shape(z_glob)[1];
        let l = loss_global(g, z_glob, labels, geo.down, geo.pool)?;
        weighted(g, l, weights.w_glo)?;
        let (_, mask) = histo::<S>(labels, geo.pool, classes)?;
        let c = loss_consistency(g, z_glob, out.z_loc, geo.down, geo.pool, &mask, geo.stop_grad)?;
        weighted(g, c, weights.w_con)?;
        glo = Some(l);
        con = Some(c);
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => g.scale(loc, S::zero())?,
    };
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(LossTerms {
        total,
        local: Some(loc),
        global: glo,
        consistency: con,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(shape, |_| r.random_range(-3.0..3.0))
    }

    fn rand_labels(b: usize, h: usize, k: usize, ignore: f64, seed: u64) -> Vec<LabelMap> {
        let mut r = rng::stream(seed, &[1]);
        (0..b)
            .map(|_| {
                let v = (0..h * h)
                    .map(|_| if r.random_bool(ignore) { IGNORE } else { r.random_range(0..k as u8) })
                    .collect();
                LabelMap::new(h, h, v).unwrap()
            })
            .collect()
    }

    // ---- scalar-loop oracles ----------------------------------------------

    fn log_softmax_at(z: &Tensor<f64>, b: usize, r: usize, c: usize) -> Vec<f64> {
        let k = z.shape()[1];
        let v: Vec<f64> = (0..k).map(|j| z.at(&[b, j, r, c])).collect();
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        v.iter().map(|x| (x - lse).max(LOG_EPS.ln())).collect()
    }

    fn oracle_xe(z: &Tensor<f64>, y: &Tensor<f64>, mask: &[bool]) -> f64 {
        let (b, k, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
        let mut total = 0.0;
        for s in 0..b {
            let (mut acc, mut n) = (0.0, 0);
            for r in 0..h {
                for c in 0..w {
                    if !mask[s * h * w + r * w + c] {
                        continue;
                    }
                    let lp = log_softmax_at(z, s, r, c);
                    acc -= (0..k).map(|j| y.at(&[s, j, r, c]) * lp[j]).sum::<f64>();
                    n += 1;
                }
            }
            if n > 0 {
                total += acc / n as f64;
            }
        }
        total / b as f64
    }

    fn oracle_crop(z: &Tensor<f64>, down: usize) -> Tensor<f64> {
        let (b, k, gs) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let side = gs / down;
        let off = gs / 2 - side / 2;
        let mut out = Tensor::zeros(&[b, k, side, side]);
        for s in 0..b {
            for j in 0..k {
                for r in 0..side {
                    for c in 0..side {
                        out.data_mut()[((s * k + j) * side + r) * side + c] = z.at(&[s, j, off + r, off + c]);
                    }
                }
            }
        }
        out
    }

    fn oracle_histo(labels: &[LabelMap], k: usize, classes: usize) -> (Tensor<f64>, Vec<bool>) {
        let h = labels[0].height / k;
        let mut t = Tensor::zeros(&[labels.len(), classes, h, h]);
        let mut mask = Vec::new();
        for (s, y) in labels.iter().enumerate() {
            for i in 0..h {
                for j in 0..h {
                    let px: Vec<u8> = (0..k * k)
                        .map(|e| y.get(i * k + e / k, j * k + e % k))
                        .filter(|&v| v != IGNORE)
                        .collect();
                    mask.push(!px.is_empty());
                    for cl in 0..classes {
                        let n = px.iter().filter(|&&v| v as usize == cl).count();
                        if !px.is_empty() {
                            t.data_mut()[((s * classes + cl) * h + i) * h + j] = n as f64 / px.len() as f64;
                        }
                    }
                }
            }
        }
        (t, mask)
    }

    fn oracle_pool_softmax(z: &Tensor<f64>, k: usize) -> Tensor<f64> {
        let (b, kc, h) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let oh = h / k;
        let mut t = Tensor::zeros(&[b, kc, oh, oh]);
        for s in 0..b {
            for r in 0..h {
                for c in 0..h {
                    let lp = log_softmax_at(z, s, r, c);
                    for j in 0..kc {
                        t.data_mut()[((s * kc + j) * oh + r / k) * oh + c / k] += lp[j].exp() / (k * k) as f64;
                    }
                }
            }
        }
        t
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    // ---- examples -----------------------------------------------------------

    #[test]
    fn xe_limits_and_uniform() {
        let y = Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == 2 { 1.0 } else { 0.0 });
        let z = Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == 2 { 60.0 } else { 0.0 });
        let v = eval(|g| {
            let (a, b) = (g.constant(z), g.constant(y.clone()));
            xe_map(g, a, b, &[true; 4]).unwrap()
        });
        assert!(v < 1e-20);
        let v = eval(|g| {
            let (a, b) = (g.constant(Tensor::full(&[1, 4, 2, 2], 0.7)), g.constant(y));
            xe_map(g, a, b, &[true; 4]).unwrap()
        });
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xe_empty_mask_is_zero_and_counted() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(rand_t(&[1, 3, 2, 2], 1));
        let b = g.constant(Tensor::full(&[1, 3, 2, 2], 1.0 / 3.0));
        let v = xe_map(&mut g, a, b, &[false; 4]).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        assert_eq!(g.empty_mask_events(), 1);
    }

    #[test]
    fn crop_examples() {
        let z = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let c = crop_global(&mut g, v, 2).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 9.0, 10.0]);
        let id = crop_global(&mut g, v, 1).unwrap();
        assert_eq!(g.value(id), &z);
        let k = g.constant(Tensor::full(&[1, 2, 256, 256], 3.0));
        let c = crop_global(&mut g, k, 4).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 64, 64]);
        assert!(g.value(c).data().iter().all(|&x| x == 3.0));
        assert!(crop_global(&mut g, v, 3).is_err());
    }

    #[test]
    fn histo_examples() {
        let y = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let (t, m) = histo::<f64>(&[y], 2, 3).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5, 0.0]);
        assert_eq!(m, vec![true]);
        let (t, m) = histo::<f64>(&[LabelMap::filled(4, 4, 2)], 2, 3).unwrap();
        assert!(m.iter().all(|&b| b));
        assert_eq!(&t.data()[8..12], &[1.0; 4]);
        assert_eq!(&t.data()[..8], &[0.0; 8]);
        let (_, m) = histo::<f64>(&[LabelMap::filled(4, 4, IGNORE)], 2, 3).unwrap();
        assert!(m.iter().all(|&b| !b));
    }

    #[test]
    fn ignored_block_is_excluded_from_global_loss() {
        let mut y = LabelMap::filled(4, 4, 1);
        for r in 0..2 {
            for c in 0..2 {
                y.set(r, c, IGNORE);
            }
        }
        let z = rand_t(&[1, 3, 8, 8], 2);
        let base = eval(|g| {
            let v = g.constant(z.clone());
            loss_global(g, v, &[y.clone()], 4, 2).unwrap()
        });
        let mut z2 = z.clone();
        // logits of the crop cell over the ignored block
        for k in 0..3 {
            z2.data_mut()[k * 64 + 3 * 8 + 3] += 5.0;
        }
        z2.data_mut()[64 + 3 * 8 + 3] += 2.0;
        let moved = eval(|g| {
            let v = g.constant(z2);
            loss_global(g, v, &[y], 4, 2).unwrap()
        });
        assert_eq!(base, moved);
    }

    #[test]
    fn local_loss_examples() {
        let y = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let perfect = Tensor::from_fn(&[1, 4, 2, 2], |i| if i / 4 == i % 4 { 80.0 } else { 0.0 });
        let v = eval(|g| {
            let z = g.constant(perfect);
            loss_local(g, z, &[y.clone()]).unwrap()
        });
        assert!(v < 1e-20);
        let v = eval(|g| {
            let z = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
            loss_local(g, z, &[y]).unwrap()
        });
        assert!((v - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn padded_pixels_never_contribute() {
        let mut y = rand_labels(1, 8, 3, 0.0, 3).remove(0);
        for c in 0..8 {
            y.set(0, c, IGNORE);
        }
        let z = rand_t(&[1, 3, 8, 8], 4);
        let mut z2 = z.clone();
        for k in 0..3 {
            for c in 0..8 {
                z2.data_mut()[k * 64 + c] = 100.0 * (k as f64 - 1.0);
            }
        }
        let a = eval(|g| {
            let v = g.constant(z);
            loss_local(g, v, &[y.clone()]).unwrap()
        });
        let b = eval(|g| {
            let v = g.constant(z2);
            loss_local(g, v, &[y]).unwrap()
        });
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_scene_matching_prediction_has_zero_global_loss() {
        let y = LabelMap::filled(8, 8, 1);
        let z = Tensor::from_fn(&[1, 3, 8, 8], |i| if i / 64 == 1 { 70.0 } else { 0.0 });
        let v = eval(|g| {
            let v = g.constant(z);
            loss_global(g, v, &[y], 4, 4).unwrap()
        });
        assert!(v < 1e-20);
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(loss_global(&mut g, v, &[LabelMap::filled(8, 8, 0)], 4, 2).is_err());
    }

    #[test]
    fn consistency_of_agreeing_scales_is_entropy() {
        // local logits constant over each 2×2 block; global crop carries the
        // same logits, so pooled local softmax equals the global softmax
        let zl = rand_t(&[1, 3, 4, 4], 5);
        let zl = Tensor::from_fn(&[1, 3, 4, 4], |i| {
            let (k, r, c) = (i / 16, (i / 4) % 4, i % 4);
            zl.at(&[0, k, r / 2 * 2, c / 2 * 2])
        });
        let mut zg = Tensor::zeros(&[1, 3, 4, 4]);
        for k in 0..3 {
            for r in 0..2 {
                for c in 0..2 {
                    zg.data_mut()[k * 16 + (r + 1) * 4 + c + 1] = zl.at(&[0, k, 2 * r, 2 * c]);
                }
            }
        }
        let v = eval(|g| {
            let (a, b) = (g.constant(zg), g.constant(zl.clone()));
            loss_consistency(g, a, b, 2, 2, &[true; 4], true).unwrap()
        });
        let p = oracle_pool_softmax(&zl, 2);
        let mut h = 0.0;
        for cell in 0..4 {
            h -= (0..3).map(|k| p.data()[k * 4 + cell] * p.data()[k * 4 + cell].ln()).sum::<f64>();
        }
        assert!((v - h / 4.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_of_confident_agreement_vanishes() {
        let zl = Tensor::from_fn(&[1, 3, 4, 4], |i| if i / 16 == 0 { 90.0 } else { 0.0 });
        let zg = Tensor::from_fn(&[1, 3, 4, 4], |i| if i / 16 == 0 { 90.0 } else { 0.0 });
        let v = eval(|g| {
            let (a, b) = (g.constant(zg), g.constant(zl));
            loss_consistency(g, a, b, 2, 2, &[true; 4], true).unwrap()
        });
        assert!(v < 1e-20);
    }

    #[test]
    fn consistency_stop_grad_flag() {
        for (stop, expect) in [(true, false), (false, true)] {
            let mut g = Graph::<f64>::new();
            let zl = g.leaf(rand_t(&[1, 3, 4, 4], 6), true);
            let zg = g.leaf(rand_t(&[1, 3, 4, 4], 7), true);
            let l = loss_consistency(&mut g, zg, zl, 2, 2, &[true; 4], stop).unwrap();
            g.backward(l).unwrap();
            let gl = g.grad(zl).unwrap();
            assert_eq!(gl.data().iter().any(|&v| v != 0.0), expect);
            assert!(g.grad(zg).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn combined_examples() {
        let labels = rand_labels(2, 8, 3, 0.1, 8);
        let zl = rand_t(&[2, 3, 8, 8], 9);
        let zg = rand_t(&[2, 3, 8, 8], 10);
        let geo = LossGeometry { down: 4, pool: 4, stop_grad: true };
        let run = |w: LossWeights, variant: RelayVariant, with_glob: bool| -> (f64, f64, f64, f64) {
            let mut g = Graph::new();
            let out = DualVars {
                z_loc: g.constant(zl.clone()),
                z_glob: with_glob.then(|| g.constant(zg.clone())),
            };
            let t = combined(&mut g, out, &labels, w, variant, geo).unwrap();
            let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            (g.value(t.total).item(), val(t.local), val(t.global), val(t.consistency))
        };
        let (tot, loc, glo, con) = run(LossWeights::default(), RelayVariant::SequentialRelay, true);
        assert_eq!(tot, loc + 0.1 * glo + 0.1 * con);
        assert!(glo > 0.0 && con > 0.0);
        let (tot, loc, ..) = run(LossWeights { w_loc: 1.0, w_glo: 0.0, w_con: 0.0 }, RelayVariant::SequentialRelay, true);
        assert_eq!(tot, loc);
        let (tot, loc, glo, con) = run(LossWeights { w_loc: 1.0, w_glo: 7.0, w_con: 3.0 }, RelayVariant::LocalOnly, false);
        assert_eq!((tot, glo, con), (loc, 0.0, 0.0));
        let (tot, loc, glo, _) = run(LossWeights::default(), RelayVariant::GlobalOnly, true);
        assert_eq!((tot, loc), (glo, 0.0));
    }

    // ---- oracles on random instances ----------------------------------------

    #[test]
    fn random_instances_match_scalar_oracles() {
        for case in 0..100u64 {
            let mut r = rng::stream(case, &[99]);
            let classes = r.random_range(2..6);
            let k = [1, 2, 4][r.random_range(0..3)];
            let down = k;
            let s = 8;
            let b = r.random_range(1..3);
            let labels = rand_labels(b, s, classes, 0.3, case);
            let zl = rand_t(&[b, classes, s, s], 1000 + case);
            let zg = rand_t(&[b, classes, s, s], 2000 + case);

            let (ht, hm) = histo::<f64>(&labels, k, classes).unwrap();
            let (ot, om) = oracle_histo(&labels, k, classes);
            assert_eq!(hm, om);
            assert!(ht.max_abs_diff(&ot) <= 1e-12);
            for (cell, &valid) in hm.iter().enumerate() {
                let cells = (s / k) * (s / k);
                let (bi, ci) = (cell / cells, cell % cells);
                let sum: f64 = (0..classes).map(|j| ht.data()[(bi * classes + j) * cells + ci]).sum();
                assert!(!valid || (sum - 1.0).abs() < 1e-6);
            }

            let mut g = Graph::new();
            let vg = g.constant(zg.clone());
            let c = crop_global(&mut g, vg, down).unwrap();
            assert_eq!(g.value(c), &oracle_crop(&zg, down));

            let (oh, mask) = oracle_histo(&labels, 1, classes);
            let want = oracle_xe(&zl, &oh, &mask);
            let got = eval(|g| {
                let v = g.constant(zl.clone());
                loss_local(g, v, &labels).unwrap()
            });
            assert!((got - want).abs() <= 1e-6, "xe case {case}");

            let want = oracle_xe(&oracle_crop(&zg, down), &ot, &om);
            let got = eval(|g| {
                let v = g.constant(zg.clone());
                loss_global(g, v, &labels, down, k).unwrap()
            });
            assert!((got - want).abs() <= 1e-6, "global case {case}");

            let want = oracle_xe(&oracle_crop(&zg, down), &oracle_pool_softmax(&zl, k), &om);
            let got = eval(|g| {
                let (a, b) = (g.constant(zg.clone()), g.constant(zl.clone()));
                loss_consistency(g, a, b, down, k, &om, true).unwrap()
            });
            assert!((got - want).abs() <= 1e-6, "consistency case {case}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn global_losses_are_shift_invariant_and_nonnegative(seed in 0u64..1000, shift in -50.0f64..50.0) {
            let labels = rand_labels(1, 8, 3, 0.2, seed);
            let zl = rand_t(&[1, 3, 8, 8], seed + 1);
            let zg = rand_t(&[1, 3, 8, 8], seed + 2);
            let (_, mask) = histo::<f64>(&labels, 2, 3).unwrap();
            let both = |zg: Tensor<f64>| {
                let mut g = Graph::new();
                let (a, b) = (g.constant(zg), g.constant(zl.clone()));
                let l = loss_global(&mut g, a, &labels, 2, 2).unwrap();
                let c = loss_consistency(&mut g, a, b, 2, 2, &mask, true).unwrap();
                (g.value(l).item(), g.value(c).item())
            };
            let (l0, c0) = both(zg.clone());
            let (l1, c1) = both(zg.map(|v| v + shift));
            prop_assert!(l0 >= 0.0 && c0 >= 0.0 && l0.is_finite() && c0.is_finite());
            prop_assert!((l0 - l1).abs() < 1e-9);
            prop_assert!((c0 - c1).abs() < 1e-9);
        }
    }
}
