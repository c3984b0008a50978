//! Co-centered local/global window pairs.
//!
//! Coordinates: a window of side `e` centered at `(r, c)` covers rows
//! `r - e/2 .. r + e/2`. The center is a grid corner, so pixel centers sit at
//! half-integer offsets from it. Augmentation scales and rotates the sampling
//! grid about the center, which keeps both windows aligned.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::data::raster::Raster;
use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE};
use crate::rng;
use crate::tensor::{Float, Tensor};

/// Input scaling applied to 8-bit intensities before the projector.
pub fn normalize(v: f32) -> f32 {
    (v - 127.5) / 64.0
}

#[derive(Clone, Debug)]
pub struct Scene {
    /// `[C, H, W]`, values in `0..=255`.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub channel_means: Vec<f32>,
}

impl Scene {
    pub fn new(image: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::Shape(format!("scene image {:?}", image.shape())));
        };
        if labels.height != h || labels.width != w {
            return Err(Error::Shape(format!(
                "labels {}x{} for image {h}x{w}",
                labels.height, labels.width
            )));
        }
        let channel_means = image
            .data()
            .chunks(h * w)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
            .collect();
        debug_assert_eq!(c, image.data().len() / (h * w));
        Ok(Self {
            image,
            labels,
            channel_means,
        })
    }

    pub fn load(image: &Path, labels: &Path) -> Result<Self> {
        let img = Raster::read(image)?.to_tensor();
        let y = Raster::read(labels)?.to_labels()?;
        Self::new(img, y)
    }

    pub fn save(&self, image: &Path, labels: &Path) -> Result<()> {
        Raster::from_tensor(&self.image)?.write(image)?;
        Raster::from_labels(&self.labels).write(labels)
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Processed window side.
    pub s: usize,
    /// Global extent factor; the global window spans `g·s` source pixels.
    pub g: usize,
    pub oob_reject_fraction: f64,
    pub scale_range: (f64, f64),
    pub rotation_range_deg: (f64, f64),
    pub aug_prob: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            s: 256,
            g: 4,
            oob_reject_fraction: 0.8,
            scale_range: (0.5, 2.0),
            rotation_range_deg: (-90.0, 90.0),
            aug_prob: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.s % 2 != 0 || self.g == 0 {
            return Err(Error::Config(format!("window side {} must be even and g {} positive", self.s, self.g)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) || !(0.0..=1.0).contains(&self.oob_reject_fraction) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Geometric transform of the sampling grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub scale: f64,
    pub rotation_deg: f64,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        scale: 1.0,
        rotation_deg: 0.0,
    };

    /// Scale and rotation, each applied with probability `aug_prob`.
    pub fn draw(cfg: &SamplerConfig, rng: &mut impl Rng) -> Self {
        let mut a = Self::IDENTITY;
        if rng.random_bool(cfg.aug_prob) {
            let (lo, hi) = cfg.scale_range;
            a.scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        }
        if rng.random_bool(cfg.aug_prob) {
            let (lo, hi) = cfg.rotation_range_deg;
            a.rotation_deg = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        }
        a
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn sin_cos(&self) -> (f64, f64) {
        let d = self.rotation_deg;
        if d.rem_euclid(90.0) == 0.0 {
            match (d.rem_euclid(360.0) / 90.0) as i32 {
                0 => (0.0, 1.0),
                1 => (1.0, 0.0),
                2 => (0.0, -1.0),
                _ => (-1.0, 0.0),
            }
        } else {
            d.to_radians().sin_cos()
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowPair {
    pub scene: usize,
    pub center: (i64, i64),
    pub augment: Augment,
    /// `[C, s, s]` in `0..=255`.
    pub x_loc: Tensor<f32>,
    /// `[C, s, s]`: the `g·s` global window box-downsampled by `g`. Absent
    /// when the consumer never reads the global window.
    pub x_glob: Option<Tensor<f32>>,
    pub y_loc: LabelMap,
    /// True where a local pixel fell outside the scene.
    pub pad_mask_loc: Vec<bool>,
    /// True where any source pixel of a global cell fell outside the scene.
    pub pad_mask_glob: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub enum Sample {
    Pair(Box<WindowPair>),
    Rejected { center: (i64, i64) },
}

/// Fraction of the un-augmented `s×s` window at `center` outside the scene.
pub fn oob_fraction(height: usize, width: usize, center: (i64, i64), s: usize) -> f64 {
    let half = (s / 2) as i64;
    let inside = |c: i64, n: usize| -> i64 { ((c + half).min(n as i64) - (c - half).max(0)).max(0) };
    let area = (s * s) as f64;
    (area - (inside(center.0, height) * inside(center.1, width)) as f64) / area
}

struct Rendered {
    image: Tensor<f32>,
    labels: Option<LabelMap>,
    pad: Vec<bool>,
}

fn render(scene: &Scene, center: (i64, i64), extent: usize, aug: Augment, labels: bool) -> Rendered {
    let (c, h, w) = (scene.channels(), scene.height(), scene.width());
    let img = scene.image.data();
    let plane = h * w;
    let mut out = vec![0f32; c * extent * extent];
    let mut pad = vec![false; extent * extent];
    let mut y = labels.then(|| LabelMap::filled(extent, extent, IGNORE));
    let half = (extent / 2) as i64;
    if aug.is_identity() {
        for i in 0..extent {
            let r = center.0 - half + i as i64;
            for j in 0..extent {
                let q = center.1 - half + j as i64;
                let o = i * extent + j;
                if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
                    pad[o] = true;
                    for ch in 0..c {
                        out[ch * extent * extent + o] = scene.channel_means[ch];
                    }
                    continue;
                }
                let src = r as usize * w + q as usize;
                for ch in 0..c {
                    out[ch * extent * extent + o] = img[ch * plane + src];
                }
                if let Some(y) = y.as_mut() {
                    y.classes[o] = scene.labels.classes[src];
                }
            }
        }
    } else {
        let (sin, cos) = aug.sin_cos();
        let (pr, pc) = (center.0 as f64, center.1 as f64);
        let e2 = extent as f64 / 2.0;
        for i in 0..extent {
            for j in 0..extent {
                let (u, v) = (i as f64 + 0.5 - e2, j as f64 + 0.5 - e2);
                let sy = pr + (cos * u - sin * v) / aug.scale;
                let sx = pc + (sin * u + cos * v) / aug.scale;
                let o = i * extent + j;
                if !(sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64) {
                    pad[o] = true;
                    for ch in 0..c {
                        out[ch * extent * extent + o] = scene.channel_means[ch];
                    }
                    continue;
                }
                let (fy, fx) = (sy - 0.5, sx - 0.5);
                let (y0, x0) = (fy.floor(), fx.floor());
                let (wy, wx) = ((fy - y0) as f32, (fx - x0) as f32);
                let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
                let (r0, r1) = (clamp(y0, h), clamp(y0 + 1.0, h));
                let (c0, c1) = (clamp(x0, w), clamp(x0 + 1.0, w));
                for ch in 0..c {
                    let p = &img[ch * plane..(ch + 1) * plane];
                    let top = p[r0 * w + c0] * (1.0 - wx) + p[r0 * w + c1] * wx;
                    let bot = p[r1 * w + c0] * (1.0 - wx) + p[r1 * w + c1] * wx;
                    out[ch * extent * extent + o] = top * (1.0 - wy) + bot * wy;
                }
                if let Some(y) = y.as_mut() {
                    y.classes[o] = scene.labels.get(sy as usize, sx as usize);
                }
            }
        }
    }
    Rendered {
        image: Tensor::new(&[c, extent, extent], out).expect("render shape"),
        labels: y,
        pad,
    }
}

/// `g×g` box average per channel of a `[C, g·s, g·s]` image.
pub fn downsample_box<S: Float>(img: &Tensor<S>, g: usize) -> Result<Tensor<S>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Shape(format!("downsample_box on {:?}", img.shape())));
    };
    if g == 0 || h % g != 0 || w % g != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {g}")));
    }
    let (oh, ow) = (h / g, w / g);
    let inv = S::one() / S::lit((g * g) as f64);
    let d = img.data();
    let mut out = vec![S::zero(); c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = S::zero();
                for r in i * g..(i + 1) * g {
                    for q in j * g..(j + 1) * g {
                        acc += d[(ch * h + r) * w + q];
                    }
                }
                out[(ch * oh + i) * ow + j] = acc * inv;
            }
        }
    }
    Ok(Tensor::new(&[c, oh, ow], out)?)
}

fn pool_pad(pad: &[bool], extent: usize, g: usize) -> Vec<bool> {
    let o = extent / g;
    (0..o * o)
        .map(|k| {
            let (i, j) = (k / o, k % o);
            (i * g..(i + 1) * g).any(|r| (j * g..(j + 1) * g).any(|q| pad[r * extent + q]))
        })
        .collect()
}

/// Renders the pair at `center` under `aug`, rejecting it if the
/// un-augmented local window lies too far outside the scene.
pub fn sample_at(
    scene: &Scene,
    cfg: &SamplerConfig,
    center: (i64, i64),
    aug: Augment,
    with_global: bool,
) -> Sample {
    if oob_fraction(scene.height(), scene.width(), center, cfg.s) > cfg.oob_reject_fraction {
        return Sample::Rejected { center };
    }
    let local = render(scene, center, cfg.s, aug, true);
    let (x_glob, pad_glob) = if with_global {
        let glob = render(scene, center, cfg.g * cfg.s, aug, false);
        let x = downsample_box(&glob.image, cfg.g).expect("global extent divisible by g");
        (Some(x), Some(pool_pad(&glob.pad, cfg.g * cfg.s, cfg.g)))
    } else {
        (None, None)
    };
    Sample::Pair(Box::new(WindowPair {
        scene: 0,
        center,
        augment: aug,
        x_loc: local.image,
        x_glob,
        y_loc: local.labels.expect("local labels"),
        pad_mask_loc: local.pad,
        pad_mask_glob: pad_glob,
    }))
}

/// One draw for `index`: a uniform center over the scene's pixels and an
/// augmentation, both from the `(seed, index)` stream.
pub fn sample_pair(scene: &Scene, cfg: &SamplerConfig, index: u64, with_global: bool) -> Sample {
    let mut r = rng::stream(cfg.seed, &[index]);
    let center = (
        r.random_range(0..scene.height()) as i64,
        r.random_range(0..scene.width()) as i64,
    );
    let aug = Augment::draw(cfg, &mut r);
    sample_at(scene, cfg, center, aug, with_global)
}

/// Re-renders `pair` at its center under a freshly drawn augmentation shared
/// by both windows.
pub fn augment(scene: &Scene, pair: &WindowPair, cfg: &SamplerConfig, rng: &mut impl Rng) -> Sample {
    let aug = Augment::draw(cfg, rng);
    match sample_at(scene, cfg, pair.center, aug, pair.x_glob.is_some()) {
        Sample::Pair(mut p) => {
            p.scene = pair.scene;
            Sample::Pair(p)
        }
        r => r,
    }
}

/// Draws pairs from a scene set. Pure in `(seed, index)`; rejected draws
/// are redrawn with a new attempt counter.
#[derive(Debug)]
pub struct Sampler {
    pub cfg: SamplerConfig,
    global_renders: AtomicUsize,
}

const MAX_ATTEMPTS: u64 = 1000;

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            global_renders: AtomicUsize::new(0),
        })
    }

    /// Global windows rendered so far.
    pub fn global_renders(&self) -> usize {
        self.global_renders.load(Ordering::Relaxed)
    }

    pub fn draw(&self, scenes: &[Scene], index: u64, with_global: bool) -> Result<WindowPair> {
        if scenes.is_empty() {
            return Err(Error::Config("no scenes to sample from".into()));
        }
        for attempt in 0..MAX_ATTEMPTS {
            let key = rng::mix64(index) ^ attempt;
            let which = (rng::mix64(key ^ self.cfg.seed.rotate_left(17)) % scenes.len() as u64) as usize;
            if let Sample::Pair(mut p) = sample_pair(&scenes[which], &self.cfg, key, with_global) {
                if with_global {
                    self.global_renders.fetch_add(1, Ordering::Relaxed);
                }
                p.scene = which;
                return Ok(*p);
            }
        }
        Err(Error::Config(format!("no acceptable window after {MAX_ATTEMPTS} attempts")))
    }

    /// Renders a pair at a fixed center without augmentation.
    pub fn at(&self, scene: &Scene, center: (i64, i64), with_global: bool) -> Sample {
        let s = sample_at(scene, &self.cfg, center, Augment::IDENTITY, with_global);
        if with_global && matches!(s, Sample::Pair(_)) {
            self.global_renders.fetch_add(1, Ordering::Relaxed);
        }
        s
    }
}

/// Normalized model inputs for a batch of pairs.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub x_loc: Tensor<S>,
    pub x_glob: Option<Tensor<S>>,
    pub labels: Vec<LabelMap>,
}

pub fn stack_batch<S: Float>(pairs: &[WindowPair]) -> Result<Batch<S>> {
    let first = pairs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let shape = first.x_loc.shape().to_vec();
    let stack = |get: &dyn Fn(&WindowPair) -> Option<&Tensor<f32>>| -> Result<Option<Tensor<S>>> {
        let mut data = Vec::with_capacity(pairs.len() * first.x_loc.numel());
        for p in pairs {
            let Some(t) = get(p) else { return Ok(None) };
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape("windows of differing size in one batch".into()));
            }
            data.extend(t.data().iter().map(|&v| S::lit(normalize(v) as f64)));
        }
        let mut full = vec![pairs.len()];
        full.extend_from_slice(&shape);
        Ok(Some(Tensor::new(&full, data)?))
    };
    let x_loc = stack(&|p| Some(&p.x_loc))?.expect("local windows");
    let x_glob = stack(&|p| p.x_glob.as_ref())?;
    Ok(Batch {
        x_loc,
        x_glob,
        labels: pairs.iter().map(|p| p.y_loc.clone()).collect(),
    })
}
