//! Synthetic scenes whose labels need both fine texture and distant context.
//!
//! Textured cells carry one of three grayscale textures. Square beacons, all
//! of one color per scene, sit on a coarse lattice far from every textured
//! cell, so a local window over a texture never shows the beacon while the
//! co-centered global window always does. The textures share the background
//! mean and average out exactly under any 4×4 box, so the global window
//! cannot tell them apart. The class of a textured pixel depends on the
//! texture and the beacon color.

use rand::Rng;

use crate::data::sampler::Scene;
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    /// 1 px checkerboard.
    Fine,
    /// 2 px checkerboard.
    Coarse,
    /// Diagonal stripes, period 4 along `r + c`.
    Diagonal,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Fine, Texture::Coarse, Texture::Diagonal];

    /// +1 or -1 at pixel `(r, c)`.
    pub fn sign(self, r: usize, c: usize) -> f32 {
        let on = match self {
            Texture::Fine => (r + c) % 2 == 0,
            Texture::Coarse => (r / 2 + c / 2) % 2 == 0,
            Texture::Diagonal => (r + c) % 4 < 2,
        };
        if on {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Beacon {
    A,
    B,
}

impl Beacon {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Beacon::A => [200.0, 40.0, 40.0],
            Beacon::B => [40.0, 40.0, 200.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub classes: usize,
    pub cell: usize,
    pub beacon_spacing: usize,
    pub beacon_offset: usize,
    pub beacon_half: usize,
    /// Minimum gap between a textured cell and any beacon pixel.
    pub margin: usize,
    pub texture_fraction: f64,
    /// Relative draw frequency of each texture, in `Texture::ALL` order.
    pub texture_weights: [f64; 3],
    pub background: f32,
    pub contrast: f32,
    pub noise: f32,
    /// `(texture, beacon, class)` rows; textures absent from the table are
    /// not placed.
    pub mapping: Vec<(Texture, Beacon, u8)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 512,
            classes: 4,
            cell: 32,
            beacon_spacing: 256,
            beacon_offset: 128,
            beacon_half: 64,
            margin: 32,
            texture_fraction: 0.6,
            texture_weights: [0.5, 0.2, 0.3],
            background: 128.0,
            contrast: 48.0,
            noise: 8.0,
            mapping: default_mapping(),
        }
    }
}

/// Fine follows the beacon, Coarse follows it inverted, Diagonal ignores it.
pub fn default_mapping() -> Vec<(Texture, Beacon, u8)> {
    vec![
        (Texture::Fine, Beacon::A, 1),
        (Texture::Fine, Beacon::B, 2),
        (Texture::Coarse, Beacon::A, 2),
        (Texture::Coarse, Beacon::B, 1),
        (Texture::Diagonal, Beacon::A, 3),
        (Texture::Diagonal, Beacon::B, 3),
    ]
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.cell == 0 || self.size % self.cell != 0 {
            return bad("size must be a multiple of the cell size");
        }
        if self.beacon_spacing == 0 || self.beacon_half == 0 || self.beacon_half > self.beacon_offset {
            return bad("beacon lattice must place whole beacons inside the scene");
        }
        if !(0.0..=1.0).contains(&self.texture_fraction) {
            return bad("texture_fraction outside [0, 1]");
        }
        if self.texture_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("texture weights must be finite and non-negative");
        }
        if self.classes < 2 || self.classes > 254 {
            return bad("classes outside 2..=254");
        }
        if self.mapping.iter().any(|&(_, _, c)| c as usize >= self.classes) {
            return bad("mapping class outside the class range");
        }
        Ok(())
    }

    pub fn class_of(&self, t: Texture, b: Beacon) -> Option<u8> {
        self.mapping.iter().find(|&&(mt, mb, _)| mt == t && mb == b).map(|&(_, _, c)| c)
    }

    /// Beacon centers along one axis.
    pub fn beacon_axis(&self) -> Vec<usize> {
        (self.beacon_offset..self.size).step_by(self.beacon_spacing).collect()
    }

    /// Whether the cell at `(row, col)` (cell units), grown by the margin,
    /// stays clear of every beacon.
    pub fn cell_eligible(&self, row: usize, col: usize) -> bool {
        let near = |start: usize| -> bool {
            let lo = start as i64 - self.margin as i64;
            let hi = (start + self.cell + self.margin) as i64;
            self.beacon_axis().iter().any(|&b| {
                let (blo, bhi) = (b as i64 - self.beacon_half as i64, (b + self.beacon_half) as i64);
                lo < bhi && blo < hi
            })
        };
        !(near(row * self.cell) && near(col * self.cell))
    }
}

/// A generated scene with its hidden factors.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub scene: Scene,
    pub beacon: Beacon,
    /// Texture per cell, row-major in cell units.
    pub cells: Vec<Option<Texture>>,
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthScene> {
    spec.validate()?;
    let mut r = rng::stream(seed, &[rng::key_hash("synth")]);
    let n = spec.size;
    let per = n / spec.cell;
    let beacon = if r.random_bool(0.5) { Beacon::A } else { Beacon::B };
    let placeable: Vec<(Texture, f64)> = Texture::ALL
        .into_iter()
        .zip(spec.texture_weights)
        .filter(|&(t, w)| w > 0.0 && spec.class_of(t, Beacon::A).is_some() && spec.class_of(t, Beacon::B).is_some())
        .collect();
    let total: f64 = placeable.iter().map(|p| p.1).sum();
    let mut cells = vec![None; per * per];
    for row in 0..per {
        for col in 0..per {
            // draw unconditionally so the stream does not depend on eligibility
            let on = r.random_bool(spec.texture_fraction);
            let u = r.random::<f64>() * total;
            if on && !placeable.is_empty() && spec.cell_eligible(row, col) {
                let mut acc = 0.0;
                let pick = placeable
                    .iter()
                    .find(|p| {
                        acc += p.1;
                        u < acc
                    })
                    .unwrap_or(&placeable[placeable.len() - 1]);
                cells[row * per + col] = Some(pick.0);
            }
        }
    }
    let mut img = vec![0f32; 3 * n * n];
    let mut y = vec![0u8; n * n];
    for rr in 0..n {
        for cc in 0..n {
            let noise = r.random_range(-spec.noise..=spec.noise);
            let (v, class) = match cells[(rr / spec.cell) * per + cc / spec.cell] {
                Some(t) => (
                    spec.background + spec.contrast * t.sign(rr, cc),
                    spec.class_of(t, beacon).expect("placeable texture"),
                ),
                None => (spec.background, 0),
            };
            let v = (v + noise).round().clamp(0.0, 255.0);
            for ch in 0..3 {
                img[ch * n * n + rr * n + cc] = v;
            }
            y[rr * n + cc] = class;
        }
    }
    let axis = spec.beacon_axis();
    let h = spec.beacon_half;
    let rgb = beacon.rgb();
    for &br in &axis {
        for &bc in &axis {
            for rr in br - h..(br + h).min(n) {
                for cc in bc - h..(bc + h).min(n) {
                    for ch in 0..3 {
                        img[ch * n * n + rr * n + cc] = rgb[ch];
                    }
                }
            }
        }
    }
    let scene = Scene::new(Tensor::new(&[3, n, n], img)?, LabelMap::new(n, n, y)?)?;
    Ok(SynthScene { scene, beacon, cells })
}

/// Best pixel accuracy on beacon-dependent classes for a predictor that sees
/// only the texture, with both beacon states equally likely.
pub fn local_only_bayes_accuracy(spec: &SynthSpec) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in Texture::ALL {
        let (Some(a), Some(b)) = (spec.class_of(t, Beacon::A), spec.class_of(t, Beacon::B)) else {
            continue;
        };
        if a == b {
            continue;
        }
        // each beacon state has mass 1/2; the best guess picks one of them
        num += 0.5;
        den += 1.0;
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Names of the scene splits, in seed-key order.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Generator seed of scene `index` of split `split`. Distinct splits and
/// indices give distinct seeds.
pub fn split_seed(base: u64, split: usize, index: usize) -> u64 {
    // the key is injective in (split, index), and mix64 is a bijection
    rng::mix64(base) ^ rng::mix64(((split as u64) << 40) | index as u64)
}

pub fn synth_split(spec: &SynthSpec, base: u64, split: usize, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| synth_generate(spec, split_seed(base, split, i)).map(|s| s.scene))
        .collect()
}
