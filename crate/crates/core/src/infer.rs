//! Full-scene prediction by sliding co-centered window pairs, and
//! segmentation metrics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::sampler::{sample_at, stack_batch, Augment, Sample, SamplerConfig, Scene, WindowPair};
use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE};
use crate::relay::Model;
use crate::tensor::Float;

/// Tile centers covering a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchPlan {
    pub centers: Vec<(i64, i64)>,
    pub overlap: f64,
    pub stride: usize,
}

fn axis_starts(n: usize, s: usize, stride: usize) -> Vec<usize> {
    let mut v = vec![0];
    while v.last().unwrap() + s < n {
        v.push(v.last().unwrap() + stride);
    }
    v
}

/// Tiles start at 0 and advance by `s·(1 - overlap)` until the scene edge is
/// covered.
pub fn plan_tiles(height: usize, width: usize, s: usize, overlap: f64) -> Result<StitchPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = ((s as f64 * (1.0 - overlap)).round() as usize).max(1);
    let half = (s / 2) as i64;
    let rows = axis_starts(height, s, stride);
    let cols = axis_starts(width, s, stride);
    let centers = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r as i64 + half, c as i64 + half)))
        .collect();
    Ok(StitchPlan { centers, overlap, stride })
}

/// Logit sums and coverage counts over a scene.
#[derive(Clone, Debug)]
pub struct Stitched {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub sums: Vec<f64>,
    pub counts: Vec<u32>,
}

impl Stitched {
    pub fn argmax(&self) -> LabelMap {
        let hw = self.height * self.width;
        let classes = (0..hw)
            .map(|p| {
                if self.counts[p] == 0 {
                    return IGNORE;
                }
                let mut best = 0;
                for k in 1..self.classes {
                    if self.sums[k * hw + p] > self.sums[best * hw + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            classes,
        }
    }

    /// Mean logit at `(k, r, c)`.
    pub fn mean(&self, k: usize, r: usize, c: usize) -> f64 {
        let p = r * self.width + c;
        self.sums[k * self.height * self.width + p] / self.counts[p] as f64
    }
}

/// Runs the model over every tile and averages local logits over coverage,
/// skipping padded pixels. Tiles are evaluated `batch` at a time, batches in
/// parallel; accumulation follows tile order.
pub fn sliding_logits<S: Float>(
    scene: &Scene,
    model: &Model<S>,
    sampler: &SamplerConfig,
    overlap: f64,
    batch: usize,
) -> Result<Stitched> {
    let s = sampler.s;
    if s != model.cfg.local_size {
        return Err(Error::Config(format!(
            "window side {s} differs from the model's local size {}",
            model.cfg.local_size
        )));
    }
    let plan = plan_tiles(scene.height(), scene.width(), s, overlap)?;
    let cfg = SamplerConfig {
        oob_reject_fraction: 1.0,
        ..sampler.clone()
    };
    let with_global = model.variant.uses_global();
    let render = |center: (i64, i64)| -> WindowPair {
        match sample_at(scene, &cfg, center, Augment::IDENTITY, with_global) {
            Sample::Pair(p) => *p,
            Sample::Rejected { .. } => unreachable!("rejection disabled"),
        }
    };
    let chunks: Vec<&[(i64, i64)]> = plan.centers.chunks(batch.max(1)).collect();
    let outputs: Vec<Result<(Vec<WindowPair>, Vec<S>)>> = chunks
        .par_iter()
        .map(|centers| {
            let pairs: Vec<WindowPair> = centers.iter().map(|&c| render(c)).collect();
            let b = stack_batch::<S>(&pairs)?;
            let out = model.predict(&b.x_loc, b.x_glob.as_ref(), false)?;
            Ok((pairs, out.z_loc.into_data()))
        })
        .collect();
    let (h, w, k) = (scene.height(), scene.width(), model.cfg.num_classes);
    let mut st = Stitched {
        classes: k,
        height: h,
        width: w,
        sums: vec![0.0; k * h * w],
        counts: vec![0; h * w],
    };
    let half = (s / 2) as i64;
    for res in outputs {
        let (pairs, z) = res?;
        for (t, p) in pairs.iter().enumerate() {
            let z = &z[t * k * s * s..(t + 1) * k * s * s];
            for i in 0..s {
                for j in 0..s {
                    if p.pad_mask_loc[i * s + j] {
                        continue;
                    }
                    let r = (p.center.0 - half + i as i64) as usize;
                    let c = (p.center.1 - half + j as i64) as usize;
                    st.counts[r * w + c] += 1;
                    for kk in 0..k {
                        st.sums[kk * h * w + r * w + c] += z[(kk * s + i) * s + j].to_f64_lossy();
                    }
                }
            }
        }
    }
    Ok(st)
}

pub fn sliding_infer<S: Float>(
    scene: &Scene,
    model: &Model<S>,
    sampler: &SamplerConfig,
    overlap: f64,
    batch: usize,
) -> Result<LabelMap> {
    Ok(sliding_logits(scene, model, sampler, overlap, batch)?.argmax())
}

/// Sliding-window predictions over a scene set, scored into one confusion.
pub fn evaluate<S: Float>(
    scenes: &[Scene],
    model: &Model<S>,
    sampler: &SamplerConfig,
    overlap: f64,
    batch: usize,
) -> Result<SegMetrics> {
    let k = model.cfg.num_classes;
    let parts = scenes
        .iter()
        .map(|sc| compute_miou(&sliding_infer(sc, model, sampler, overlap, batch)?, &sc.labels, k))
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(SegMetrics::from_confusion(k, vec![0; k * k]));
    }
    SegMetrics::merge(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub classes: usize,
    /// Row = truth, column = prediction.
    pub confusion: Vec<u64>,
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl SegMetrics {
    pub fn from_confusion(classes: usize, confusion: Vec<u64>) -> Self {
        let per_class_iou: Vec<Option<f64>> = (0..classes)
            .map(|c| {
                let tp = confusion[c * classes + c];
                let row: u64 = (0..classes).map(|j| confusion[c * classes + j]).sum();
                let col: u64 = (0..classes).map(|i| confusion[i * classes + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self {
            classes,
            confusion,
            per_class_iou,
            miou,
        }
    }

    /// Sums confusion matrices, e.g. over the scenes of a split.
    pub fn merge(parts: &[SegMetrics]) -> Result<Self> {
        let classes = parts.first().map_or(0, |p| p.classes);
        let mut conf = vec![0u64; classes * classes];
        for p in parts {
            if p.classes != classes {
                return Err(Error::Shape("merging metrics of differing class counts".into()));
            }
            for (a, b) in conf.iter_mut().zip(&p.confusion) {
                *a += b;
            }
        }
        Ok(Self::from_confusion(classes, conf))
    }

    pub fn valid_pixels(&self) -> u64 {
        self.confusion.iter().sum()
    }

    /// Flat `key=value` report.
    pub fn report(&self) -> String {
        let mut s = format!("miou={:.6}\nclasses={}\nvalid_pixels={}\n", self.miou, self.classes, self.valid_pixels());
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(s, "iou.{c}={v:.6}").unwrap(),
                None => writeln!(s, "iou.{c}=absent").unwrap(),
            }
        }
        s
    }

    /// One row per class: class, iou, tp, fp, fn.
    pub fn csv(&self) -> String {
        let k = self.classes;
        let mut s = String::from("class,iou,tp,fp,fn\n");
        for c in 0..k {
            let tp = self.confusion[c * k + c];
            let fp: u64 = (0..k).filter(|&i| i != c).map(|i| self.confusion[i * k + c]).sum();
            let fneg: u64 = (0..k).filter(|&j| j != c).map(|j| self.confusion[c * k + j]).sum();
            let iou = self.per_class_iou[c].map_or(String::new(), |v| format!("{v:.6}"));
            writeln!(s, "{c},{iou},{tp},{fp},{fneg}").unwrap();
        }
        s
    }
}

/// Confusion-matrix IoU over pixels whose truth is not `IGNORE`.
pub fn compute_miou(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<SegMetrics> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut conf = vec![0u64; classes * classes];
    for (&p, &t) in pred.classes.iter().zip(&truth.classes) {
        if t == IGNORE {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        if p >= classes || t >= classes {
            return Err(Error::Shape(format!("label {} outside {classes} classes", p.max(t))));
        }
        conf[t * classes + p] += 1;
    }
    Ok(SegMetrics::from_confusion(classes, conf))
}

/// Fraction of the remaining error removed: `(a - b) / (1 - b)`.
pub fn relative_improvement(iou_relay: f64, iou_sw: f64) -> Result<f64> {
    if iou_sw == 1.0 {
        return Err(Error::Undefined("relative improvement over a perfect baseline".into()));
    }
    Ok((iou_relay - iou_sw) / (1.0 - iou_sw))
}
