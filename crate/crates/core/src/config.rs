//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Every key has a
//! default; unknown keys are rejected. [`RunConfig::to_text`] writes every
//! key, and parsing that text reproduces the configuration exactly.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::sampler::SamplerConfig;
use crate::data::synth::{Beacon, SynthSpec, Texture};
use crate::error::{Error, Result};
use crate::losses::{LossGeometry, LossWeights};
use crate::relay::RelayVariant;
use crate::train::OptimConfig;
use crate::vit::ViTConfig;

/// Loop control around the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Stop after this many updates; 0 runs the full `optim.steps`.
    pub max_steps: u64,
    /// Validate every this many updates; 0 disables validation.
    pub eval_every: u64,
    /// Write `last.rlyt` every this many updates (and always at the end).
    pub checkpoint_every: u64,
    pub stop_grad: bool,
    pub val_overlap: f64,
    pub infer_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 0,
            eval_every: 200,
            checkpoint_every: 500,
            stop_grad: true,
            val_overlap: 0.0,
            infer_batch: 16,
        }
    }
}

/// Synthetic scene counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: RelayVariant,
    pub model: ViTConfig,
    /// Window side and extent factor are derived from `model`.
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub synth_seed: u64,
    pub splits: Splits,
    pub eval_overlap: f64,
    pub attn_pairs: usize,
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ViTConfig::vit_small();
        let mut c = Self {
            seed: 0,
            variant: RelayVariant::SequentialRelay,
            sampler: SamplerConfig::default(),
            model,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            synth_seed: 0,
            splits: Splits {
                train: 64,
                val: 16,
                test: 16,
            },
            eval_overlap: 0.5,
            attn_pairs: 16,
            data_dir: PathBuf::from("data"),
        };
        c.sync();
        c
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn texture_name(t: Texture) -> &'static str {
    match t {
        Texture::Fine => "fine",
        Texture::Coarse => "coarse",
        Texture::Diagonal => "diagonal",
    }
}

/// `fine/a=1,fine/b=2,...`
fn mapping_text(m: &[(Texture, Beacon, u8)]) -> String {
    m.iter()
        .map(|&(t, b, c)| {
            let b = match b {
                Beacon::A => "a",
                Beacon::B => "b",
            };
            format!("{}/{b}:{c}", texture_name(t))
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_weights(key: &str, v: &str) -> Result<[f64; 3]> {
    let w = v.split(',').map(|x| parse::<f64>(key, x.trim())).collect::<Result<Vec<_>>>()?;
    w.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated weights")))
}

fn parse_mapping(v: &str) -> Result<Vec<(Texture, Beacon, u8)>> {
    let bad = || Error::Config(format!("synth.mapping: cannot parse {v:?}"));
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (tb, c) = item.trim().split_once(':').ok_or_else(bad)?;
            let (t, b) = tb.split_once('/').ok_or_else(bad)?;
            let t = Texture::ALL
                .into_iter()
                .find(|&x| texture_name(x) == t)
                .ok_or_else(bad)?;
            let b = match b {
                "a" => Beacon::A,
                "b" => Beacon::B,
                _ => return Err(bad()),
            };
            Ok((t, b, c.parse().map_err(|_| bad())?))
        })
        .collect()
}

impl RunConfig {
    /// Parses a document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.sync();
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.sampler;
        let o = &mut self.optim;
        let y = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "model.depth" => m.depth = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.relay_count" => m.relay_count = parse(key, v)?,
            "model.share_projector" => m.share_projector = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.local_size" => m.local_size = parse(key, v)?,
            "model.global_extent" => m.global_extent = parse(key, v)?,
            "model.down_factor" => m.down_factor = parse(key, v)?,
            "sampler.oob_reject_fraction" => s.oob_reject_fraction = parse(key, v)?,
            "sampler.scale_min" => s.scale_range.0 = parse(key, v)?,
            "sampler.scale_max" => s.scale_range.1 = parse(key, v)?,
            "sampler.rotation_min_deg" => s.rotation_range_deg.0 = parse(key, v)?,
            "sampler.rotation_max_deg" => s.rotation_range_deg.1 = parse(key, v)?,
            "sampler.aug_prob" => s.aug_prob = parse(key, v)?,
            "optim.lr0" => o.lr0 = parse(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse(key, v)?,
            "optim.warmup_fraction" => o.warmup_fraction = parse(key, v)?,
            "optim.plateau_factor" => o.plateau_factor = parse(key, v)?,
            "optim.plateau_patience" => o.plateau_patience = parse(key, v)?,
            "optim.beta1" => o.betas.0 = parse(key, v)?,
            "optim.beta2" => o.betas.1 = parse(key, v)?,
            "optim.eps" => o.eps = parse(key, v)?,
            "optim.steps" => o.steps_total = parse(key, v)?,
            "optim.batch" => o.batch = parse(key, v)?,
            "loss.w_loc" => self.loss.w_loc = parse(key, v)?,
            "loss.w_glo" => self.loss.w_glo = parse(key, v)?,
            "loss.w_con" => self.loss.w_con = parse(key, v)?,
            "loss.stop_grad" => self.train.stop_grad = parse(key, v)?,
            "train.max_steps" => self.train.max_steps = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.val_overlap" => self.train.val_overlap = parse(key, v)?,
            "train.infer_batch" => self.train.infer_batch = parse(key, v)?,
            "synth.seed" => self.synth_seed = parse(key, v)?,
            "synth.train" => self.splits.train = parse(key, v)?,
            "synth.val" => self.splits.val = parse(key, v)?,
            "synth.test" => self.splits.test = parse(key, v)?,
            "synth.size" => y.size = parse(key, v)?,
            "synth.classes" => y.classes = parse(key, v)?,
            "synth.cell" => y.cell = parse(key, v)?,
            "synth.beacon_spacing" => y.beacon_spacing = parse(key, v)?,
            "synth.beacon_offset" => y.beacon_offset = parse(key, v)?,
            "synth.beacon_half" => y.beacon_half = parse(key, v)?,
            "synth.margin" => y.margin = parse(key, v)?,
            "synth.texture_fraction" => y.texture_fraction = parse(key, v)?,
            "synth.texture_weights" => y.texture_weights = parse_weights(key, v)?,
            "synth.background" => y.background = parse(key, v)?,
            "synth.contrast" => y.contrast = parse(key, v)?,
            "synth.noise" => y.noise = parse(key, v)?,
            "synth.mapping" => y.mapping = parse_mapping(v)?,
            "eval.overlap" => self.eval_overlap = parse(key, v)?,
            "attn.pairs" => self.attn_pairs = parse(key, v)?,
            "paths.data" => self.data_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Derives the sampler geometry and seed from the model and run seed.
    fn sync(&mut self) {
        self.sampler.s = self.model.local_size;
        self.sampler.g = if self.model.local_size == 0 {
            0
        } else {
            self.model.global_extent / self.model.local_size
        };
        self.sampler.seed = self.seed;
        self.optim.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.variant.validate(&self.model)?;
        if self.model.global_extent % self.model.local_size != 0 {
            return Err(Error::Config("global extent must be a multiple of the local size".into()));
        }
        self.sampler.validate()?;
        self.optim.validate()?;
        self.synth.validate()?;
        for (k, v) in [("train.val_overlap", self.train.val_overlap), ("eval.overlap", self.eval_overlap)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} outside [0, 1)")));
            }
        }
        if self.train.infer_batch == 0 {
            return Err(Error::Config("train.infer_batch must be positive".into()));
        }
        Ok(())
    }

    /// Update count the run stops at.
    pub fn stop_step(&self) -> u64 {
        match self.train.max_steps {
            0 => self.optim.steps_total,
            n => n,
        }
    }

    pub fn geometry(&self) -> LossGeometry {
        LossGeometry {
            down: self.model.down_factor,
            pool: self.model.down_factor,
            stop_grad: self.train.stop_grad,
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn Display| out.push_str(&format!("{k}={v}\n"));
        let (m, s, o, y) = (&self.model, &self.sampler, &self.optim, &self.synth);
        put("seed", &self.seed);
        put("variant", &self.variant);
        put("model.depth", &m.depth);
        put("model.width", &m.width);
        put("model.heads", &m.heads);
        put("model.patch_size", &m.patch_size);
        put("model.in_channels", &m.in_channels);
        put("model.num_classes", &m.num_classes);
        put("model.relay_count", &m.relay_count);
        put("model.share_projector", &m.share_projector);
        put("model.mlp_ratio", &m.mlp_ratio);
        put("model.local_size", &m.local_size);
        put("model.global_extent", &m.global_extent);
        put("model.down_factor", &m.down_factor);
        put("sampler.oob_reject_fraction", &f(s.oob_reject_fraction));
        put("sampler.scale_min", &f(s.scale_range.0));
        put("sampler.scale_max", &f(s.scale_range.1));
        put("sampler.rotation_min_deg", &f(s.rotation_range_deg.0));
        put("sampler.rotation_max_deg", &f(s.rotation_range_deg.1));
        put("sampler.aug_prob", &f(s.aug_prob));
        put("optim.lr0", &f(o.lr0));
        put("optim.weight_decay", &f(o.weight_decay));
        put("optim.warmup_fraction", &f(o.warmup_fraction));
        put("optim.plateau_factor", &f(o.plateau_factor));
        put("optim.plateau_patience", &o.plateau_patience);
        put("optim.beta1", &f(o.betas.0));
        put("optim.beta2", &f(o.betas.1));
        put("optim.eps", &f(o.eps));
        put("optim.steps", &o.steps_total);
        put("optim.batch", &o.batch);
        put("loss.w_loc", &f(self.loss.w_loc));
        put("loss.w_glo", &f(self.loss.w_glo));
        put("loss.w_con", &f(self.loss.w_con));
        put("loss.stop_grad", &self.train.stop_grad);
        put("train.max_steps", &self.train.max_steps);
        put("train.eval_every", &self.train.eval_every);
        put("train.checkpoint_every", &self.train.checkpoint_every);
        put("train.val_overlap", &f(self.train.val_overlap));
        put("train.infer_batch", &self.train.infer_batch);
        put("synth.seed", &self.synth_seed);
        put("synth.train", &self.splits.train);
        put("synth.val", &self.splits.val);
        put("synth.test", &self.splits.test);
        put("synth.size", &y.size);
        put("synth.classes", &y.classes);
        put("synth.cell", &y.cell);
        put("synth.beacon_spacing", &y.beacon_spacing);
        put("synth.beacon_offset", &y.beacon_offset);
        put("synth.beacon_half", &y.beacon_half);
        put("synth.margin", &y.margin);
        put("synth.texture_fraction", &f(y.texture_fraction));
        put("synth.texture_weights", &y.texture_weights.iter().map(|w| f(*w)).collect::<Vec<_>>().join(","));
        put("synth.background", &format!("{:?}", y.background));
        put("synth.contrast", &format!("{:?}", y.contrast));
        put("synth.noise", &format!("{:?}", y.noise));
        put("synth.mapping", &mapping_text(&y.mapping));
        put("eval.overlap", &f(self.eval_overlap));
        put("attn.pairs", &self.attn_pairs);
        put("paths.data", &self.data_dir.display());
        out
    }

    /// The keys that determine model shape and parameter names.
    pub fn model_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| l.starts_with("variant=") || l.starts_with("model."))
            .map(|l| format!("{l}\n"))
            .collect()
    }
}

/// Shortest text that parses back to the same `f64`.
fn f(v: f64) -> String {
    format!("{v:?}")
}
