//! Plain ViT encoder-decoder pieces: patchify/unpatchify, scale-specific
//! projectors, the 2D sinusoidal positional table, pre-norm transformer blocks
//! and the per-token linear segmentation head.
//!
//! Linear weights are stored `[in, out]` so a layer is `x·W + b`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub relay_count: usize,
    pub share_projector: bool,
    pub mlp_ratio: usize,
    /// Side of the local window in pixels.
    pub local_size: usize,
    /// Side of the global window in source pixels, before downsampling.
    pub global_extent: usize,
    pub down_factor: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::vit_small()
    }
}

impl ViTConfig {
    /// ViT-S/16 on 256 px windows with a 1024↓4 global window, 19 classes and
    /// four relay tokens, projectors not shared.
    pub fn vit_small() -> Self {
        Self {
            depth: 12,
            width: 384,
            heads: 6,
            patch_size: 16,
            in_channels: 3,
            num_classes: 19,
            relay_count: 4,
            share_projector: false,
            mlp_ratio: 4,
            local_size: 256,
            global_extent: 1024,
            down_factor: 4,
        }
    }

    /// The desk-scale model used by the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            patch_size: 8,
            in_channels: 3,
            num_classes: 4,
            relay_count: 4,
            share_projector: false,
            mlp_ratio: 4,
            local_size: 64,
            global_extent: 256,
            down_factor: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.width % 4 != 0 {
            return bad(format!("width {} must be divisible by 4 for the positional table", self.width));
        }
        if self.patch_size == 0 || self.local_size % self.patch_size != 0 {
            return bad(format!(
                "local_size {} not divisible by patch_size {}",
                self.local_size, self.patch_size
            ));
        }
        if self.down_factor == 0 || self.global_extent % self.down_factor != 0 {
            return bad(format!(
                "global_extent {} not divisible by down_factor {}",
                self.global_extent, self.down_factor
            ));
        }
        if self.global_extent / self.down_factor != self.local_size {
            return bad(format!(
                "processed global window {}↓{} must match local_size {}",
                self.global_extent, self.down_factor, self.local_size
            ));
        }
        if self.local_size % self.down_factor != 0 {
            return bad(format!(
                "local_size {} not divisible by down_factor {}",
                self.local_size, self.down_factor
            ));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes {} outside 2..=255", self.num_classes));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return bad("in_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.local_size / self.patch_size
    }

    /// Patch tokens per window.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.num_classes
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.width
    }
}

/// Patch vectors of one image plus the grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<S> {
    /// `[N, P·P·C]` raw patches, or `[N, D]` embeddings.
    pub tokens: Tensor<S>,
    pub grid: Option<(usize, usize)>,
}

/// Splits `[C, H, W]` into row-major patches flattened channel-major.
pub fn patchify<S: Float>(img: &Tensor<S>, patch: usize) -> Result<TokenSeq<S>> {
    let [c, h, w] = img.shape() else {
        return Err(Error::Shape(format!("patchify expects [C,H,W], got {:?}", img.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch {patch}")));
    }
    let (hp, wp) = (h / patch, w / patch);
    let mut g = Graph::new();
    let x = g.constant(img.clone().reshape(&[1, c, h, w])?);
    let p = patchify_var(&mut g, x, patch)?;
    let tokens = g.value(p).clone().reshape(&[hp * wp, c * patch * patch])?;
    Ok(TokenSeq {
        tokens,
        grid: Some((hp, wp)),
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Float>(seq: &TokenSeq<S>, patch: usize, channels: usize) -> Result<Tensor<S>> {
    let (hp, wp) = seq
        .grid
        .ok_or_else(|| Error::Shape("unpatchify needs a token grid".into()))?;
    let n = seq.tokens.shape()[0];
    if n != hp * wp || seq.tokens.shape()[1] != channels * patch * patch {
        return Err(Error::Shape(format!(
            "tokens {:?} inconsistent with grid {hp}x{wp}, patch {patch}, {channels} channels",
            seq.tokens.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(seq.tokens.clone().reshape(&[1, n, channels * patch * patch])?);
    let y = unpatchify_var(&mut g, x, patch, channels, (hp, wp))?;
    Ok(g.value(y).clone().reshape(&[channels, hp * patch, wp * patch])?)
}

/// `[B, C, H, W]` → `[B, N, C·P·P]`.
pub fn patchify_var<S: Float>(g: &mut Graph<S>, x: Var, patch: usize) -> Result<Var> {
    let &[b, c, h, w] = g.shape(x) else {
        return Err(Error::Shape(format!("expected [B,C,H,W], got {:?}", g.shape(x))));
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch {patch}")));
    }
    let (hp, wp) = (h / patch, w / patch);
    let r = g.reshape(x, &[b, c, hp, patch, wp, patch])?;
    let p = g.permute(r, &[0, 2, 4, 1, 3, 5])?;
    Ok(g.reshape(p, &[b, hp * wp, c * patch * patch])?)
}

/// `[B, N, C·P·P]` → `[B, C, H, W]`.
pub fn unpatchify_var<S: Float>(
    g: &mut Graph<S>,
    x: Var,
    patch: usize,
    channels: usize,
    grid: (usize, usize),
) -> Result<Var> {
    let b = g.shape(x)[0];
    let (hp, wp) = grid;
    let r = g.reshape(x, &[b, hp, wp, channels, patch, patch])?;
    let p = g.permute(r, &[0, 3, 1, 4, 2, 5])?;
    Ok(g.reshape(p, &[b, channels, hp * patch, wp * patch])?)
}

/// Fixed 2D sinusoidal table, `[rows·cols, D]`.
///
/// The first half of each row encodes the grid row and the second half the
/// column, each as `D/4` sine/cosine pairs.
pub fn positional_table<S: Float>(grid: (usize, usize), width: usize) -> Result<Tensor<S>> {
    if width % 4 != 0 || width == 0 {
        return Err(Error::Shape(format!("positional width {width} must be a positive multiple of 4")));
    }
    let (rows, cols) = grid;
    let quarter = width / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(rows * cols * width);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                data.extend(freqs.iter().map(|f| S::lit((pos * f).sin())));
                data.extend(freqs.iter().map(|f| S::lit((pos * f).cos())));
            }
        }
    }
    Ok(Tensor::new(&[rows * cols, width], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWeights {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Which projector embeds a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Local,
    Global,
}

/// What a model instance needs registered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightLayout {
    pub blocks: usize,
    pub local_projector: bool,
    pub global_projector: bool,
    /// Parameter name of the extra `R×D` tokens, if any.
    pub tokens: Option<&'static str>,
}

/// All learnable parameters of one model.
#[derive(Clone, Debug)]
pub struct Weights<S: Float> {
    pub store: ParamStore<S>,
    pub proj_local: Option<Linear>,
    pub proj_global: Option<Linear>,
    pub blocks: Vec<BlockWeights>,
    pub norm: Norm,
    pub head: Linear,
    pub tokens: Option<ParamId>,
}

fn trunc_normal<S: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break S::lit(v);
        }
    })
}

impl<S: Float> Weights<S> {
    /// Initializes parameters. Each tensor draws from its own stream keyed by
    /// name, so every layout built from one seed agrees on shared names.
    pub fn init(cfg: &ViTConfig, layout: WeightLayout, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let linear = |store: &mut ParamStore<S>, name: &str, din: usize, dout: usize| {
            let mut r = rng::named_stream(seed, &format!("{name}.weight"));
            let weight = store.register(format!("{name}.weight"), trunc_normal(&[din, dout], INIT_STD, &mut r));
            let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[dout]));
            Linear { weight, bias }
        };
        let norm = |store: &mut ParamStore<S>, name: &str, d: usize| Norm {
            gain: store.register(format!("{name}.weight"), Tensor::full(&[d], S::one())),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[d])),
        };
        let d = cfg.width;
        let both = layout.local_projector && layout.global_projector;
        let proj_local = layout
            .local_projector
            .then(|| linear(&mut store, "proj.local", cfg.patch_dim(), d));
        let proj_global = (layout.global_projector && !(both && cfg.share_projector))
            .then(|| linear(&mut store, "proj.global", cfg.patch_dim(), d));
        let tokens = layout.tokens.filter(|_| cfg.relay_count > 0).map(|name| {
            let mut r = rng::named_stream(seed, name);
            let values = init_relays::<S>(cfg.relay_count, d, &mut r);
            store.register(name, values)
        });
        let blocks = (0..layout.blocks)
            .map(|b| {
                let p = format!("block.{b}");
                BlockWeights {
                    norm1: norm(&mut store, &format!("{p}.norm1"), d),
                    q: linear(&mut store, &format!("{p}.attn.q"), d, d),
                    k: linear(&mut store, &format!("{p}.attn.k"), d, d),
                    v: linear(&mut store, &format!("{p}.attn.v"), d, d),
                    o: linear(&mut store, &format!("{p}.attn.o"), d, d),
                    norm2: norm(&mut store, &format!("{p}.norm2"), d),
                    fc1: linear(&mut store, &format!("{p}.mlp.fc1"), d, cfg.hidden()),
                    fc2: linear(&mut store, &format!("{p}.mlp.fc2"), cfg.hidden(), d),
                }
            })
            .collect();
        let final_norm = norm(&mut store, "norm", d);
        let head = linear(&mut store, "head", d, cfg.head_dim());
        Self {
            store,
            proj_local,
            proj_global,
            blocks,
            norm: final_norm,
            head,
            tokens,
        }
    }

    /// The projector for a scale; a model holding a single projector uses it
    /// for both scales.
    pub fn projector(&self, scale: Scale) -> Result<Linear> {
        let (own, other) = match scale {
            Scale::Local => (self.proj_local, self.proj_global),
            Scale::Global => (self.proj_global, self.proj_local),
        };
        own.or(other)
            .ok_or_else(|| Error::Variant("model has no patch projector".into()))
    }
}

/// `R×D` standard-normal relay tokens.
pub fn init_relays<S: Float>(count: usize, width: usize, rng: &mut impl Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(&[count, width], |_| S::lit(normal.sample(rng)))
}

pub fn linear<S: Float>(g: &mut Graph<S>, w: &Weights<S>, layer: Linear, x: Var) -> Result<Var> {
    let wt = g.param(&w.store, layer.weight);
    let b = g.param(&w.store, layer.bias);
    let y = g.matmul(x, wt)?;
    Ok(g.add(y, b)?)
}

pub fn norm<S: Float>(g: &mut Graph<S>, w: &Weights<S>, n: Norm, x: Var) -> Result<Var> {
    let gain = g.param(&w.store, n.gain);
    let bias = g.param(&w.store, n.bias);
    Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
}

/// Patchify, project with the scale's projector and add the positional table.
/// `img` is `[B, C, H, W]`; the result is `[B, N, D]`.
pub fn embed<S: Float>(
    g: &mut Graph<S>,
    w: &Weights<S>,
    cfg: &ViTConfig,
    img: Var,
    scale: Scale,
    pos: &Tensor<S>,
) -> Result<Var> {
    let patches = patchify_var(g, img, cfg.patch_size)?;
    if g.shape(patches)[2] != cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "patch length {} != P·P·C = {}",
            g.shape(patches)[2],
            cfg.patch_dim()
        )));
    }
    let proj = w.projector(scale)?;
    let f = linear(g, w, proj, patches)?;
    let pos = g.constant(pos.clone());
    Ok(g.add(f, pos)?)
}

/// Pre-norm residual multi-head self-attention followed by a pre-norm
/// residual MLP, over `[B, T, D]`. When `attn_out` is given, the attention
/// probabilities `[B, H, T, T]` are appended to it.
pub fn transformer_block<S: Float>(
    g: &mut Graph<S>,
    w: &Weights<S>,
    cfg: &ViTConfig,
    block: &BlockWeights,
    x: Var,
    attn_out: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let &[b, t, d] = g.shape(x) else {
        return Err(Error::Shape(format!("block expects [B,T,D], got {:?}", g.shape(x))));
    };
    let heads = cfg.heads;
    let dh = d / heads;
    let h = norm(g, w, block.norm1, x)?;
    let split_heads = |g: &mut Graph<S>, v: Var| -> Result<Var> {
        let r = g.reshape(v, &[b, t, heads, dh])?;
        Ok(g.permute(r, &[0, 2, 1, 3])?)
    };
    let q = linear(g, w, block.q, h)?;
    let q = g.scale(q, S::lit(1.0 / (dh as f64).sqrt()))?;
    let q = split_heads(g, q)?;
    let k = linear(g, w, block.k, h)?;
    let k = split_heads(g, k)?;
    let v = linear(g, w, block.v, h)?;
    let v = split_heads(g, v)?;
    let scores = g.matmul_t(q, k)?;
    let attn = g.softmax(scores, 3)?;
    if let Some(out) = attn_out {
        out.push(attn);
    }
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    let o = linear(g, w, block.o, ctx)?;
    let x = g.add(x, o)?;
    let h = norm(g, w, block.norm2, x)?;
    let m = linear(g, w, block.fc1, h)?;
    let m = g.gelu(m)?;
    let m = linear(g, w, block.fc2, m)?;
    Ok(g.add(x, m)?)
}

/// Final norm, per-token linear map to `P·P·K`, unpatchify to `[B, K, H, W]`.
pub fn seg_head<S: Float>(g: &mut Graph<S>, w: &Weights<S>, cfg: &ViTConfig, x: Var) -> Result<Var> {
    let h = norm(g, w, w.norm, x)?;
    let y = linear(g, w, w.head, h)?;
    let grid = cfg.grid();
    unpatchify_var(g, y, cfg.patch_size, cfg.num_classes, (grid, grid))
}
