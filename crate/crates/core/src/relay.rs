//! Cross-scale forward strategies.
//!
//! Every variant runs on batched windows `[B, C, s, s]`. The relay tokens
//! occupy the first `R` slots of each concatenated sequence.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::vit::{self, positional_table, transformer_block, Scale, ViTConfig, WeightLayout, Weights};

pub const RELAY_PARAM: &str = "relay.tokens";
pub const REGISTER_PARAM: &str = "register.tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelayVariant {
    SequentialRelay,
    ParallelRelay,
    FewerBlocks(usize),
    TokenConcat,
    DecisionFusion,
    RegistersOnly,
    LocalOnly,
    GlobalOnly,
}

impl RelayVariant {
    pub const ALL: [RelayVariant; 8] = [
        RelayVariant::SequentialRelay,
        RelayVariant::ParallelRelay,
        RelayVariant::FewerBlocks(6),
        RelayVariant::TokenConcat,
        RelayVariant::DecisionFusion,
        RelayVariant::RegistersOnly,
        RelayVariant::LocalOnly,
        RelayVariant::GlobalOnly,
    ];

    /// Whether the variant reads the global window at all.
    pub fn uses_global(self) -> bool {
        !matches!(self, RelayVariant::LocalOnly | RelayVariant::RegistersOnly)
    }

    pub fn uses_local(self) -> bool {
        self != RelayVariant::GlobalOnly
    }

    /// Whether `z_loc` is a genuine local prediction that `L_loc` may supervise.
    pub fn supervises_local(self) -> bool {
        self != RelayVariant::GlobalOnly
    }

    pub fn has_relay(self) -> bool {
        matches!(
            self,
            RelayVariant::SequentialRelay | RelayVariant::ParallelRelay | RelayVariant::FewerBlocks(_)
        )
    }

    pub fn blocks(self, cfg: &ViTConfig) -> usize {
        match self {
            RelayVariant::FewerBlocks(keep) => keep,
            _ => cfg.depth,
        }
    }

    pub fn validate(self, cfg: &ViTConfig) -> Result<()> {
        if let RelayVariant::FewerBlocks(keep) = self {
            if keep == 0 || keep > cfg.depth {
                return Err(Error::Variant(format!(
                    "fewer_blocks keep={keep} outside 1..={}",
                    cfg.depth
                )));
            }
        }
        Ok(())
    }

    pub fn layout(self, cfg: &ViTConfig) -> WeightLayout {
        let tokens = match self {
            v if v.has_relay() => Some(RELAY_PARAM),
            RelayVariant::RegistersOnly => Some(REGISTER_PARAM),
            _ => None,
        };
        WeightLayout {
            blocks: self.blocks(cfg),
            local_projector: self.uses_local(),
            global_projector: self.uses_global(),
            tokens,
        }
    }
}

impl fmt::Display for RelayVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelayVariant::SequentialRelay => f.write_str("sequential_relay"),
            RelayVariant::ParallelRelay => f.write_str("parallel_relay"),
            RelayVariant::FewerBlocks(k) => write!(f, "fewer_blocks:{k}"),
            RelayVariant::TokenConcat => f.write_str("token_concat"),
            RelayVariant::DecisionFusion => f.write_str("decision_fusion"),
            RelayVariant::RegistersOnly => f.write_str("registers_only"),
            RelayVariant::LocalOnly => f.write_str("local_only"),
            RelayVariant::GlobalOnly => f.write_str("global_only"),
        }
    }
}

impl FromStr for RelayVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sequential_relay" => RelayVariant::SequentialRelay,
            "parallel_relay" => RelayVariant::ParallelRelay,
            "token_concat" => RelayVariant::TokenConcat,
            "decision_fusion" => RelayVariant::DecisionFusion,
            "registers_only" => RelayVariant::RegistersOnly,
            "local_only" => RelayVariant::LocalOnly,
            "global_only" => RelayVariant::GlobalOnly,
            _ => {
                let keep = s
                    .strip_prefix("fewer_blocks:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Variant(format!("unknown variant {s:?}")))?;
                RelayVariant::FewerBlocks(keep)
            }
        })
    }
}

/// Per-block intermediates recorded when tracing is on.
#[derive(Clone, Debug, Default)]
pub struct RelayTrace {
    /// Relay tokens leaving the global step of each block, `[B, R, D]`.
    pub after_global: Vec<Var>,
    /// Relay tokens leaving the local step of each block.
    pub after_local: Vec<Var>,
    /// Relay state carried into the next block. Equal to `after_local` for
    /// the sequential scheme, the branch mean for the parallel one.
    pub carried: Vec<Var>,
    /// Attention probabilities `[B, H, T, T]` of each global-branch block call.
    pub attn_global: Vec<Var>,
    /// Attention probabilities of each local-branch block call.
    pub attn_local: Vec<Var>,
}

/// Graph handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DualVars {
    /// `[B, K, s, s]` local logits.
    pub z_loc: Var,
    /// `[B, K, s, s]` logits over the downsampled global window.
    pub z_glob: Option<Var>,
}

/// Materialized forward outputs.
#[derive(Clone, Debug)]
pub struct DualOutput<S> {
    pub z_loc: Tensor<S>,
    pub z_glob: Option<Tensor<S>>,
    pub relay_trace: Option<Vec<Tensor<S>>>,
}

/// Weights plus the configuration and variant they were built for.
#[derive(Clone, Debug)]
pub struct Model<S: Float> {
    pub cfg: ViTConfig,
    pub variant: RelayVariant,
    pub weights: Weights<S>,
    pos: Tensor<S>,
}

impl<S: Float> Model<S> {
    pub fn new(cfg: &ViTConfig, variant: RelayVariant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        variant.validate(cfg)?;
        let weights = Weights::init(cfg, variant.layout(cfg), seed);
        let pos = positional_table(( cfg.grid(), cfg.grid()), cfg.width)?;
        Ok(Self {
            cfg: cfg.clone(),
            variant,
            weights,
            pos,
        })
    }

    pub fn positional(&self) -> &Tensor<S> {
        &self.pos
    }

    /// Records the variant's forward on `g`. `x_glob` may be `None` only for
    /// variants that ignore the global window.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x_loc: Var,
        x_glob: Option<Var>,
        trace: Option<&mut RelayTrace>,
    ) -> Result<DualVars> {
        forward_variant(g, self, self.variant, x_loc, x_glob, trace)
    }

    /// Runs one forward on concrete tensors and returns the logits.
    pub fn predict(&self, x_loc: &Tensor<S>, x_glob: Option<&Tensor<S>>, keep_trace: bool) -> Result<DualOutput<S>> {
        let mut g = Graph::new();
        let xl = g.constant(x_loc.clone());
        let xg = x_glob.map(|x| g.constant(x.clone()));
        let mut trace = RelayTrace::default();
        let out = self.forward(&mut g, xl, xg, keep_trace.then_some(&mut trace))?;
        Ok(DualOutput {
            z_loc: g.value(out.z_loc).clone(),
            z_glob: out.z_glob.map(|v| g.value(v).clone()),
            relay_trace: keep_trace.then(|| trace.carried.iter().map(|&v| g.value(v).clone()).collect()),
        })
    }
}

fn block_call<S: Float>(
    g: &mut Graph<S>,
    m: &Model<S>,
    b: usize,
    relay: Option<Var>,
    x: Var,
    attn: Option<&mut Vec<Var>>,
) -> Result<(Option<Var>, Var)> {
    let blk = &m.weights.blocks[b];
    match relay {
        None => Ok((None, transformer_block(g, &m.weights, &m.cfg, blk, x, attn)?)),
        Some(r) => {
            let rn = g.shape(r)[1];
            let n = g.shape(x)[1];
            let cat = g.concat(&[r, x], 1)?;
            let y = transformer_block(g, &m.weights, &m.cfg, blk, cat, attn)?;
            let parts = g.split(y, 1, &[rn, n])?;
            Ok((Some(parts[0]), parts[1]))
        }
    }
}

fn check_pair<S: Float>(g: &Graph<S>, x_loc: Var, x_glob: Var) -> Result<()> {
    if g.shape(x_loc) != g.shape(x_glob) {
        return Err(Error::Shape(format!(
            "local window {:?} and processed global window {:?} differ in token count",
            g.shape(x_loc),
            g.shape(x_glob)
        )));
    }
    Ok(())
}

fn relay_input<S: Float>(g: &mut Graph<S>, m: &Model<S>, batch: usize) -> Result<Option<Var>> {
    match m.weights.tokens {
        None => Ok(None),
        Some(id) => {
            let r = g.param(&m.weights.store, id);
            Ok(Some(g.broadcast_batch(r, batch)?))
        }
    }
}

fn require_global(variant: RelayVariant, x_glob: Option<Var>) -> Result<Var> {
    x_glob.ok_or_else(|| Error::Variant(format!("{variant} needs a global window")))
}

/// One plain ViT pass over a single scale, no extra tokens.
pub fn forward_baseline<S: Float>(g: &mut Graph<S>, m: &Model<S>, x: Var, scale: Scale) -> Result<Var> {
    let mut f = vit::embed(g, &m.weights, &m.cfg, x, scale, &m.pos)?;
    for b in 0..m.weights.blocks.len() {
        f = block_call(g, m, b, None, f, None)?.1;
    }
    vit::seg_head(g, &m.weights, &m.cfg, f)
}

/// Two-step relay exchange per block: global step first, then local.
pub fn forward_sequential<S: Float>(
    g: &mut Graph<S>,
    m: &Model<S>,
    x_loc: Var,
    x_glob: Var,
    blocks: usize,
    mut trace: Option<&mut RelayTrace>,
) -> Result<DualVars> {
    check_pair(g, x_loc, x_glob)?;
    let batch = g.shape(x_loc)[0];
    let mut f_loc = vit::embed(g, &m.weights, &m.cfg, x_loc, Scale::Local, &m.pos)?;
    let mut f_glob = vit::embed(g, &m.weights, &m.cfg, x_glob, Scale::Global, &m.pos)?;
    let mut relay = relay_input(g, m, batch)?;
    for b in 0..blocks {
        let (r_half, fg) = block_call(g, m, b, relay, f_glob, trace.as_mut().map(|t| &mut t.attn_global))?;
        let (r_next, fl) = block_call(g, m, b, r_half, f_loc, trace.as_mut().map(|t| &mut t.attn_local))?;
        f_glob = fg;
        f_loc = fl;
        relay = r_next;
        if let (Some(t), Some(h), Some(r)) = (trace.as_mut(), r_half, r_next) {
            t.after_global.push(h);
            t.after_local.push(r);
            t.carried.push(r);
        }
    }
    Ok(DualVars {
        z_loc: vit::seg_head(g, &m.weights, &m.cfg, f_loc)?,
        z_glob: Some(vit::seg_head(g, &m.weights, &m.cfg, f_glob)?),
    })
}

/// Both branches read the same relay state; the carried state is their mean.
pub fn forward_parallel<S: Float>(
    g: &mut Graph<S>,
    m: &Model<S>,
    x_loc: Var,
    x_glob: Var,
    mut trace: Option<&mut RelayTrace>,
) -> Result<DualVars> {
    check_pair(g, x_loc, x_glob)?;
    let batch = g.shape(x_loc)[0];
    let mut f_loc = vit::embed(g, &m.weights, &m.cfg, x_loc, Scale::Local, &m.pos)?;
    let mut f_glob = vit::embed(g, &m.weights, &m.cfg, x_glob, Scale::Global, &m.pos)?;
    let mut relay = relay_input(g, m, batch)?;
    for b in 0..m.weights.blocks.len() {
        let (r_g, fg) = block_call(g, m, b, relay, f_glob, trace.as_mut().map(|t| &mut t.attn_global))?;
        let (r_l, fl) = block_call(g, m, b, relay, f_loc, trace.as_mut().map(|t| &mut t.attn_local))?;
        f_glob = fg;
        f_loc = fl;
        if let (Some(rg), Some(rl)) = (r_g, r_l) {
            let sum = g.add(rg, rl)?;
            let mean = g.scale(sum, S::lit(0.5))?;
            relay = Some(mean);
            if let Some(t) = trace.as_mut() {
                t.after_global.push(rg);
                t.after_local.push(rl);
                t.carried.push(mean);
            }
        }
    }
    Ok(DualVars {
        z_loc: vit::seg_head(g, &m.weights, &m.cfg, f_loc)?,
        z_glob: Some(vit::seg_head(g, &m.weights, &m.cfg, f_glob)?),
    })
}

/// Central `s/g` crop of global logits, nearest-upsampled back to `s`.
pub fn global_to_local<S: Float>(g: &mut Graph<S>, cfg: &ViTConfig, z_glob: Var) -> Result<Var> {
    let side = cfg.local_size / cfg.down_factor;
    let off = (cfg.local_size - side) / 2;
    let c = g.crop2d(z_glob, off, off, side, side)?;
    Ok(g.upsample_nearest2d(c, cfg.down_factor)?)
}

/// Dispatches a forward for `variant` using `m`'s weights.
pub fn forward_variant<S: Float>(
    g: &mut Graph<S>,
    m: &Model<S>,
    variant: RelayVariant,
    x_loc: Var,
    x_glob: Option<Var>,
    mut trace: Option<&mut RelayTrace>,
) -> Result<DualVars> {
    variant.validate(&m.cfg)?;
    if variant.blocks(&m.cfg) > m.weights.blocks.len() {
        return Err(Error::Variant(format!(
            "{variant} needs {} blocks, weights hold {}",
            variant.blocks(&m.cfg),
            m.weights.blocks.len()
        )));
    }
    match variant {
        RelayVariant::SequentialRelay => {
            let xg = require_global(variant, x_glob)?;
            forward_sequential(g, m, x_loc, xg, m.cfg.depth, trace)
        }
        RelayVariant::FewerBlocks(keep) => {
            let xg = require_global(variant, x_glob)?;
            forward_sequential(g, m, x_loc, xg, keep, trace)
        }
        RelayVariant::ParallelRelay => {
            let xg = require_global(variant, x_glob)?;
            forward_parallel(g, m, x_loc, xg, trace)
        }
        RelayVariant::LocalOnly => Ok(DualVars {
            z_loc: forward_baseline(g, m, x_loc, Scale::Local)?,
            z_glob: None,
        }),
        RelayVariant::GlobalOnly => {
            let xg = require_global(variant, x_glob)?;
            let z_glob = forward_baseline(g, m, xg, Scale::Global)?;
            Ok(DualVars {
                z_loc: global_to_local(g, &m.cfg, z_glob)?,
                z_glob: Some(z_glob),
            })
        }
        RelayVariant::DecisionFusion => {
            let xg = require_global(variant, x_glob)?;
            check_pair(g, x_loc, xg)?;
            let z_l = forward_baseline(g, m, x_loc, Scale::Local)?;
            let z_glob = forward_baseline(g, m, xg, Scale::Global)?;
            let up = global_to_local(g, &m.cfg, z_glob)?;
            let sum = g.add(z_l, up)?;
            Ok(DualVars {
                z_loc: g.scale(sum, S::lit(0.5))?,
                z_glob: Some(z_glob),
            })
        }
        RelayVariant::RegistersOnly => {
            let batch = g.shape(x_loc)[0];
            let mut f = vit::embed(g, &m.weights, &m.cfg, x_loc, Scale::Local, &m.pos)?;
            let mut reg = relay_input(g, m, batch)?;
            for b in 0..m.weights.blocks.len() {
                let (r, x) = block_call(g, m, b, reg, f, trace.as_mut().map(|t| &mut t.attn_local))?;
                reg = r;
                f = x;
                if let (Some(t), Some(r)) = (trace.as_mut(), r) {
                    t.after_local.push(r);
                    t.carried.push(r);
                }
            }
            Ok(DualVars {
                z_loc: vit::seg_head(g, &m.weights, &m.cfg, f)?,
                z_glob: None,
            })
        }
        RelayVariant::TokenConcat => {
            let xg = require_global(variant, x_glob)?;
            check_pair(g, x_loc, xg)?;
            let fl = vit::embed(g, &m.weights, &m.cfg, x_loc, Scale::Local, &m.pos)?;
            let fg = vit::embed(g, &m.weights, &m.cfg, xg, Scale::Global, &m.pos)?;
            let n = g.shape(fl)[1];
            let mut f = g.concat(&[fl, fg], 1)?;
            for b in 0..m.weights.blocks.len() {
                f = block_call(g, m, b, None, f, trace.as_mut().map(|t| &mut t.attn_local))?.1;
            }
            let parts = g.split(f, 1, &[n, n])?;
            Ok(DualVars {
                z_loc: vit::seg_head(g, &m.weights, &m.cfg, parts[0])?,
                z_glob: Some(vit::seg_head(g, &m.weights, &m.cfg, parts[1])?),
            })
        }
    }
}
