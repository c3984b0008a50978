//! Relay attention maps and analytic parameter, FLOP and memory accounting.
//!
//! FLOPs are counted as two per multiply-accumulate over matrix products
//! only: QKV and output projections, `QKᵀ`, `AV`, the MLP, patch projectors
//! and the head. Biases, norms, softmax and GELU are not counted.

use crate::data::sampler::{stack_batch, WindowPair};
use crate::error::{Error, Result};
use crate::relay::{Model, RelayTrace, RelayVariant};
use crate::tensor::{Float, Graph};
use crate::vit::ViTConfig;

/// Average attention of one relay token over the patch tokens of each
/// window, on the patch grid. Each map sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMap {
    pub relay: usize,
    pub grid: usize,
    /// From the local step of each block.
    pub local: Vec<f64>,
    /// From the global step of each block; absent for variants without one.
    pub global: Option<Vec<f64>>,
}

fn accumulate<S: Float>(
    g: &Graph<S>,
    attn: &[crate::tensor::Var],
    relays: usize,
    acc: &mut [f64],
) -> usize {
    let mut rows = 0;
    for &a in attn {
        let &[b, h, t, _] = g.shape(a) else { continue };
        let n = t - relays;
        let d = g.value(a).data();
        for bi in 0..b {
            for hi in 0..h {
                for r in 0..relays {
                    let row = &d[((bi * h + hi) * t + r) * t..][..t];
                    for (k, &p) in row[relays..].iter().enumerate() {
                        acc[r * n + k] += p.to_f64_lossy();
                    }
                }
                rows += 1;
            }
        }
    }
    rows
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Relay-query attention over patch keys, averaged over heads, blocks and
/// the given pairs, then renormalized per relay token and window.
pub fn extract_attention<S: Float>(model: &Model<S>, pairs: &[WindowPair]) -> Result<Vec<AttnMap>> {
    let relays = match model.weights.tokens {
        Some(id) => model.weights.store.get(id).shape()[0],
        None => {
            return Err(Error::Variant(format!(
                "{} has no relay tokens to trace",
                model.variant
            )))
        }
    };
    if pairs.is_empty() {
        return Err(Error::Shape("no pairs to average over".into()));
    }
    let grid = model.cfg.grid();
    let n = grid * grid;
    let mut local = vec![0.0; relays * n];
    let mut global = vec![0.0; relays * n];
    let with_global = model.variant.uses_global();
    for chunk in pairs.chunks(8) {
        let b = stack_batch::<S>(chunk)?;
        let mut g = Graph::new();
        let xl = g.constant(b.x_loc);
        let xg = b.x_glob.map(|x| g.constant(x));
        let mut trace = RelayTrace::default();
        model.forward(&mut g, xl, xg, Some(&mut trace))?;
        accumulate(&g, &trace.attn_local, relays, &mut local);
        if with_global {
            accumulate(&g, &trace.attn_global, relays, &mut global);
        }
    }
    Ok((0..relays)
        .map(|r| {
            let mut l = local[r * n..(r + 1) * n].to_vec();
            normalize(&mut l);
            let gm = with_global.then(|| {
                let mut v = global[r * n..(r + 1) * n].to_vec();
                normalize(&mut v);
                v
            });
            AttnMap {
                relay: r,
                grid,
                local: l,
                global: gm,
            }
        })
        .collect())
}

/// Analytic cost of one model variant.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CostReport {
    pub params_total: u64,
    pub params_relay: u64,
    pub params_projectors: u64,
    pub params_blocks: u64,
    pub params_head: u64,
    /// Forward FLOPs per window pair.
    pub flops_forward: u64,
    /// The `QKᵀ` and `AV` share of `flops_forward`.
    pub flops_attention: u64,
    /// Activations retained for backward at the analysed batch size.
    pub peak_activation_bytes: u64,
    /// The attention-probability share of `peak_activation_bytes`.
    pub attention_activation_bytes: u64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "variant,params_total,params_relay,params_projectors,params_blocks,params_head,flops_forward,flops_attention,peak_activation_bytes,attention_activation_bytes";

    pub fn csv_row(&self, variant: RelayVariant) -> String {
        format!(
            "{variant},{},{},{},{},{},{},{},{},{}",
            self.params_total,
            self.params_relay,
            self.params_projectors,
            self.params_blocks,
            self.params_head,
            self.flops_forward,
            self.flops_attention,
            self.peak_activation_bytes,
            self.attention_activation_bytes
        )
    }
}

fn projectors(cfg: &ViTConfig, v: RelayVariant) -> u64 {
    if v.uses_local() && v.uses_global() && !cfg.share_projector {
        2
    } else {
        1
    }
}

fn extra_tokens(cfg: &ViTConfig, v: RelayVariant) -> u64 {
    if v.has_relay() || v == RelayVariant::RegistersOnly {
        cfg.relay_count as u64
    } else {
        0
    }
}

/// Closed-form parameter count.
pub fn count_params(cfg: &ViTConfig, v: RelayVariant) -> CostReport {
    let d = cfg.width as u64;
    let hd = cfg.hidden() as u64;
    let pd = cfg.patch_dim() as u64;
    let out = cfg.head_dim() as u64;
    let block = 4 * (d * d + d) + 2 * 2 * d + (d * hd + hd) + (hd * d + d);
    let params_projectors = projectors(cfg, v) * (pd * d + d);
    let params_blocks = v.blocks(cfg) as u64 * block;
    let params_head = 2 * d + d * out + out;
    let params_relay = extra_tokens(cfg, v) * d;
    CostReport {
        params_total: params_projectors + params_blocks + params_head + params_relay,
        params_relay,
        params_projectors,
        params_blocks,
        params_head,
        ..Default::default()
    }
}

/// `(total, attention)` MACs of one block call over `t` tokens.
fn block_macs(cfg: &ViTConfig, t: u64) -> (u64, u64) {
    let d = cfg.width as u64;
    let hd = cfg.hidden() as u64;
    let attn = 2 * t * t * d;
    (4 * t * d * d + attn + 2 * t * d * hd, attn)
}

/// Forward FLOPs per window pair, `(total, attention)`.
pub fn count_flops(cfg: &ViTConfig, v: RelayVariant) -> (u64, u64) {
    let n = cfg.tokens() as u64;
    let d = cfg.width as u64;
    let proj = n * cfg.patch_dim() as u64 * d;
    let head = n * d * cfg.head_dim() as u64;
    let blocks = v.blocks(cfg) as u64;
    let r = extra_tokens(cfg, v);
    let (windows, calls, t) = match v {
        RelayVariant::LocalOnly | RelayVariant::GlobalOnly => (1, blocks, n),
        RelayVariant::RegistersOnly => (1, blocks, n + r),
        RelayVariant::DecisionFusion => (2, 2 * blocks, n),
        RelayVariant::TokenConcat => (2, blocks, 2 * n),
        RelayVariant::SequentialRelay | RelayVariant::ParallelRelay | RelayVariant::FewerBlocks(_) => {
            (2, 2 * blocks, n + r)
        }
    };
    let (bm, am) = block_macs(cfg, t);
    let macs = windows * (proj + head) + calls * bm;
    (2 * macs, 2 * calls * am)
}

/// Activations kept for backward, in bytes of `dtype_bytes`-wide values.
///
/// Per block call over `T` tokens: the block input, both norm outputs, Q, K,
/// V, the attention context, the post-attention residual and the MLP output
/// (9·T·D), the attention probabilities (H·T²) and both MLP hidden tensors
/// (2·T·hidden). Per window: patches, embeddings, head norm, head output.
pub fn estimate_memory(cfg: &ViTConfig, v: RelayVariant, batch: usize, dtype_bytes: usize) -> (u64, u64) {
    let n = cfg.tokens() as u64;
    let d = cfg.width as u64;
    let hd = cfg.hidden() as u64;
    let h = cfg.heads as u64;
    let blocks = v.blocks(cfg) as u64;
    let r = extra_tokens(cfg, v);
    let (windows, calls, t) = match v {
        RelayVariant::LocalOnly | RelayVariant::GlobalOnly => (1, blocks, n),
        RelayVariant::RegistersOnly => (1, blocks, n + r),
        RelayVariant::DecisionFusion => (2, 2 * blocks, n),
        RelayVariant::TokenConcat => (2, blocks, 2 * n),
        _ => (2, 2 * blocks, n + r),
    };
    let per_window = n * cfg.patch_dim() as u64 + 2 * n * d + n * cfg.head_dim() as u64;
    let attn = calls * h * t * t;
    let per_call = 9 * t * d + 2 * t * hd;
    let scale = batch as u64 * dtype_bytes as u64;
    (
        scale * (windows * per_window + calls * per_call + attn),
        scale * attn,
    )
}

pub fn cost_report(cfg: &ViTConfig, v: RelayVariant, batch: usize) -> CostReport {
    let (flops_forward, flops_attention) = count_flops(cfg, v);
    let (peak_activation_bytes, attention_activation_bytes) = estimate_memory(cfg, v, batch, 4);
    CostReport {
        flops_forward,
        flops_attention,
        peak_activation_bytes,
        attention_activation_bytes,
        ..count_params(cfg, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sampler::{sample_at, Augment, Sample, SamplerConfig, Scene};
    use crate::losses::LabelMap;
    use crate::rng;
    use crate::tensor::Tensor;
    use crate::vit::{self, Scale};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(depth: usize, heads: usize) -> ViTConfig {
        ViTConfig {
            depth,
            width: 8,
            heads,
            patch_size: 2,
            in_channels: 3,
            num_classes: 3,
            relay_count: 2,
            share_projector: false,
            mlp_ratio: 4,
            local_size: 8,
            global_extent: 32,
            down_factor: 4,
        }
    }

    fn pairs(n: usize, seed: u64) -> Vec<WindowPair> {
        let mut r = rng::stream(seed, &[]);
        let img = Tensor::from_fn(&[3, 48, 48], |_| r.random_range(0.0..255.0f32));
        let sc = Scene::new(img, LabelMap::filled(48, 48, 0)).unwrap();
        let c = SamplerConfig { s: 8, g: 4, ..Default::default() };
        (0..n)
            .map(|i| match sample_at(&sc, &c, (16 + i as i64 * 3, 20), Augment::IDENTITY, true) {
                Sample::Pair(p) => *p,
                _ => unreachable!(),
            })
            .collect()
    }

    fn scaled(cfg: &ViTConfig, v: RelayVariant, seed: u64) -> Model<f64> {
        let mut m = Model::<f64>::new(cfg, v, seed).unwrap();
        let ids: Vec<_> = m.weights.store.ids().collect();
        let mut r = rng::stream(seed, &[1]);
        for id in ids {
            for x in m.weights.store.get_mut(id).data_mut() {
                *x += r.random_range(-0.4..0.4);
            }
        }
        m
    }

    #[test]
    fn maps_are_distributions() {
        let m = scaled(&tiny(2, 2), RelayVariant::SequentialRelay, 1);
        let maps = extract_attention(&m, &pairs(3, 2)).unwrap();
        assert_eq!(maps.len(), 2);
        for a in &maps {
            for map in [&a.local, a.global.as_ref().unwrap()] {
                assert_eq!(map.len(), 16);
                assert!(map.iter().all(|&p| p >= 0.0));
                assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn no_relays_is_an_error() {
        let m = Model::<f64>::new(&tiny(1, 2), RelayVariant::LocalOnly, 1).unwrap();
        assert!(extract_attention(&m, &pairs(1, 3)).is_err());
        let cfg = ViTConfig { relay_count: 0, ..tiny(1, 2) };
        let m = Model::<f64>::new(&cfg, RelayVariant::SequentialRelay, 1).unwrap();
        assert!(extract_attention(&m, &pairs(1, 3)).is_err());
    }

    #[test]
    fn identical_images_average_to_the_single_map() {
        let m = scaled(&tiny(2, 2), RelayVariant::SequentialRelay, 4);
        let p = pairs(1, 5);
        let one = extract_attention(&m, &p).unwrap();
        let two = extract_attention(&m, &[p[0].clone(), p[0].clone()]).unwrap();
        for (a, b) in one.iter().zip(&two) {
            for (x, y) in a.local.iter().zip(&b.local) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    /// Recomputes `softmax(QKᵀ/√d)` for block 0's global step by hand.
    #[test]
    fn global_map_matches_recomputed_attention() {
        for heads in [1, 2] {
            let cfg = tiny(1, heads);
            let m = scaled(&cfg, RelayVariant::SequentialRelay, 6);
            let p = pairs(1, 7);
            let maps = extract_attention(&m, &p).unwrap();

            let b = stack_batch::<f64>(&p).unwrap();
            let mut g = Graph::new();
            let xg = g.constant(b.x_glob.unwrap());
            let f = vit::embed(&mut g, &m.weights, &cfg, xg, Scale::Global, m.positional()).unwrap();
            let f = g.value(f).clone();
            let relay = m.weights.store.get(m.weights.tokens.unwrap()).clone();
            let mut rows: Vec<Vec<f64>> = relay.data().chunks(8).map(|c| c.to_vec()).collect();
            rows.extend(f.data().chunks(8).map(|c| c.to_vec()));
            let w = &m.weights;
            let blk = w.blocks[0];
            let t = |id| w.store.get(id).clone();
            let ln: Vec<Vec<f64>> = rows
                .iter()
                .map(|x| {
                    let mu = x.iter().sum::<f64>() / 8.0;
                    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
                    let (gn, bn) = (t(blk.norm1.gain), t(blk.norm1.bias));
                    (0..8).map(|j| (x[j] - mu) / (var + vit::LN_EPS).sqrt() * gn.data()[j] + bn.data()[j]).collect()
                })
                .collect();
            let proj = |l: vit::Linear| -> Vec<Vec<f64>> {
                let (wt, bs) = (t(l.weight), t(l.bias));
                ln.iter()
                    .map(|x| (0..8).map(|o| bs.data()[o] + (0..8).map(|i| x[i] * wt.at(&[i, o])).sum::<f64>()).collect())
                    .collect()
            };
            let (q, k) = (proj(blk.q), proj(blk.k));
            let dh = 8 / heads;
            for r in 0..2 {
                let mut avg = vec![0.0; 16];
                for h in 0..heads {
                    let s: Vec<f64> = (0..18)
                        .map(|j| (0..dh).map(|e| q[r][h * dh + e] * k[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..16 {
                        avg[j] += (s[j + 2] - mx).exp() / z;
                    }
                }
                let tot: f64 = avg.iter().sum();
                let got = maps[r].global.as_ref().unwrap();
                for j in 0..16 {
                    assert!((got[j] - avg[j] / tot).abs() < 1e-6, "heads {heads} relay {r} key {j}");
                }
            }
        }
    }

    #[test]
    fn registers_have_local_maps_only() {
        let m = scaled(&tiny(1, 2), RelayVariant::RegistersOnly, 8);
        let maps = extract_attention(&m, &pairs(2, 9)).unwrap();
        assert!(maps.iter().all(|a| a.global.is_none()));
    }

    #[test]
    fn relay_parameter_lines() {
        let d384 = ViTConfig { relay_count: 1, ..ViTConfig::vit_small() };
        assert_eq!(count_params(&d384, RelayVariant::SequentialRelay).params_relay, 384);
        let d96 = ViTConfig { relay_count: 4, width: 96, heads: 3, ..ViTConfig::vit_small() };
        assert_eq!(count_params(&d96, RelayVariant::SequentialRelay).params_relay, 384);
        let r0 = ViTConfig { relay_count: 0, ..ViTConfig::vit_small() };
        assert_eq!(count_params(&r0, RelayVariant::SequentialRelay).params_relay, 0);
    }

    #[test]
    fn vit_small_total_near_reference() {
        let c = count_params(&ViTConfig::vit_small(), RelayVariant::LocalOnly);
        let rel = (c.params_total as f64 - 23.9e6).abs() / 23.9e6;
        assert!(rel < 0.02, "{} ({rel})", c.params_total);
    }

    #[test]
    fn closed_form_matches_registered_parameters() {
        for share in [false, true] {
            for r in [0, 3] {
                let cfg = ViTConfig { share_projector: share, relay_count: r, ..tiny(3, 2) };
                for v in RelayVariant::ALL {
                    let v = match v {
                        RelayVariant::FewerBlocks(_) => RelayVariant::FewerBlocks(2),
                        v => v,
                    };
                    let m = Model::<f32>::new(&cfg, v, 0).unwrap();
                    let c = count_params(&cfg, v);
                    assert_eq!(c.params_total as usize, m.weights.store.num_values(), "{v} share={share} r={r}");
                    let proj: usize = m.weights.store.iter().filter(|(_, n, _)| n.starts_with("proj.")).map(|(_, _, t)| t.numel()).sum();
                    assert_eq!(c.params_projectors as usize, proj);
                }
            }
        }
    }

    #[test]
    fn local_only_is_registers_minus_tokens() {
        let cfg = ViTConfig::vit_small();
        let a = count_params(&cfg, RelayVariant::LocalOnly).params_total;
        let b = count_params(&cfg, RelayVariant::RegistersOnly).params_total;
        assert_eq!(a, b - (cfg.relay_count * cfg.width) as u64);
    }

    /// Brute-force MAC tally by walking every matrix product of a forward.
    fn walk_flops(cfg: &ViTConfig, v: RelayVariant) -> u64 {
        let (n, d, hd) = (cfg.tokens() as u64, cfg.width as u64, cfg.hidden() as u64);
        let mm = |m: u64, k: u64, nn: u64| 2 * m * k * nn;
        let block = |t: u64| {
            3 * mm(t, d, d) + (0..cfg.heads).map(|_| mm(t, d / cfg.heads as u64, t) + mm(t, t, d / cfg.heads as u64)).sum::<u64>()
                + mm(t, d, d)
                + mm(t, d, hd)
                + mm(t, hd, d)
        };
        let embed = mm(n, cfg.patch_dim() as u64, d);
        let head = mm(n, d, cfg.head_dim() as u64);
        let r = cfg.relay_count as u64;
        let b = v.blocks(cfg) as u64;
        match v {
            RelayVariant::LocalOnly | RelayVariant::GlobalOnly => embed + b * block(n) + head,
            RelayVariant::RegistersOnly => embed + b * block(n + r) + head,
            RelayVariant::DecisionFusion => 2 * (embed + b * block(n) + head),
            RelayVariant::TokenConcat => 2 * embed + b * block(2 * n) + 2 * head,
            _ => 2 * embed + 2 * b * block(n + r) + 2 * head,
        }
    }

    #[test]
    fn flops_match_walk() {
        for v in RelayVariant::ALL {
            let cfg = ViTConfig::vit_small();
            assert_eq!(count_flops(&cfg, v).0, walk_flops(&cfg, v), "{v}");
        }
    }

    #[test]
    fn flop_ratios() {
        let cfg = ViTConfig::vit_small();
        let base = count_flops(&cfg, RelayVariant::LocalOnly).0 as f64;
        let relay = count_flops(&cfg, RelayVariant::SequentialRelay).0 as f64;
        assert!((1.95..=2.15).contains(&(relay / base)));
        let r0 = ViTConfig { relay_count: 0, ..cfg.clone() };
        assert_eq!(count_flops(&r0, RelayVariant::SequentialRelay).0, 2 * count_flops(&r0, RelayVariant::LocalOnly).0);
        // attention products alone grow fourfold under concatenation
        let (_, a_base) = count_flops(&cfg, RelayVariant::LocalOnly);
        let (_, a_cat) = count_flops(&cfg, RelayVariant::TokenConcat);
        assert_eq!(a_cat, 4 * a_base);
    }

    #[test]
    fn flops_monotone_in_relays() {
        let f = |r| count_flops(&ViTConfig { relay_count: r, ..ViTConfig::vit_small() }, RelayVariant::SequentialRelay).0;
        for r in 0..40 {
            assert!(f(r + 1) > f(r));
        }
        assert!(((f(32) - f(1)) as f64) < 0.35 * f(1) as f64);
    }

    #[test]
    fn memory_model() {
        let cfg = ViTConfig::vit_small();
        let v = RelayVariant::SequentialRelay;
        assert_eq!(estimate_memory(&cfg, v, 2, 4).0, 2 * estimate_memory(&cfg, v, 1, 4).0);
        let r0 = ViTConfig { relay_count: 0, ..cfg.clone() };
        let relay = estimate_memory(&r0, v, 1, 4).0 as f64;
        let base = estimate_memory(&r0, RelayVariant::LocalOnly, 1, 4).0 as f64;
        assert!((relay / base - 2.0).abs() < 1e-12);
        let big = ViTConfig { local_size: 1024, global_extent: 4096, ..cfg.clone() };
        let a = estimate_memory(&cfg, RelayVariant::LocalOnly, 1, 4).1;
        let b = estimate_memory(&big, RelayVariant::LocalOnly, 1, 4).1;
        assert_eq!(b, 256 * a);
    }

    proptest! {
        #[test]
        fn maps_ignore_constant_score_shifts(shift in -20.0f64..20.0) {
            // a uniform shift of every score is a shift of the softmax input
            let s = [0.3f64, -1.2, 2.0, 0.5, 0.0];
            let p = |s: &[f64]| {
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                s.iter().map(|v| (v - m).exp() / z).collect::<Vec<_>>()
            };
            let a = p(&s);
            let b = p(&s.iter().map(|v| v + shift).collect::<Vec<_>>());
            let mut a2 = a[2..].to_vec();
            let mut b2 = b[2..].to_vec();
            normalize(&mut a2);
            normalize(&mut b2);
            for (x, y) in a2.iter().zip(&b2) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
