use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, split_axis};
use super::{Float, ParamId, ParamStore, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// How leaf gradients behave across repeated `backward` calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradMode {
    /// A second `backward` without `zero_grad` is an error.
    #[default]
    Reset,
    /// Leaf gradients sum over successive `backward` calls.
    Accumulate,
}

enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: S },
    Sum { x: usize },
    Mean { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    AvgPool2d { x: usize, k: usize },
    Crop2d { x: usize, top: usize, left: usize },
    Upsample2d { x: usize, k: usize },
    BroadcastBatch { x: usize },
    CrossEntropy { logits: usize, target: usize, mask: Vec<bool>, weight: Vec<S>, eps: S },
}

/// Record of executed operations, in execution order, with saved activations.
///
/// A graph is single-owner. Independent graphs may run on separate threads
/// against shared read-only parameters.
pub struct Graph<S: Float> {
    id: u64,
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<S>>>,
    mode: GradMode,
    backward_done: bool,
    params: HashMap<(u64, ParamId), Var>,
    empty_masks: usize,
}

impl<S: Float> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_buf<'a, S: Float>(
    grads: &'a mut [Option<Vec<S>>],
    requires: &[bool],
    idx: usize,
    len: usize,
) -> Option<&'a mut Vec<S>> {
    if !requires[idx] {
        return None;
    }
    Some(grads[idx].get_or_insert_with(|| vec![S::zero(); len]))
}

impl<S: Float> Graph<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            mode: GradMode::Reset,
            backward_done: false,
            params: HashMap::new(),
            empty_masks: 0,
        }
    }

    pub fn set_mode(&mut self, mode: GradMode) {
        self.mode = mode;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of cross-entropy evaluations whose mask selected no cell.
    pub fn empty_mask_events(&self) -> usize {
        self.empty_masks
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> Var {
        let index = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var { graph: self.id, index }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable used on a foreign graph");
        v.index
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter as a gradient leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(key, v);
        v
    }

    /// The graph variable bound to a parameter, if it was used.
    pub fn param_var(&self, store: &ParamStore<S>, id: ParamId) -> Option<Var> {
        self.params.get(&(store.uid(), id)).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[self.idx(v)]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[self.idx(v)].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[self.idx(v)]
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let i = self.idx(v);
        self.grads[i]
            .as_ref()
            .map(|g| Tensor::new(self.values[i].shape(), g.clone()).expect("grad shape"))
    }

    /// Gradient of every parameter in `store`; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore<S>) -> Vec<Tensor<S>> {
        store
            .ids()
            .map(|id| {
                self.param_var(store, id)
                    .and_then(|v| self.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    // ---- operations -------------------------------------------------------

    /// `a[.., m, k] · b[k, n]` or batched `a[.., m, k] · b[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[.., m, k] · b[.., n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (ashape, bshape) = (self.values[ai].shape(), self.values[bi].shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ashape.to_vec(),
            rhs: bshape.to_vec(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = if trans_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        let shared = bshape.len() == 2;
        if bk != k || (!shared && ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2]) {
            return Err(mismatch());
        }
        let batch = self.values[ai].numel() / (m * k).max(1);
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); batch * m * n];
        let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let (ad, bd) = (self.values[ai].data(), self.values[bi].data());
        if shared {
            S::gemm(batch * m, k, n, ad, (k as isize, 1), bd, bs, &mut out, false);
        } else {
            for i in 0..batch {
                S::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bd[i * k * n..(i + 1) * k * n],
                    bs,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let req = self.requires[ai] || self.requires[bi];
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a: ai, b: bi, trans_b }, req))
    }

    /// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.values[ai], &self.values[bi]);
        if bv.rank() > av.rank() || av.shape()[av.rank() - bv.rank()..] != *bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bn = bv.numel();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bn) {
            for (o, &y) in chunk.iter_mut().zip(bv.data()) {
                *o += y;
            }
        }
        let req = self.requires[ai] || self.requires[bi];
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a: ai, b: bi }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.values[ai], &self.values[bi]);
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let req = self.requires[ai] || self.requires[bi];
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul { a: ai, b: bi }, req))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let xi = self.idx(x);
        let out = self.values[xi].map(|v| v * c);
        let req = self.requires[xi];
        Ok(self.push(out, Op::Scale { x: xi, c }, req))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let total: S = self.values[xi].data().iter().copied().sum();
        let req = self.requires[xi];
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: xi }, req))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let n = self.values[xi].numel();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let total: S = self.values[xi].data().iter().copied().sum();
        let req = self.requires[xi];
        Ok(self.push(Tensor::scalar(total / S::lit(n as f64)), Op::Mean { x: xi }, req))
    }

    fn check_axis(&self, op: &'static str, xi: usize, axis: usize) -> Result<()> {
        let rank = self.values[xi].rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x);
        self.check_axis("softmax", xi, axis)?;
        let xv = &self.values[xi];
        let y = kernels::softmax_forward(xv.data(), xv.shape(), axis);
        let shape = xv.shape().to_vec();
        let req = self.requires[xi];
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { x: xi, axis }, req))
    }

    /// Normalization over the last axis with an affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gain), self.idx(bias));
        let xv = &self.values[xi];
        let d = *xv.shape().last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        for &p in &[gi, bi] {
            if self.values[p].shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.values[p].shape().to_vec(),
                });
            }
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_forward(xv.data(), d, self.values[gi].data(), self.values[bi].data(), S::lit(eps));
        let shape = xv.shape().to_vec();
        let req = self.requires[xi] || self.requires[gi] || self.requires[bi];
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, rstd },
            req,
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let y = self.values[xi].map(kernels::gelu);
        let req = self.requires[xi];
        Ok(self.push(y, Op::Gelu { x: xi }, req))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let first = *idx.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.values[first].shape().to_vec();
        let mut total = 0;
        for &p in &idx {
            let s = self.values[p].shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in &idx {
                let len = self.values[p].shape()[axis] * inner;
                out.extend_from_slice(&self.values[p].data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let req = idx.iter().any(|&p| self.requires[p]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: idx, axis }, req))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x);
        self.check_axis("slice", xi, axis)?;
        let shape = self.values[xi].shape().to_vec();
        if start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let data = self.values[xi].data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let req = self.requires[xi];
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Slice { x: xi, axis, start }, req))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let xi = self.idx(x);
        self.check_axis("split", xi, axis)?;
        let ext = self.values[xi].shape()[axis];
        if sizes.iter().sum::<usize>() != ext {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!("sizes {sizes:?} do not sum to extent {ext}"),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x);
        let value = self.values[xi].clone().reshape(shape)?;
        let req = self.requires[xi];
        Ok(self.push(value, Op::Reshape { x: xi }, req))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xi = self.idx(x);
        let shape = self.values[xi].shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let mut out = vec![S::zero(); self.values[xi].numel()];
        kernels::permute_into(self.values[xi].data(), &shape, perm, &mut out, false);
        let oshape = kernels::permute_shape(&shape, perm);
        let req = self.requires[xi];
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Permute { x: xi, perm: perm.to_vec() }, req))
    }

    fn spatial(&self, op: &'static str, xi: usize) -> Result<(usize, usize)> {
        let s = self.values[xi].shape();
        if s.len() < 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("needs rank >= 2, got {s:?}"),
            });
        }
        Ok((s[s.len() - 2], s[s.len() - 1]))
    }

    /// Non-overlapping k×k average over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.idx(x);
        let (h, w) = self.spatial("avg_pool2d", xi)?;
        for extent in [h, w] {
            if k == 0 || extent % k != 0 {
                return Err(TensorError::NotDivisible {
                    op: "avg_pool2d",
                    extent,
                    divisor: k,
                });
            }
        }
        let out = kernels::avg_pool2d(self.values[xi].data(), h, w, k);
        let mut shape = self.values[xi].shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h / k;
        shape[r - 1] = w / k;
        let req = self.requires[xi];
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2d { x: xi, k }, req))
    }

    /// Extracts an `h`×`w` window at (`top`, `left`) over the last two axes.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let xi = self.idx(x);
        let (ih, iw) = self.spatial("crop2d", xi)?;
        if top + h > ih || left + w > iw {
            return Err(TensorError::Invalid {
                op: "crop2d",
                msg: format!("window {h}x{w} at ({top},{left}) exceeds {ih}x{iw}"),
            });
        }
        let data = self.values[xi].data();
        let planes = data.len() / (ih * iw);
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for i in 0..h {
                let base = p * ih * iw + (top + i) * iw + left;
                out.extend_from_slice(&data[base..base + w]);
            }
        }
        let mut shape = self.values[xi].shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h;
        shape[r - 1] = w;
        let req = self.requires[xi];
        Ok(self.push(Tensor::new(&shape, out)?, Op::Crop2d { x: xi, top, left }, req))
    }

    /// Nearest-neighbour upsampling by `k` over the last two axes.
    pub fn upsample_nearest2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.idx(x);
        let (h, w) = self.spatial("upsample_nearest2d", xi)?;
        let out = kernels::upsample_nearest2d(self.values[xi].data(), h, w, k);
        let mut shape = self.values[xi].shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h * k;
        shape[r - 1] = w * k;
        let req = self.requires[xi];
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample2d { x: xi, k }, req))
    }

    /// Replicates `x` along a new leading axis of extent `n`.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.values[xi];
        let mut out = Vec::with_capacity(n * xv.numel());
        for _ in 0..n {
            out.extend_from_slice(xv.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let req = self.requires[xi];
        Ok(self.push(Tensor::new(&shape, out)?, Op::BroadcastBatch { x: xi }, req))
    }

    /// Masked soft-target cross entropy.
    ///
    /// `logits` and `target` are `[K, H, W]` or `[N, K, H, W]`; `mask` holds
    /// one flag per spatial cell and sample. Per sample the loss is the mean
    /// over masked-in cells of `-Σ_k y_k log max(softmax(z)_k, eps)`; a sample
    /// with an empty mask contributes 0. The result is the mean over samples.
    pub fn cross_entropy(&mut self, logits: Var, target: Var, mask: &[bool], eps: f64) -> Result<Var> {
        let (li, ti) = (self.idx(logits), self.idx(target));
        let shape = self.values[li].shape().to_vec();
        if shape != self.values[ti].shape() || !(shape.len() == 3 || shape.len() == 4) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: self.values[ti].shape().to_vec(),
            });
        }
        let (n, k, cells) = if shape.len() == 3 {
            (1, shape[0], shape[1] * shape[2])
        } else {
            (shape[0], shape[1], shape[2] * shape[3])
        };
        if mask.len() != n * cells {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let eps_s = S::lit(eps);
        let log_eps = eps_s.ln();
        let z = self.values[li].data();
        let y = self.values[ti].data();
        let mut weight = vec![S::zero(); n];
        let mut total = S::zero();
        let mut logp = vec![S::zero(); k];
        for s in 0..n {
            let m = &mask[s * cells..(s + 1) * cells];
            let count = m.iter().filter(|&&b| b).count();
            if count == 0 {
                self.empty_masks += 1;
                continue;
            }
            weight[s] = S::one() / S::lit((count * n) as f64);
            let mut acc = S::zero();
            let base = s * k * cells;
            for c in 0..cells {
                if !m[c] {
                    continue;
                }
                let mut max = S::neg_infinity();
                for j in 0..k {
                    max = max.max(z[base + j * cells + c]);
                }
                let mut denom = S::zero();
                for j in 0..k {
                    denom += (z[base + j * cells + c] - max).exp();
                }
                let lden = denom.ln();
                for (j, lp) in logp.iter_mut().enumerate() {
                    *lp = (z[base + j * cells + c] - max - lden).max(log_eps);
                }
                for (j, &lp) in logp.iter().enumerate() {
                    acc -= y[base + j * cells + c] * lp;
                }
            }
            total += acc * weight[s];
        }
        let req = self.requires[li] || self.requires[ti];
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits: li, target: ti, mask: mask.to_vec(), weight, eps: eps_s },
            req,
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Populates gradients of every gradient leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.graph != self.id {
            return Err(TensorError::Detached);
        }
        let li = loss.index;
        if self.values[li].numel() != 1 || self.values[li].rank() > 1 {
            return Err(TensorError::NotScalar(self.values[li].shape().to_vec()));
        }
        if !self.requires[li] {
            return Err(TensorError::Detached);
        }
        if self.backward_done && self.mode == GradMode::Reset {
            return Err(TensorError::BackwardTwice);
        }
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !matches!(self.ops[i], Op::Leaf) {
                *g = None;
            }
        }
        grad_buf(&mut self.grads, &self.requires, li, 1).unwrap()[0] += S::one();
        for i in (0..=li).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
        }
        for i in 0..self.values.len() {
            if self.requires[i] && matches!(self.ops[i], Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![S::zero(); self.values[i].numel()]);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[S]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let req = &self.requires;
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&values[a], &values[b]);
                let (ashape, bshape) = (av.shape(), bv.shape());
                let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                let n = g.len() / (av.numel() / k.max(1)).max(1);
                let batch = av.numel() / (m * k).max(1);
                let shared = bshape.len() == 2;
                // B_eff is k×n; transposing it for dA = dC·B_effᵀ.
                let bt_strides = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                if let Some(ga) = grad_buf(grads, req, a, av.numel()) {
                    if shared {
                        S::gemm(batch * m, n, k, g, (n as isize, 1), bv.data(), bt_strides, ga, true);
                    } else {
                        for t in 0..batch {
                            S::gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                (n as isize, 1),
                                &bv.data()[t * k * n..(t + 1) * k * n],
                                bt_strides,
                                &mut ga[t * m * k..(t + 1) * m * k],
                                true,
                            );
                        }
                    }
                }
                if let Some(gb) = grad_buf(grads, req, b, bv.numel()) {
                    let rows = if shared { batch * m } else { m };
                    let reps = if shared { 1 } else { batch };
                    for t in 0..reps {
                        let at = &av.data()[t * rows * k..(t + 1) * rows * k];
                        let gt = &g[t * rows * n..(t + 1) * rows * n];
                        let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // dB (n×k) = dCᵀ · A
                            S::gemm(n, rows, k, gt, (1, n as isize), at, (k as isize, 1), gbt, true);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            S::gemm(k, rows, n, at, (1, k as isize), gt, (n as isize, 1), gbt, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = grad_buf(grads, req, a, g.len()) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                let bn = values[b].numel();
                if let Some(gb) = grad_buf(grads, req, b, bn) {
                    for chunk in g.chunks(bn) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = grad_buf(grads, req, a, g.len()) {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(values[b].data()) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = grad_buf(grads, req, b, g.len()) {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(values[a].data()) {
                        *x += y * w;
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(gx) = grad_buf(grads, req, x, g.len()) {
                    for (d, &y) in gx.iter_mut().zip(g) {
                        *d += y * c;
                    }
                }
            }
            &Op::Sum { x } => {
                let n = values[x].numel();
                if let Some(gx) = grad_buf(grads, req, x, n) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean { x } => {
                let n = values[x].numel();
                let v = g[0] / S::lit(n as f64);
                if let Some(gx) = grad_buf(grads, req, x, n) {
                    for d in gx.iter_mut() {
                        *d += v;
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = values[i].data();
                let shape = values[i].shape();
                if let Some(gx) = grad_buf(grads, req, x, g.len()) {
                    kernels::softmax_backward(y, g, shape, axis, gx);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = values[gain].numel();
                let rows = g.len() / d;
                let gn = values[gain].data();
                if let Some(gg) = grad_buf(grads, req, gain, d) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = grad_buf(grads, req, bias, d) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = grad_buf(grads, req, x, g.len()) {
                    let inv_d = S::one() / S::lit(d as f64);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = S::zero();
                        let mut mean_gx = S::zero();
                        for j in 0..d {
                            let gxh = gr[j] * gn[j];
                            mean_g += gxh;
                            mean_gx += gxh * xh[j];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        let rs = rstd[r];
                        for j in 0..d {
                            gx[r * d + j] += rs * (gr[j] * gn[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                if let Some(gx) = grad_buf(grads, req, x, g.len()) {
                    for ((d, &y), &v) in gx.iter_mut().zip(g).zip(values[x].data()) {
                        *d += y * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = values[i].shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                let total = shape[*axis] * inner;
                for &p in parts {
                    let len = values[p].shape()[*axis] * inner;
                    if let Some(gp) = grad_buf(grads, req, p, values[p].numel()) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, &y) in gp[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += y;
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xshape = values[x].shape();
                let (outer, ext, inner) = split_axis(xshape, axis);
                let len = values[i].shape()[axis] * inner;
                if let Some(gx) = grad_buf(grads, req, x, values[x].numel()) {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        for (d, &y) in gx[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *d += y;
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = grad_buf(grads, req, x, g.len()) {
                    for (d, &y) in gx.iter_mut().zip(g) {
                        *d += y;
                    }
                }
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                let oshape = values[i].shape();
                if let Some(gx) = grad_buf(grads, req, *x, g.len()) {
                    kernels::permute_into(g, oshape, &inv, gx, true);
                }
            }
            &Op::AvgPool2d { x, k } => {
                let xs = values[x].shape();
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let (oh, ow) = (h / k, w / k);
                let scale = S::one() / S::lit((k * k) as f64);
                if let Some(gx) = grad_buf(grads, req, x, values[x].numel()) {
                    let planes = gx.len() / (h * w);
                    for p in 0..planes {
                        for r in 0..h {
                            let grow = &g[p * oh * ow + (r / k) * ow..p * oh * ow + (r / k + 1) * ow];
                            let dst = &mut gx[p * h * w + r * w..p * h * w + (r + 1) * w];
                            for (c, d) in dst.iter_mut().enumerate() {
                                *d += grow[c / k] * scale;
                            }
                        }
                    }
                }
            }
            &Op::Crop2d { x, top, left } => {
                let xs = values[x].shape();
                let (ih, iw) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let os = values[i].shape();
                let (h, w) = (os[os.len() - 2], os[os.len() - 1]);
                if let Some(gx) = grad_buf(grads, req, x, values[x].numel()) {
                    let planes = g.len() / (h * w);
                    for p in 0..planes {
                        for r in 0..h {
                            let base = p * ih * iw + (top + r) * iw + left;
                            let src = &g[p * h * w + r * w..p * h * w + (r + 1) * w];
                            for (d, &y) in gx[base..base + w].iter_mut().zip(src) {
                                *d += y;
                            }
                        }
                    }
                }
            }
            &Op::Upsample2d { x, k } => {
                let xs = values[x].shape();
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let (oh, ow) = (h * k, w * k);
                if let Some(gx) = grad_buf(grads, req, x, values[x].numel()) {
                    let planes = gx.len() / (h * w);
                    for p in 0..planes {
                        for r in 0..oh {
                            let src = &g[p * oh * ow + r * ow..p * oh * ow + (r + 1) * ow];
                            let dst = &mut gx[p * h * w + (r / k) * w..p * h * w + (r / k + 1) * w];
                            for (c, &y) in src.iter().enumerate() {
                                dst[c / k] += y;
                            }
                        }
                    }
                }
            }
            &Op::BroadcastBatch { x } => {
                let n = values[x].numel();
                if let Some(gx) = grad_buf(grads, req, x, n) {
                    for chunk in g.chunks(n) {
                        for (d, &y) in gx.iter_mut().zip(chunk) {
                            *d += y;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target, mask, weight, eps } => {
                let (li, ti) = (*logits, *target);
                let shape = values[li].shape();
                let (n, k, cells) = if shape.len() == 3 {
                    (1, shape[0], shape[1] * shape[2])
                } else {
                    (shape[0], shape[1], shape[2] * shape[3])
                };
                let z = values[li].data();
                let y = values[ti].data();
                let up = g[0];
                let mut p = vec![S::zero(); k];
                let mut gl = grad_buf(grads, req, li, z.len()).map(std::mem::take);
                let mut gt = grad_buf(grads, req, ti, y.len()).map(std::mem::take);
                for s in 0..n {
                    let w = weight[s] * up;
                    if weight[s] == S::zero() {
                        continue;
                    }
                    let base = s * k * cells;
                    for c in 0..cells {
                        if !mask[s * cells + c] {
                            continue;
                        }
                        let mut max = S::neg_infinity();
                        for j in 0..k {
                            max = max.max(z[base + j * cells + c]);
                        }
                        let mut denom = S::zero();
                        for (j, pj) in p.iter_mut().enumerate() {
                            *pj = (z[base + j * cells + c] - max).exp();
                            denom += *pj;
                        }
                        for pj in p.iter_mut() {
                            *pj /= denom;
                        }
                        if let Some(gl) = gl.as_mut() {
                            let mut ysum = S::zero();
                            for (j, &pj) in p.iter().enumerate() {
                                if pj > *eps {
                                    ysum += y[base + j * cells + c];
                                }
                            }
                            for (j, &pj) in p.iter().enumerate() {
                                let yj = if pj > *eps { y[base + j * cells + c] } else { S::zero() };
                                gl[base + j * cells + c] += w * (pj * ysum - yj);
                            }
                        }
                        if let Some(gt) = gt.as_mut() {
                            for (j, &pj) in p.iter().enumerate() {
                                gt[base + j * cells + c] -= w * pj.max(*eps).ln();
                            }
                        }
                    }
                }
                if let Some(v) = gl {
                    grads[li] = Some(v);
                }
                if let Some(v) = gt {
                    grads[ti] = Some(v);
                }
            }
        }
    }
}
