//! Mixture-of-attention-heads layer.
//!
//! Each attention expert owns `N_head` query projections and an output
//! projection; key/value projections are shared by all experts and grouped
//! GQA-style over `N_kv` heads. Tokens are laid out as `[batch·seq_len, d_h]`
//! with causal attention inside each sequence.

use crate::error::{Error, Result};
use crate::gating::{GateBatch, GateDecision, Router, SelectionStrategy};
use crate::moe::LayerBackward;
use crate::params::{join, Parameters};
use crate::tensor::{
    axpy, dot, linear, linear_backward, matmul, matmul_backward, softmax_backward_slice,
    softmax_slice, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExpert {
    /// `[N_head·d_head, d_h]`.
    pub w_q: Tensor,
    /// `[N_head·d_head, d_h]`; row block `j` is head `j`'s output projection.
    pub w_o: Tensor,
}

impl Parameters for AttentionExpert {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "w_q"), &self.w_q);
        f(join(prefix, "w_o"), &self.w_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w_q"), &mut self.w_q);
        f(join(prefix, "w_o"), &mut self.w_o);
    }
}

/// Head geometry shared by every expert of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_kv_heads: usize,
}

impl HeadLayout {
    /// KV head serving query head `j`: contiguous blocks when `N_kv`
    /// divides `N_head`, round-robin otherwise.
    pub fn kv_group(&self, head: usize) -> usize {
        if self.num_heads.is_multiple_of(self.num_kv_heads) {
            head / (self.num_heads / self.num_kv_heads)
        } else {
            head % self.num_kv_heads
        }
    }

    pub fn q_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Keys and values of one generation stream, one row per position.
#[derive(Clone, Debug)]
pub struct KvCache {
    layout: HeadLayout,
    capacity: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KvCache {
    pub fn new(layout: HeadLayout, capacity: usize) -> Self {
        KvCache {
            layout,
            capacity,
            keys: Vec::with_capacity(capacity * layout.kv_width()),
            values: Vec::with_capacity(capacity * layout.kv_width()),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.layout.kv_width()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn key_row(&self, pos: usize) -> &[f64] {
        let w = self.layout.kv_width();
        &self.keys[pos * w..(pos + 1) * w]
    }

    fn value_row(&self, pos: usize) -> &[f64] {
        let w = self.layout.kv_width();
        &self.values[pos * w..(pos + 1) * w]
    }

    /// Keys as `[N_kv, L, d_head]`.
    pub fn keys(&self) -> Option<Tensor> {
        self.as_head_major(&self.keys)
    }

    /// Values as `[N_kv, L, d_head]`.
    pub fn values(&self) -> Option<Tensor> {
        self.as_head_major(&self.values)
    }

    fn as_head_major(&self, rows: &[f64]) -> Option<Tensor> {
        let (l, h, d) = (self.len(), self.layout.num_kv_heads, self.layout.head_dim);
        if l == 0 {
            return None;
        }
        let mut data = Vec::with_capacity(rows.len());
        for g in 0..h {
            for p in 0..l {
                let base = p * h * d + g * d;
                data.extend_from_slice(&rows[base..base + d]);
            }
        }
        Tensor::new(&[h, l, d], data).ok()
    }
}

/// Causal attention of one query head over `len` positions. Writes the
/// attention probabilities into `probs` and the context vector into `ctx`.
fn attend<'a>(
    q: &[f64],
    len: usize,
    scale: f64,
    key: impl Fn(usize) -> &'a [f64],
    value: impl Fn(usize) -> &'a [f64],
    probs: &mut Vec<f64>,
    ctx: &mut [f64],
) {
    let logits: Vec<f64> = (0..len).map(|u| dot(q, key(u)) * scale).collect();
    probs.clear();
    probs.resize(len, 0.0);
    softmax_slice(&logits, probs);
    ctx.fill(0.0);
    for (u, &p) in probs.iter().enumerate() {
        axpy(p, value(u), ctx);
    }
}

#[derive(Clone, Debug)]
struct ExpertCache {
    rows: Vec<usize>,
    input: Tensor,
    queries: Tensor,
    /// Indexed `[row][head]`.
    probs: Vec<Vec<Vec<f64>>>,
    context: Tensor,
    output: Tensor,
}

#[derive(Clone, Debug)]
struct MoaCache {
    input: Tensor,
    seq_len: usize,
    keys: Tensor,
    values: Tensor,
    gate: GateBatch,
    experts: Vec<Option<ExpertCache>>,
}

#[derive(Clone, Debug)]
pub struct MoaLayer {
    pub experts: Vec<AttentionExpert>,
    /// `[N_kv·d_head, d_h]`.
    pub w_k: Tensor,
    /// `[N_kv·d_head, d_h]`.
    pub w_v: Tensor,
    pub router: Option<Router>,
    layout: HeadLayout,
    cache: Option<MoaCache>,
}

impl MoaLayer {
    pub fn new(
        experts: Vec<AttentionExpert>,
        w_k: Tensor,
        w_v: Tensor,
        router: Option<Router>,
        layout: HeadLayout,
    ) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config(vec!["MoA layer needs at least one expert".into()]));
        }
        if layout.num_heads == 0 || layout.head_dim == 0 || layout.num_kv_heads == 0 {
            return Err(Error::Config(vec!["head geometry must be positive".into()]));
        }
        let d = w_k.cols();
        let qd = [layout.q_width(), d];
        for e in &experts {
            if e.w_q.dims() != qd || e.w_o.dims() != qd {
                return Err(Error::shape("MoaLayer::new expert", e.w_q.dims(), &qd));
            }
        }
        let kvd = [layout.kv_width(), d];
        if w_k.dims() != kvd || w_v.dims() != kvd {
            return Err(Error::shape("MoaLayer::new kv", w_k.dims(), &kvd));
        }
        match &router {
            Some(r) if r.num_experts() != experts.len() || r.width() != d => {
                return Err(Error::shape("MoaLayer::new router", r.weight.dims(), &[experts.len(), d]))
            }
            None if experts.len() != 1 => {
                return Err(Error::Config(vec!["router required with more than one expert".into()]))
            }
            _ => {}
        }
        Ok(MoaLayer {
            experts,
            w_k,
            w_v,
            router,
            layout,
            cache: None,
        })
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn width(&self) -> usize {
        self.w_k.cols()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn gate(&self, x: &Tensor, strategy: SelectionStrategy) -> Result<GateBatch> {
        match &self.router {
            Some(router) => GateBatch::select(router.route(x)?, strategy),
            None => {
                strategy.validate(1)?;
                Ok(GateBatch::single_expert(x.rows()))
            }
        }
    }

    fn run(
        &self,
        x: &Tensor,
        seq_len: usize,
        strategy: SelectionStrategy,
        keep: bool,
    ) -> Result<(Tensor, GateBatch, Option<MoaCache>)> {
        let d = self.width();
        if x.dims().len() != 2 || x.cols() != d || seq_len == 0 || !x.rows().is_multiple_of(seq_len) {
            return Err(Error::shape("moa forward", x.dims(), &[seq_len, d]));
        }
        let lay = self.layout;
        let (dh, kvw) = (lay.head_dim, lay.kv_width());
        let scale = lay.scale();
        let keys = linear(x, &self.w_k)?;
        let values = linear(x, &self.w_v)?;
        let gate = self.gate(x, strategy)?;
        let mut out = x.zeros_like();
        let mut caches = Vec::with_capacity(self.experts.len());
        let kd = keys.data();
        let vd = values.data();
        for (i, (expert, idx)) in self.experts.iter().zip(gate.expert_rows()).enumerate() {
            if idx.is_empty() {
                caches.push(None);
                continue;
            }
            let xi = x.gather_rows(&idx);
            let queries = linear(&xi, &expert.w_q)?;
            let mut context = Tensor::zeros(&[idx.len(), lay.q_width()]);
            let mut probs = Vec::with_capacity(if keep { idx.len() } else { 0 });
            let mut p = Vec::new();
            for (r, &tok) in idx.iter().enumerate() {
                let start = tok - tok % seq_len;
                let len = tok % seq_len + 1;
                let mut row_probs = Vec::with_capacity(lay.num_heads);
                for j in 0..lay.num_heads {
                    let g = lay.kv_group(j);
                    let q = &queries.row(r)[j * dh..(j + 1) * dh];
                    let off = g * dh;
                    attend(
                        q,
                        len,
                        scale,
                        |u| &kd[(start + u) * kvw + off..(start + u) * kvw + off + dh],
                        |u| &vd[(start + u) * kvw + off..(start + u) * kvw + off + dh],
                        &mut p,
                        &mut context.row_mut(r)[j * dh..(j + 1) * dh],
                    );
                    if keep {
                        row_probs.push(p.clone());
                    }
                }
                if keep {
                    probs.push(row_probs);
                }
            }
            let output = matmul(&context, &expert.w_o)?;
            for (r, &tok) in idx.iter().enumerate() {
                let s = gate.scores.row(tok)[i];
                axpy(s, output.row(r), out.row_mut(tok));
            }
            caches.push(keep.then_some(ExpertCache {
                rows: idx,
                input: xi,
                queries,
                probs,
                context,
                output,
            }));
        }
        let cache = keep.then(|| MoaCache {
            input: x.clone(),
            seq_len,
            keys,
            values,
            gate: gate.clone(),
            experts: caches,
        });
        Ok((out, gate, cache))
    }

    /// Inference forward over `x: [batch·seq_len, d_h]`.
    pub fn forward(&self, x: &Tensor, seq_len: usize, strategy: SelectionStrategy) -> Result<(Tensor, GateBatch)> {
        let (o, g, _) = self.run(x, seq_len, strategy, false)?;
        Ok((o, g))
    }

    /// Training forward; caches everything the backward pass needs.
    pub fn forward_train(
        &mut self,
        x: &Tensor,
        seq_len: usize,
        strategy: SelectionStrategy,
    ) -> Result<(Tensor, GateBatch)> {
        let (o, g, cache) = self.run(x, seq_len, strategy, true)?;
        self.cache = cache;
        Ok((o, g))
    }

    /// Backward of [`Self::forward_train`]. Gradients of unselected experts
    /// stay zero; `d_scores_extra` joins `∇S` before the router softmax.
    pub fn backward(
        &mut self,
        d_out: &Tensor,
        d_scores_extra: Option<&Tensor>,
        grads: &mut MoaLayer,
    ) -> Result<LayerBackward> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::State("moa backward without a cached forward"))?;
        if d_out.dims() != cache.input.dims() {
            return Err(Error::shape("moa backward", d_out.dims(), cache.input.dims()));
        }
        let lay = self.layout;
        let (dh, kvw) = (lay.head_dim, lay.kv_width());
        let scale = lay.scale();
        let seq_len = cache.seq_len;
        let scores = &cache.gate.scores;
        let mut d_scores = scores.zeros_like();
        let mut d_input = cache.input.zeros_like();
        let mut d_keys = cache.keys.zeros_like();
        let mut d_values = cache.values.zeros_like();
        let kd = cache.keys.data();
        let vd = cache.values.data();
        let mut d_probs = Vec::new();
        let mut d_logits = Vec::new();
        for (i, ec) in cache.experts.iter().enumerate() {
            let Some(ec) = ec else { continue };
            let mut d_output = ec.output.zeros_like();
            for (r, &tok) in ec.rows.iter().enumerate() {
                let g = d_out.row(tok);
                d_scores.row_mut(tok)[i] = dot(ec.output.row(r), g);
                axpy(scores.row(tok)[i], g, d_output.row_mut(r));
            }
            let (d_context, d_wo) = matmul_backward(&ec.context, &self.experts[i].w_o, &d_output)?;
            grads.experts[i].w_o.add_assign(&d_wo)?;
            let mut d_queries = ec.queries.zeros_like();
            for (r, &tok) in ec.rows.iter().enumerate() {
                let start = tok - tok % seq_len;
                for j in 0..lay.num_heads {
                    let off = lay.kv_group(j) * dh;
                    let probs = &ec.probs[r][j];
                    let d_ctx = &d_context.row(r)[j * dh..(j + 1) * dh];
                    d_probs.clear();
                    for (u, &p) in probs.iter().enumerate() {
                        let vrow = (start + u) * kvw + off;
                        d_probs.push(dot(d_ctx, &vd[vrow..vrow + dh]));
                        axpy(p, d_ctx, &mut d_values.data_mut()[vrow..vrow + dh]);
                    }
                    d_logits.clear();
                    d_logits.resize(probs.len(), 0.0);
                    softmax_backward_slice(probs, &d_probs, &mut d_logits);
                    let q = &ec.queries.row(r)[j * dh..(j + 1) * dh];
                    let dq = &mut d_queries.row_mut(r)[j * dh..(j + 1) * dh];
                    for (u, &dl) in d_logits.iter().enumerate() {
                        let krow = (start + u) * kvw + off;
                        let ds = dl * scale;
                        axpy(ds, &kd[krow..krow + dh], dq);
                        axpy(ds, q, &mut d_keys.data_mut()[krow..krow + dh]);
                    }
                }
            }
            let dx = linear_backward(&ec.input, &self.experts[i].w_q, &d_queries, &mut grads.experts[i].w_q)?;
            d_input.scatter_add_rows(&ec.rows, &dx);
        }
        d_input.add_assign(&linear_backward(&cache.input, &self.w_k, &d_keys, &mut grads.w_k)?)?;
        d_input.add_assign(&linear_backward(&cache.input, &self.w_v, &d_values, &mut grads.w_v)?)?;
        if let (Some(router), Some(grad_router)) = (&self.router, grads.router.as_mut()) {
            let mut total = d_scores.clone();
            if let Some(extra) = d_scores_extra {
                total.add_assign(extra)?;
            }
            d_input.add_assign(&router.backward(&cache.input, scores, &total, grad_router)?)?;
        }
        Ok(LayerBackward { d_input, d_scores })
    }

    pub fn new_cache(&self, capacity: usize) -> KvCache {
        KvCache::new(self.layout, capacity)
    }

    /// Processes one new token against the cached prefix, appending its
    /// key/value row. Returns the layer output for that token.
    pub fn decode_step(
        &self,
        x_new: &[f64],
        cache: &mut KvCache,
        strategy: SelectionStrategy,
    ) -> Result<(Vec<f64>, GateDecision)> {
        if x_new.len() != self.width() {
            return Err(Error::shape("moa decode_step", &[x_new.len()], &[self.width()]));
        }
        if cache.layout != self.layout {
            return Err(Error::State("kv cache built for a different head layout"));
        }
        if cache.len() >= cache.capacity {
            return Err(Error::CacheOverflow {
                capacity: cache.capacity,
            });
        }
        let x = Tensor::new(&[1, x_new.len()], x_new.to_vec())?;
        cache.keys.extend_from_slice(linear(&x, &self.w_k)?.data());
        cache.values.extend_from_slice(linear(&x, &self.w_v)?.data());
        let gate = self.gate(&x, strategy)?;
        let lay = self.layout;
        let dh = lay.head_dim;
        let len = cache.len();
        let mut out = vec![0.0; self.width()];
        let mut context = Tensor::zeros(&[1, lay.q_width()]);
        let mut p = Vec::new();
        for &i in &gate.selected[0] {
            let expert = &self.experts[i];
            let q = linear(&x, &expert.w_q)?;
            for j in 0..lay.num_heads {
                let off = lay.kv_group(j) * dh;
                let cache_ref = &*cache;
                attend(
                    &q.data()[j * dh..(j + 1) * dh],
                    len,
                    lay.scale(),
                    |u| &cache_ref.key_row(u)[off..off + dh],
                    |u| &cache_ref.value_row(u)[off..off + dh],
                    &mut p,
                    &mut context.row_mut(0)[j * dh..(j + 1) * dh],
                );
            }
            let o = matmul(&context, &expert.w_o)?;
            axpy(gate.scores.data()[i], o.data(), &mut out);
        }
        Ok((out, gate.decision(0)))
    }
}

impl Parameters for MoaLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(r) = &self.router {
            f(join(prefix, "router"), &r.weight);
        }
        f(join(prefix, "w_k"), &self.w_k);
        f(join(prefix, "w_v"), &self.w_v);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("experts.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(r) = &mut self.router {
            f(join(prefix, "router"), &mut r.weight);
        }
        f(join(prefix, "w_k"), &mut self.w_k);
        f(join(prefix, "w_v"), &mut self.w_v);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("experts.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, GradComparison};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_layer(n_att: usize, layout: HeadLayout, d: usize, seed: u64) -> MoaLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = (0..n_att)
            .map(|_| AttentionExpert {
                w_q: random(&[layout.q_width(), d], &mut rng, 0.7),
                w_o: random(&[layout.q_width(), d], &mut rng, 0.7),
            })
            .collect();
        let w_k = random(&[layout.kv_width(), d], &mut rng, 0.7);
        let w_v = random(&[layout.kv_width(), d], &mut rng, 0.7);
        let router = (n_att > 1).then(|| Router::new(random(&[n_att, d], &mut rng, 1.0)).unwrap());
        MoaLayer::new(experts, w_k, w_v, router, layout).unwrap()
    }

    const GQA: HeadLayout = HeadLayout {
        num_heads: 4,
        head_dim: 3,
        num_kv_heads: 2,
    };

    #[test]
    fn kv_grouping() {
        assert_eq!((0..4).map(|j| GQA.kv_group(j)).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        let odd = HeadLayout {
            num_heads: 3,
            head_dim: 2,
            num_kv_heads: 2,
        };
        assert_eq!((0..3).map(|j| odd.kv_group(j)).collect::<Vec<_>>(), vec![0, 1, 0]);
    }

    /// Plain GQA attention, written independently of the layer code.
    fn reference_gqa(expert: &AttentionExpert, w_k: &Tensor, w_v: &Tensor, lay: HeadLayout, x: &Tensor) -> Tensor {
        let l = x.rows();
        let q = linear(x, &expert.w_q).unwrap();
        let k = linear(x, w_k).unwrap();
        let v = linear(x, w_v).unwrap();
        let dh = lay.head_dim;
        let mut ctx = Tensor::zeros(&[l, lay.q_width()]);
        for j in 0..lay.num_heads {
            let g = lay.kv_group(j);
            for t in 0..l {
                let mut w: Vec<f64> = (0..=t)
                    .map(|u| {
                        (0..dh).map(|c| q.row(t)[j * dh + c] * k.row(u)[g * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = w.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = w.iter().map(|s| (s - m).exp()).sum();
                for s in &mut w {
                    *s = (*s - m).exp() / z;
                }
                for c in 0..dh {
                    ctx.row_mut(t)[j * dh + c] = (0..=t).map(|u| w[u] * v.row(u)[g * dh + c]).sum();
                }
            }
        }
        matmul(&ctx, &expert.w_o).unwrap()
    }

    #[test]
    fn single_selected_expert_reduces_to_gqa() {
        let layer = random_layer(1, GQA, 5, 1);
        let x = random(&[6, 5], &mut ChaCha8Rng::seed_from_u64(2), 1.0);
        let (o, _) = layer.forward(&x, 6, SelectionStrategy::Dense).unwrap();
        let r = reference_gqa(&layer.experts[0], &layer.w_k, &layer.w_v, GQA, &x);
        assert!(o.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn top1_with_saturated_gate_reduces_to_that_expert() {
        let mut layer = random_layer(3, GQA, 5, 3);
        // A large router row for expert 2 drives S_2 to 1 on positive inputs.
        let mut w = Tensor::zeros(&[3, 5]);
        w.row_mut(2).fill(200.0);
        layer.router = Some(Router::new(w).unwrap());
        let x = Tensor::new(&[4, 5], (0..20).map(|i| 0.5 + 0.05 * i as f64).collect()).unwrap();
        let (o, gate) = layer.forward(&x, 4, SelectionStrategy::TopK { k: 1 }).unwrap();
        assert!(gate.selected.iter().all(|s| s == &vec![2]));
        let r = reference_gqa(&layer.experts[2], &layer.w_k, &layer.w_v, GQA, &x);
        assert!(o.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn identical_experts_with_even_gate() {
        let base = random_layer(1, GQA, 5, 4);
        let e = base.experts[0].clone();
        let layer = MoaLayer::new(
            vec![e.clone(), e],
            base.w_k.clone(),
            base.w_v.clone(),
            Some(Router::new(Tensor::zeros(&[2, 5])).unwrap()),
            GQA,
        )
        .unwrap();
        let x = random(&[5, 5], &mut ChaCha8Rng::seed_from_u64(5), 1.0);
        let (o, _) = layer.forward(&x, 5, SelectionStrategy::Dense).unwrap();
        let (single, _) = base.forward(&x, 5, SelectionStrategy::Dense).unwrap();
        assert!(o.max_abs_diff(&single) < 1e-12);
    }

    #[test]
    fn mha_when_kv_heads_equal_query_heads() {
        let lay = HeadLayout {
            num_heads: 2,
            head_dim: 3,
            num_kv_heads: 2,
        };
        let layer = random_layer(1, lay, 4, 6);
        let x = random(&[3, 4], &mut ChaCha8Rng::seed_from_u64(7), 1.0);
        let (o, _) = layer.forward(&x, 3, SelectionStrategy::Dense).unwrap();
        assert!(o.max_abs_diff(&reference_gqa(&layer.experts[0], &layer.w_k, &layer.w_v, lay, &x)) < 1e-12);
    }

    #[test]
    fn causality() {
        let layer = random_layer(2, GQA, 5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[8, 5], &mut rng, 1.0);
        let mut y = x.clone();
        y.row_mut(5).copy_from_slice(random(&[1, 5], &mut rng, 1.0).data());
        let (a, _) = layer.forward(&x, 8, SelectionStrategy::Dense).unwrap();
        let (b, _) = layer.forward(&y, 8, SelectionStrategy::Dense).unwrap();
        for t in 0..5 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(5), b.row(5));
    }

    #[test]
    fn sequences_in_a_batch_are_independent() {
        let layer = random_layer(2, GQA, 5, 10);
        let x = random(&[6, 5], &mut ChaCha8Rng::seed_from_u64(11), 1.0);
        let (both, _) = layer.forward(&x, 3, SelectionStrategy::Dense).unwrap();
        let second = x.gather_rows(&[3, 4, 5]);
        let (alone, _) = layer.forward(&second, 3, SelectionStrategy::Dense).unwrap();
        assert!(both.gather_rows(&[3, 4, 5]).max_abs_diff(&alone) < 1e-15);
    }

    #[test]
    fn dense_gate_is_sum_over_all_experts() {
        let layer = random_layer(3, GQA, 5, 12);
        let x = random(&[4, 5], &mut ChaCha8Rng::seed_from_u64(13), 1.0);
        let (o, gate) = layer.forward(&x, 4, SelectionStrategy::Dense).unwrap();
        let mut expected = x.zeros_like();
        for (i, e) in layer.experts.iter().enumerate() {
            let r = reference_gqa(e, &layer.w_k, &layer.w_v, GQA, &x);
            for t in 0..4 {
                axpy(gate.scores.row(t)[i], r.row(t), expected.row_mut(t));
            }
        }
        assert!(o.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut layer = random_layer(2, GQA, 5, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&[6, 5], &mut rng, 1.0);
        let w = random(&[6, 5], &mut rng, 1.0);
        let seq = 3;
        layer.forward_train(&x, seq, SelectionStrategy::Dense).unwrap();
        let mut grads = layer.clone();
        grads.zero_params();
        let back = layer.backward(&w, None, &mut grads).unwrap();
        let loss = |l: &MoaLayer, x: &Tensor| dot(l.forward(x, seq, SelectionStrategy::Dense).unwrap().0.data(), w.data());
        let nx = finite_diff_grad(|t| loss(&layer, t), &x, 1e-5);
        let cmp = GradComparison::new(&back.d_input, &nx, 1e-8);
        assert!(cmp.max_rel_err < 1e-4, "{cmp:?}");
        let analytic = grads.named_params();
        for (k, (name, value)) in layer.named_params().into_iter().enumerate() {
            let numeric = finite_diff_grad(
                |t| {
                    let mut probe = layer.clone();
                    probe.visit_mut("", &mut |n, p| {
                        if n == name {
                            *p = t.clone();
                        }
                    });
                    loss(&probe, &x)
                },
                &value,
                1e-5,
            );
            let cmp = GradComparison::new(&analytic[k].1, &numeric, 1e-8);
            assert!(cmp.max_rel_err < 1e-4, "{name}: {cmp:?}");
        }
    }

    #[test]
    fn sparse_backward_leaves_unselected_experts_untouched() {
        let mut layer = random_layer(3, GQA, 5, 16);
        let x = random(&[4, 5], &mut ChaCha8Rng::seed_from_u64(17), 1.0);
        let (_, gate) = layer.forward_train(&x, 4, SelectionStrategy::TopK { k: 1 }).unwrap();
        let mut grads = layer.clone();
        grads.zero_params();
        let back = layer.backward(&Tensor::full(&[4, 5], 1.0), None, &mut grads).unwrap();
        for i in 0..3 {
            let used = gate.selected.iter().any(|s| s.contains(&i));
            let touched = grads.experts[i].w_o.sq_norm() > 0.0;
            assert_eq!(used, touched, "expert {i}");
            for t in 0..4 {
                if !gate.selected[t].contains(&i) {
                    assert_eq!(back.d_scores.row(t)[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn decode_matches_full_forward() {
        let layer = random_layer(3, GQA, 5, 18);
        let x = random(&[16, 5], &mut ChaCha8Rng::seed_from_u64(19), 1.0);
        for strategy in [SelectionStrategy::Dense, SelectionStrategy::TopK { k: 2 }, SelectionStrategy::Threshold { eps: 0.9 }] {
            let (full, _) = layer.forward(&x, 16, strategy).unwrap();
            let mut cache = layer.new_cache(16);
            for t in 0..16 {
                let (o, _) = layer.decode_step(x.row(t), &mut cache, strategy).unwrap();
                let diff = o.iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-10, "{strategy} step {t}: {diff}");
            }
            assert_eq!(cache.len(), 16);
            assert_eq!(cache.keys().unwrap().dims(), &[2, 16, 3]);
        }
    }

    #[test]
    fn first_decode_step_is_the_value_path() {
        let layer = random_layer(1, GQA, 5, 20);
        let x = random(&[1, 5], &mut ChaCha8Rng::seed_from_u64(21), 1.0);
        let mut cache = layer.new_cache(4);
        let (o, _) = layer.decode_step(x.row(0), &mut cache, SelectionStrategy::Dense).unwrap();
        let v = linear(&x, &layer.w_v).unwrap();
        let mut ctx = Tensor::zeros(&[1, GQA.q_width()]);
        for j in 0..GQA.num_heads {
            let g = GQA.kv_group(j);
            ctx.row_mut(0)[j * 3..(j + 1) * 3].copy_from_slice(&v.row(0)[g * 3..(g + 1) * 3]);
        }
        let expected = matmul(&ctx, &layer.experts[0].w_o).unwrap();
        let diff = o.iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-14);
    }

    #[test]
    fn cache_overflow() {
        let layer = random_layer(1, GQA, 5, 22);
        let mut cache = layer.new_cache(2);
        let x = [0.1; 5];
        layer.decode_step(&x, &mut cache, SelectionStrategy::Dense).unwrap();
        layer.decode_step(&x, &mut cache, SelectionStrategy::Dense).unwrap();
        assert!(matches!(
            layer.decode_step(&x, &mut cache, SelectionStrategy::Dense),
            Err(Error::CacheOverflow { capacity: 2 })
        ));
    }

    #[test]
    fn invalid_strategy_is_rejected() {
        let layer = random_layer(2, GQA, 5, 23);
        let x = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            layer.forward(&x, 2, SelectionStrategy::TopK { k: 0 }),
            Err(Error::Strategy(_))
        ));
    }
}
