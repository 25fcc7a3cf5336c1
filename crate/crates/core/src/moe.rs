//! Expert MLP bank with a dense-gradient training path and a masked sparse path.
//!
//! Dense mode evaluates every expert and keeps each output for the backward
//! pass, so the router receives `∇S_i = ⟨e_i(X), ∇O⟩` for all experts. Sparse
//! mode evaluates only the selected experts; unselected entries of `∇S` and
//! the unselected experts' weight gradients are zero.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::gating::{GateBatch, Router, SelectionStrategy};
use crate::params::{join, Parameters};
use crate::tensor::{dot, gelu, gelu_backward, linear, linear_backward, Tensor};

/// `W_out · gelu(W_in · x)`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertMlp {
    /// `[d_ffd, d_h]`.
    pub w_in: Tensor,
    /// `[d_h, d_ffd]`.
    pub w_out: Tensor,
}

#[derive(Clone, Debug)]
struct ExpertCache {
    input: Tensor,
    pre_act: Tensor,
    act: Tensor,
    output: Tensor,
}

impl ExpertMlp {
    pub fn new(w_in: Tensor, w_out: Tensor) -> Result<Self> {
        let (f, d) = (w_in.dims()[0], w_in.cols());
        if w_in.dims().len() != 2 || w_out.dims() != [d, f] {
            return Err(Error::shape("ExpertMlp::new", w_in.dims(), w_out.dims()));
        }
        Ok(ExpertMlp { w_in, w_out })
    }

    pub fn zeros(d_h: usize, d_ffd: usize) -> Self {
        ExpertMlp {
            w_in: Tensor::zeros(&[d_ffd, d_h]),
            w_out: Tensor::zeros(&[d_h, d_ffd]),
        }
    }

    pub fn width(&self) -> usize {
        self.w_in.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w_in.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.output)
    }

    fn forward_cached(&self, x: &Tensor) -> Result<ExpertCache> {
        let pre_act = linear(x, &self.w_in)?;
        let act = gelu(&pre_act);
        let output = linear(&act, &self.w_out)?;
        Ok(ExpertCache {
            input: x.clone(),
            pre_act,
            act,
            output,
        })
    }

    /// Accumulates weight gradients into `grad`; returns `∇x`.
    pub fn backward(&self, x: &Tensor, d_y: &Tensor, grad: &mut ExpertMlp) -> Result<Tensor> {
        let cache = self.forward_cached(x)?;
        self.backward_cached(&cache, d_y, grad)
    }

    fn backward_cached(&self, cache: &ExpertCache, d_y: &Tensor, grad: &mut ExpertMlp) -> Result<Tensor> {
        let d_act = linear_backward(&cache.act, &self.w_out, d_y, &mut grad.w_out)?;
        let d_pre = gelu_backward(&cache.pre_act, &d_act);
        linear_backward(&cache.input, &self.w_in, &d_pre, &mut grad.w_in)
    }
}

impl Parameters for ExpertMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "w_in"), &self.w_in);
        f(join(prefix, "w_out"), &self.w_out);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w_in"), &mut self.w_in);
        f(join(prefix, "w_out"), &mut self.w_out);
    }
}

/// Counts (token, expert) evaluations.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicUsize);

impl EvalCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
}

impl Clone for EvalCounter {
    fn clone(&self) -> Self {
        EvalCounter(AtomicUsize::new(self.get()))
    }
}

#[derive(Clone, Debug)]
struct FfnCache {
    input: Tensor,
    gate: GateBatch,
    rows: Vec<Vec<usize>>,
    experts: Vec<Option<ExpertCache>>,
}

/// Gradients leaving a layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerBackward {
    pub d_input: Tensor,
    /// `∇S` from the output path only (before any auxiliary-loss term),
    /// zero wherever the mask is zero.
    pub d_scores: Tensor,
}

#[derive(Clone, Debug)]
pub struct MoeFfnLayer {
    pub experts: Vec<ExpertMlp>,
    /// `None` for the single-expert dense baseline, whose gate is constant 1.
    pub router: Option<Router>,
    cache: Option<FfnCache>,
    evaluations: EvalCounter,
}

impl MoeFfnLayer {
    pub fn new(experts: Vec<ExpertMlp>, router: Option<Router>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Config(vec!["MoE layer needs at least one expert".into()]))?;
        let (d, f) = (first.width(), first.hidden());
        if experts.iter().any(|e| e.width() != d || e.hidden() != f) {
            return Err(Error::Config(vec!["experts must share one shape".into()]));
        }
        match &router {
            Some(r) if r.num_experts() != experts.len() || r.width() != d => {
                return Err(Error::shape(
                    "MoeFfnLayer::new router",
                    r.weight.dims(),
                    &[experts.len(), d],
                ))
            }
            None if experts.len() != 1 => {
                return Err(Error::Config(vec!["router required with more than one expert".into()]))
            }
            _ => {}
        }
        Ok(MoeFfnLayer {
            experts,
            router,
            cache: None,
            evaluations: EvalCounter::default(),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn width(&self) -> usize {
        self.experts[0].width()
    }

    /// Number of (token, expert) evaluations since the last reset.
    pub fn evaluations(&self) -> &EvalCounter {
        &self.evaluations
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

    fn run(&self, x: &Tensor, strategy: SelectionStrategy, keep: bool) -> Result<(Tensor, GateBatch, Option<FfnCache>)> {
        if x.dims().len() != 2 || x.cols() != self.width() {
            return Err(Error::shape("moe forward", x.dims(), &[x.rows(), self.width()]));
        }
        let gate = self.gate(x, strategy)?;
        let rows = gate.expert_rows();
        let mut out = x.zeros_like();
        let mut caches = Vec::with_capacity(self.experts.len());
        for (i, (expert, idx)) in self.experts.iter().zip(&rows).enumerate() {
            if idx.is_empty() {
                caches.push(None);
                continue;
            }
            let xi = x.gather_rows(idx);
            let ec = expert.forward_cached(&xi)?;
            self.evaluations.add(idx.len());
            for (r, &tok) in idx.iter().enumerate() {
                let s = gate.scores.row(tok)[i];
                for (o, &y) in out.row_mut(tok).iter_mut().zip(ec.output.row(r)) {
                    *o += s * y;
                }
            }
            caches.push(keep.then_some(ec));
        }
        let cache = keep.then(|| FfnCache {
            input: x.clone(),
            gate: gate.clone(),
            rows,
            experts: caches,
        });
        Ok((out, gate, cache))
    }

    /// Inference forward; leaves the training cache untouched.
    pub fn forward(&self, x: &Tensor, strategy: SelectionStrategy) -> Result<(Tensor, GateBatch)> {
        let (o, g, _) = self.run(x, strategy, false)?;
        Ok((o, g))
    }

    /// Evaluates every expert and caches all outputs for [`Self::dense_backward`].
    pub fn dense_forward(&mut self, x: &Tensor) -> Result<(Tensor, GateBatch)> {
        self.sparse_forward(x, SelectionStrategy::Dense)
    }

    /// Evaluates only the selected experts and caches their outputs.
    pub fn sparse_forward(&mut self, x: &Tensor, strategy: SelectionStrategy) -> Result<(Tensor, GateBatch)> {
        let (o, g, cache) = self.run(x, strategy, true)?;
        self.cache = cache;
        Ok((o, g))
    }

    /// Backward after [`Self::dense_forward`]: every expert and every score receive gradient.
    ///
    /// `d_scores_extra` is an additional `∇S` (e.g. from the MI loss) added
    /// before the softmax backward.
    pub fn dense_backward(
        &mut self,
        d_out: &Tensor,
        d_scores_extra: Option<&Tensor>,
        grads: &mut MoeFfnLayer,
    ) -> Result<LayerBackward> {
        match &self.cache {
            None => Err(Error::State("dense_backward without a cached forward")),
            Some(c) if !c.gate.is_full() => {
                Err(Error::State("dense_backward requires a dense forward cache"))
            }
            Some(_) => self.backward(d_out, d_scores_extra, grads),
        }
    }

    /// Masked backward after [`Self::sparse_forward`].
    pub fn sparse_backward(
        &mut self,
        d_out: &Tensor,
        d_scores_extra: Option<&Tensor>,
        grads: &mut MoeFfnLayer,
    ) -> Result<LayerBackward> {
        self.backward(d_out, d_scores_extra, grads)
    }

    fn backward(
        &mut self,
        d_out: &Tensor,
        d_scores_extra: Option<&Tensor>,
        grads: &mut MoeFfnLayer,
    ) -> Result<LayerBackward> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::State("backward without a cached forward"))?;
        if d_out.dims() != cache.input.dims() {
            return Err(Error::shape("moe backward", d_out.dims(), cache.input.dims()));
        }
        let scores = &cache.gate.scores;
        let mut d_scores = scores.zeros_like();
        let mut d_input = cache.input.zeros_like();
        for (i, (idx, ec)) in cache.rows.iter().zip(&cache.experts).enumerate() {
            let Some(ec) = ec else { continue };
            let mut d_y = ec.output.zeros_like();
            for (r, &tok) in idx.iter().enumerate() {
                let g = d_out.row(tok);
                d_scores.row_mut(tok)[i] = dot(ec.output.row(r), g);
                let s = scores.row(tok)[i];
                for (d, &gv) in d_y.row_mut(r).iter_mut().zip(g) {
                    *d = s * gv;
                }
            }
            let dx = self.experts[i].backward_cached(ec, &d_y, &mut grads.experts[i])?;
            d_input.scatter_add_rows(idx, &dx);
        }
        if let (Some(router), Some(grad_router)) = (&self.router, grads.router.as_mut()) {
            let mut total = d_scores.clone();
            if let Some(extra) = d_scores_extra {
                total.add_assign(extra)?;
            }
            let dx = router.backward(&cache.input, scores, &total, grad_router)?;
            d_input.add_assign(&dx)?;
        }
        Ok(LayerBackward { d_input, d_scores })
    }
}

impl Parameters for MoeFfnLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(r) = &self.router {
            f(join(prefix, "router"), &r.weight);
        }
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("experts.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(r) = &mut self.router {
            f(join(prefix, "router"), &mut r.weight);
        }
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("experts.{i}")), f);
        }
    }
}
