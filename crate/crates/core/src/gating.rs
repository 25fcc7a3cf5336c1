//! Router scoring and the expert-selection strategies used at inference.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{linear, linear_backward, softmax_backward_slice, softmax_slice, Tensor};

/// Linear map from a token to one logit per expert, followed by softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `[num_experts, width]`.
    pub weight: Tensor,
}

impl Router {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.dims().len() != 2 {
            return Err(Error::InvalidShape(weight.dims().to_vec(), "router weight must be 2-D"));
        }
        weight.check_finite("router weight")?;
        Ok(Router { weight })
    }

    pub fn num_experts(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Softmax scores `[t, N]` for tokens `x: [t, width]`.
    pub fn route(&self, x: &Tensor) -> Result<Tensor> {
        let mut scores = linear(x, &self.weight)?;
        for r in 0..scores.rows() {
            let logits = scores.row(r).to_vec();
            softmax_slice(&logits, scores.row_mut(r));
        }
        Ok(scores)
    }

    /// Pushes `∇S` through the softmax and the projection. Accumulates the
    /// weight gradient into `grad` and returns `∇x`.
    pub fn backward(
        &self,
        x: &Tensor,
        scores: &Tensor,
        d_scores: &Tensor,
        grad: &mut Router,
    ) -> Result<Tensor> {
        if scores.dims() != d_scores.dims() {
            return Err(Error::shape("router backward", scores.dims(), d_scores.dims()));
        }
        let mut d_logits = scores.zeros_like();
        for r in 0..scores.rows() {
            softmax_backward_slice(scores.row(r), d_scores.row(r), d_logits.row_mut(r));
        }
        linear_backward(x, &self.weight, &d_logits, &mut grad.weight)
    }
}

/// Scores, normalized scores, and the selected expert set for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub scores: Vec<f64>,
    /// `N · S_i`.
    pub normalized: Vec<f64>,
    /// Ascending expert indices.
    pub selected: Vec<usize>,
    pub mask: Vec<bool>,
}

impl GateDecision {
    fn new(scores: &[f64], mut selected: Vec<usize>) -> Self {
        selected.sort_unstable();
        let n = scores.len();
        let mut mask = vec![false; n];
        for &i in &selected {
            mask[i] = true;
        }
        GateDecision {
            scores: scores.to_vec(),
            normalized: normalized_scores(scores),
            selected,
            mask,
        }
    }
}

pub fn normalized_scores(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    scores.iter().map(|s| s * n).collect()
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Experts whose normalized score strictly exceeds `eps`, before any fallback.
pub fn threshold_passing(scores: &[f64], eps: f64) -> Vec<usize> {
    let n = scores.len() as f64;
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| n * s > eps)
        .map(|(i, _)| i)
        .collect()
}

/// Threshold selection with an argmax fallback when nothing passes.
pub fn select_threshold(scores: &[f64], eps: f64) -> GateDecision {
    let mut selected = threshold_passing(scores, eps);
    if selected.is_empty() {
        selected.push(argmax(scores));
    }
    GateDecision::new(scores, selected)
}

/// Per-token threshold count including the fallback, so always `>= 1`.
pub fn threshold_count(scores: &[f64], eps: f64) -> usize {
    threshold_passing(scores, eps).len().max(1)
}

/// The `k` highest-scoring experts; ties go to the lower index. Scores are
/// left as they are (no renormalization over the selected set).
pub fn select_topk(scores: &[f64], k: usize) -> Result<GateDecision> {
    if k == 0 || k > scores.len() {
        return Err(Error::Strategy(format!(
            "top-k with k={k} for {} experts",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(GateDecision::new(scores, order))
}

/// Round-half-up mean of the per-token threshold counts, clamped to `[1, N]`.
pub fn threshold_topk_k(scores: &Tensor, eps: f64) -> usize {
    let t = scores.rows();
    let total: usize = (0..t).map(|r| threshold_count(scores.row(r), eps)).sum();
    ((2 * total + t) / (2 * t)).clamp(1, scores.cols())
}

/// Threshold-TopK: the batch-average threshold count becomes a uniform K.
pub fn select_threshold_topk(scores: &Tensor, eps: f64) -> Result<(usize, Vec<GateDecision>)> {
    let k = threshold_topk_k(scores, eps);
    let decisions = (0..scores.rows())
        .map(|r| select_topk(scores.row(r), k))
        .collect::<Result<Vec<_>>>()?;
    Ok((k, decisions))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SelectionStrategy {
    Dense,
    TopK { k: usize },
    Threshold { eps: f64 },
    ThresholdTopK { eps: f64 },
}

impl SelectionStrategy {
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        match *self {
            SelectionStrategy::TopK { k } if k == 0 || k > num_experts => Err(Error::Strategy(
                format!("top-k with k={k} for {num_experts} experts"),
            )),
            SelectionStrategy::Threshold { eps } | SelectionStrategy::ThresholdTopK { eps }
                if !(eps >= 0.0 && eps.is_finite()) =>
            {
                Err(Error::Strategy(format!("threshold {eps} must be finite and >= 0")))
            }
            _ => Ok(()),
        }
    }

    /// Strategy applied to attention experts when this one is requested for
    /// the model: the fixed-K families keep every attention expert active.
    pub fn for_attention(&self) -> SelectionStrategy {
        match self {
            SelectionStrategy::TopK { .. } | SelectionStrategy::ThresholdTopK { .. } => {
                SelectionStrategy::Dense
            }
            other => *other,
        }
    }

    /// Clamps K to the layer's expert count, so one model-level strategy
    /// can drive layers of different widths.
    pub fn clamp_to(&self, num_experts: usize) -> SelectionStrategy {
        match *self {
            SelectionStrategy::TopK { k } => SelectionStrategy::TopK {
                k: k.min(num_experts),
            },
            other => other,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, SelectionStrategy::Dense)
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionStrategy::Dense => write!(f, "dense"),
            SelectionStrategy::TopK { k } => write!(f, "topk:{k}"),
            SelectionStrategy::Threshold { eps } => write!(f, "threshold:{eps}"),
            SelectionStrategy::ThresholdTopK { eps } => write!(f, "threshold-topk:{eps}"),
        }
    }
}

/// Scores and selections for every token a layer saw in one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBatch {
    /// `[t, N]` softmax scores.
    pub scores: Tensor,
    /// Ascending selected experts per token.
    pub selected: Vec<Vec<usize>>,
}

impl GateBatch {
    pub fn select(scores: Tensor, strategy: SelectionStrategy) -> Result<Self> {
        let n = scores.cols();
        strategy.validate(n)?;
        let t = scores.rows();
        let selected = match strategy {
            SelectionStrategy::Dense => vec![(0..n).collect(); t],
            SelectionStrategy::TopK { k } => (0..t)
                .map(|r| select_topk(scores.row(r), k).map(|d| d.selected))
                .collect::<Result<_>>()?,
            SelectionStrategy::Threshold { eps } => (0..t)
                .map(|r| select_threshold(scores.row(r), eps).selected)
                .collect(),
            SelectionStrategy::ThresholdTopK { eps } => select_threshold_topk(&scores, eps)?
                .1
                .into_iter()
                .map(|d| d.selected)
                .collect(),
        };
        Ok(GateBatch { scores, selected })
    }

    /// Gate of a router-less single-expert layer: score 1 for every token.
    pub fn single_expert(tokens: usize) -> Self {
        GateBatch {
            scores: Tensor::full(&[tokens, 1], 1.0),
            selected: vec![vec![0]; tokens],
        }
    }

    pub fn num_experts(&self) -> usize {
        self.scores.cols()
    }

    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn decision(&self, token: usize) -> GateDecision {
        GateDecision::new(self.scores.row(token), self.selected[token].clone())
    }

    pub fn mask(&self, token: usize) -> Vec<bool> {
        let mut m = vec![false; self.num_experts()];
        for &i in &self.selected[token] {
            m[i] = true;
        }
        m
    }

    /// Tokens routed to each expert, ascending.
    pub fn expert_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.num_experts()];
        for (t, sel) in self.selected.iter().enumerate() {
            for &i in sel {
                rows[i].push(t);
            }
        }
        rows
    }

    pub fn is_full(&self) -> bool {
        let n = self.num_experts();
        self.selected.iter().all(|s| s.len() == n)
    }

    pub fn total_selections(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }
}

/// Marginal expert distribution and the entropies of the mutual-information loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    pub marginal: Vec<f64>,
    pub entropy: f64,
    pub mean_conditional_entropy: f64,
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn gate_stats(scores: &Tensor) -> GateStats {
    let t = scores.rows();
    let n = scores.cols();
    let mut marginal = vec![0.0; n];
    let mut cond = 0.0;
    for r in 0..t {
        let row = scores.row(r);
        for (m, &s) in marginal.iter_mut().zip(row) {
            *m += s;
        }
        cond += entropy(row);
    }
    for m in &mut marginal {
        *m /= t as f64;
    }
    GateStats {
        entropy: entropy(&marginal),
        marginal,
        mean_conditional_entropy: cond / t as f64,
    }
}
