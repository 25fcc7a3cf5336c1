//! Router auxiliary losses and the weighted training objective.

use serde::{Deserialize, Serialize};

use crate::gating::{gate_stats, GateBatch};
use crate::tensor::Tensor;

/// Negative mutual information between tokens and experts:
/// `-H(e) + mean_x H(e|x)`, natural log. Lies in `[-ln N, 0]`.
pub fn mi_loss(scores: &Tensor) -> f64 {
    let st = gate_stats(scores);
    -st.entropy + st.mean_conditional_entropy
}

/// `∂ mi_loss / ∂ S[r, i] = (ln p_i − ln S[r, i]) / t`.
pub fn mi_loss_backward(scores: &Tensor) -> Tensor {
    let t = scores.rows() as f64;
    let marginal = gate_stats(scores).marginal;
    let mut grad = scores.zeros_like();
    for r in 0..scores.rows() {
        for ((g, &s), &p) in grad.row_mut(r).iter_mut().zip(scores.row(r)).zip(&marginal) {
            let ln_s = s.max(f64::MIN_POSITIVE).ln();
            let ln_p = p.max(f64::MIN_POSITIVE).ln();
            *g = (ln_p - ln_s) / t;
        }
    }
    grad
}

/// Fraction of (token, slot) dispatches landing on each expert.
pub fn dispatch_fractions(selected: &[Vec<usize>], num_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_experts];
    for sel in selected {
        for &i in sel {
            counts[i] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Load-balancing loss `N · Σ_i f_i · P_i`, with `f_i` the dispatch
/// fraction over all selected slots and `P_i` the mean gate probability.
pub fn switch_loss(gate: &GateBatch) -> f64 {
    let n = gate.num_experts();
    let f = dispatch_fractions(&gate.selected, n);
    let p = gate_stats(&gate.scores).marginal;
    n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Gradient w.r.t. the scores; dispatch fractions are treated as constants.
pub fn switch_loss_backward(gate: &GateBatch) -> Tensor {
    let n = gate.num_experts();
    let t = gate.tokens() as f64;
    let f = dispatch_fractions(&gate.selected, n);
    let mut grad = gate.scores.zeros_like();
    for r in 0..gate.tokens() {
        for (g, &fi) in grad.row_mut(r).iter_mut().zip(&f) {
            *g = n as f64 * fi / t;
        }
    }
    grad
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// `lm + α_att · mean(attention aux) + α_ffd · mean(FFN aux)`.
pub fn total_loss(lm: f64, attention_aux: &[f64], ffn_aux: &[f64], alpha_att: f64, alpha_ffd: f64) -> f64 {
    lm + alpha_att * mean(attention_aux) + alpha_ffd * mean(ffn_aux)
}

/// Which auxiliary loss a router group is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    MutualInformation,
    Switch,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lm_loss: f64,
    pub attention_aux: Vec<f64>,
    pub ffn_aux: Vec<f64>,
    pub attention_aux_kind: AuxKind,
    pub ffn_aux_kind: AuxKind,
    pub alpha_att: f64,
    pub alpha_ffd: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(
        lm_loss: f64,
        attention: (AuxKind, Vec<f64>),
        ffn: (AuxKind, Vec<f64>),
        alpha_att: f64,
        alpha_ffd: f64,
    ) -> Self {
        let total = total_loss(lm_loss, &attention.1, &ffn.1, alpha_att, alpha_ffd);
        LossReport {
            lm_loss,
            attention_aux_kind: attention.0,
            attention_aux: attention.1,
            ffn_aux_kind: ffn.0,
            ffn_aux: ffn.1,
            alpha_att,
            alpha_ffd,
            total,
        }
    }

    pub fn mean_attention_aux(&self) -> f64 {
        mean(&self.attention_aux)
    }

    pub fn mean_ffn_aux(&self) -> f64 {
        mean(&self.ffn_aux)
    }
}
