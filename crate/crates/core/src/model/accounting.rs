use serde::{Deserialize, Serialize};

use super::{GateRecord, LayerKind, ModelConfig};

/// Parameter counts by role. Per-layer and per-expert entries are sizes of
/// a single instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub output_projection: usize,
    /// Block norms plus the final norm.
    pub norms: usize,
    pub attention_router: usize,
    pub attention_shared_kv: usize,
    pub attention_expert: usize,
    pub ffn_router: usize,
    pub ffn_expert: usize,
    pub n_layer: usize,
    pub n_att: usize,
    pub n_ffd: usize,
}

impl ParamBreakdown {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let d = cfg.d_emb;
        let routed = cfg.train_mode.has_routers();
        ParamBreakdown {
            token_embedding: cfg.vocab_size * d,
            position_embedding: cfg.max_seq_len * d,
            output_projection: cfg.vocab_size * d,
            norms: (4 * cfg.n_layer + 2) * d,
            attention_router: if routed { cfg.n_att * d } else { 0 },
            attention_shared_kv: 2 * cfg.n_kv * cfg.d_att * d,
            attention_expert: 2 * cfg.n_head * cfg.d_att * d,
            ffn_router: if routed { cfg.n_ffd * d } else { 0 },
            ffn_expert: 2 * d * cfg.d_ffd,
            n_layer: cfg.n_layer,
            n_att: cfg.n_att,
            n_ffd: cfg.n_ffd,
        }
    }

    pub fn attention_layer(&self) -> usize {
        self.attention_router + self.attention_shared_kv + self.n_att * self.attention_expert
    }

    pub fn ffn_layer(&self) -> usize {
        self.ffn_router + self.n_ffd * self.ffn_expert
    }

    /// Attention and FFN parameters (routers included) over all layers.
    pub fn hidden(&self) -> usize {
        self.n_layer * (self.attention_layer() + self.ffn_layer())
    }

    /// Embeddings, norms and the output projection.
    pub fn non_hidden(&self) -> usize {
        self.token_embedding + self.position_embedding + self.output_projection + self.norms
    }

    pub fn total(&self) -> usize {
        self.hidden() + self.non_hidden()
    }
}

pub fn count_params_total(cfg: &ModelConfig) -> usize {
    ParamBreakdown::from_config(cfg).total()
}

/// Mean per-token parameter usage under a recorded selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveParams {
    pub active_total: f64,
    pub active_hidden: f64,
    pub hidden_total: usize,
    pub total: usize,
    pub active_hidden_fraction: f64,
}

fn mean_selected(rec: &GateRecord) -> f64 {
    rec.gate.total_selections() as f64 / rec.gate.tokens().max(1) as f64
}

/// Routers and shared KV projections are always active; expert banks count
/// once per selection. Layers without a record count as fully active.
///
/// Per-token counts are summed as integers and divided once, so the result
/// is exact up to that final division.
pub fn count_params_active(cfg: &ModelConfig, gates: &[GateRecord]) -> ActiveParams {
    let b = ParamBreakdown::from_config(cfg);
    let tokens = gates.first().map_or(1, |r| r.gate.tokens().max(1)) as u128;
    let selections = |layer: usize, kind: LayerKind, n: usize| -> u128 {
        gates
            .iter()
            .find(|r| r.layer == layer && r.kind == kind)
            .map_or(tokens * n as u128, |r| r.gate.total_selections() as u128)
    };
    let always = (b.attention_router + b.attention_shared_kv + b.ffn_router) as u128;
    let mut numerator = 0u128;
    for layer in 0..cfg.n_layer {
        numerator += tokens * always
            + selections(layer, LayerKind::Attention, cfg.n_att) * b.attention_expert as u128
            + selections(layer, LayerKind::Ffn, cfg.n_ffd) * b.ffn_expert as u128;
    }
    let active_hidden = numerator as f64 / tokens as f64;
    let hidden_total = b.hidden();
    ActiveParams {
        active_total: (numerator + tokens * b.non_hidden() as u128) as f64 / tokens as f64,
        active_hidden,
        hidden_total,
        total: b.total(),
        active_hidden_fraction: active_hidden / hidden_total as f64,
    }
}

/// Analytic forward FLOPs per token: two per active matmul weight (the
/// embedding lookups are free) plus the score and value products of every
/// active attention head over `context_len` positions.
pub fn active_flops_per_token(cfg: &ModelConfig, gates: &[GateRecord], context_len: f64) -> f64 {
    let b = ParamBreakdown::from_config(cfg);
    let active = count_params_active(cfg, gates);
    let norm_free = active.active_hidden + b.output_projection as f64;
    let mut attention = 0.0;
    for layer in 0..cfg.n_layer {
        let att_experts = gates
            .iter()
            .find(|r| r.layer == layer && r.kind == LayerKind::Attention)
            .map_or(cfg.n_att as f64, mean_selected);
        attention += att_experts * (4 * cfg.n_head * cfg.d_att) as f64 * context_len;
    }
    2.0 * norm_free + attention
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{GateBatch, SelectionStrategy};
    use crate::model::{DsMoeModel, TrainMode};
    use crate::params::Parameters;
    use crate::tensor::Tensor;

    #[test]
    fn ffn_toy_expert_count() {
        let mut cfg = ModelConfig::tiny();
        cfg.d_emb = 8;
        cfg.n_ffd = 4;
        cfg.d_ffd = 16;
        let b = ParamBreakdown::from_config(&cfg);
        assert_eq!(b.n_ffd * b.ffn_expert, 1024);
    }

    #[test]
    fn total_matches_allocated_tensors() {
        for mode in [TrainMode::DenseGradient, TrainMode::SparseGradient, TrainMode::SingleExpert] {
            let cfg = ModelConfig::tiny().with_mode(mode);
            let m = DsMoeModel::zeros(&cfg).unwrap();
            assert_eq!(m.num_params(), count_params_total(&cfg), "{mode}");
        }
    }

    #[test]
    fn single_expert_equals_one_expert_moe_minus_routers() {
        let mut moe = ModelConfig::tiny();
        moe.n_att = 1;
        moe.n_ffd = 1;
        let single = moe.clone().with_mode(TrainMode::SingleExpert);
        let router_rows = moe.n_layer * 2 * moe.d_emb;
        assert_eq!(count_params_total(&single), count_params_total(&moe) - router_rows);
    }

    fn ffn_record(layer: usize, selected: Vec<Vec<usize>>, n: usize) -> GateRecord {
        GateRecord {
            layer,
            kind: LayerKind::Ffn,
            gate: GateBatch {
                scores: Tensor::full(&[selected.len(), n], 1.0 / n as f64),
                selected,
            },
        }
    }

    #[test]
    fn half_of_ffn_experts_active() {
        let mut cfg = ModelConfig::tiny();
        cfg.d_emb = 8;
        cfg.n_layer = 1;
        let b = ParamBreakdown::from_config(&cfg);
        let full = count_params_active(&cfg, &[ffn_record(0, vec![vec![0, 1, 2, 3]; 3], 4)]);
        let half = count_params_active(&cfg, &[ffn_record(0, vec![vec![0, 1], vec![1, 3], vec![2, 3]], 4)]);
        assert_eq!(full.active_hidden - half.active_hidden, 512.0);
        assert_eq!(b.n_ffd * b.ffn_expert, 1024);
        assert_eq!(full.active_hidden_fraction, 1.0);
    }

    #[test]
    fn flops_scale_linearly_in_k() {
        let cfg = ModelConfig::tiny();
        let flops: Vec<f64> = (1..=4)
            .map(|k| {
                let recs: Vec<GateRecord> = (0..cfg.n_layer)
                    .map(|l| {
                        let scores = Tensor::full(&[3, 4], 0.25);
                        let gate = GateBatch::select(scores, SelectionStrategy::TopK { k }).unwrap();
                        GateRecord { layer: l, kind: LayerKind::Ffn, gate }
                    })
                    .collect();
                active_flops_per_token(&cfg, &recs, 32.0)
            })
            .collect();
        let step = flops[1] - flops[0];
        assert!(step > 0.0);
        for w in flops.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-9);
        }
    }
}
