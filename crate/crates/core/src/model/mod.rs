//! Model assembly, forward/backward passes, parameter accounting and checkpoints.

mod accounting;
mod checkpoint;
mod config;

pub use accounting::{
    active_flops_per_token, count_params_active, count_params_total, ActiveParams, ParamBreakdown,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ManifestEntry};
pub use config::{ModelConfig, TrainMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionExpert, HeadLayout, KvCache, MoaLayer};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::gating::{gate_stats, GateBatch, Router, SelectionStrategy};
use crate::losses::{mi_loss, mi_loss_backward, switch_loss, switch_loss_backward, AuxKind, LossReport};
use crate::moe::{ExpertMlp, MoeFfnLayer};
use crate::params::{join, Parameters};
use crate::tensor::{
    cross_entropy, cross_entropy_backward, layer_norm, layer_norm_backward, linear, linear_backward, Tensor,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[width], 1.0),
            bias: Tensor::zeros(&[width]),
        }
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Pre-norm transformer block: MoA then MoE-FFN, each with a residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MoaLayer,
    pub norm2: LayerNorm,
    pub ffn: MoeFfnLayer,
}

impl Parameters for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Attention,
    Ffn,
}

/// Router output of one layer for every token of a pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub layer: usize,
    pub kind: LayerKind,
    pub gate: GateBatch,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch, seq_len, vocab]`.
    pub logits: Tensor,
    pub gates: Vec<GateRecord>,
}

/// Result of one training forward/backward pass.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossReport,
    pub gates: Vec<GateRecord>,
}

#[derive(Clone, Debug)]
pub struct DsMoeModel {
    pub config: ModelConfig,
    /// `[vocab, d_emb]`.
    pub tok_emb: Tensor,
    /// `[max_seq_len, d_emb]`.
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    /// `[vocab, d_emb]`.
    pub lm_head: Tensor,
}

impl Parameters for DsMoeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "tok_emb"), &self.tok_emb);
        f(join(prefix, "pos_emb"), &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{l}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        f(join(prefix, "lm_head"), &self.lm_head);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "tok_emb"), &mut self.tok_emb);
        f(join(prefix, "pos_emb"), &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{l}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        f(join(prefix, "lm_head"), &mut self.lm_head);
    }
}

/// Output projections get a depth-scaled init.
fn is_output_projection(name: &str) -> bool {
    name.ends_with(".w_o") || name.ends_with(".w_out")
}

impl DsMoeModel {
    /// All-zero weights (unit layer-norm gains) with the config's geometry.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_emb;
        let layout = HeadLayout {
            num_heads: c.n_head,
            head_dim: c.d_att,
            num_kv_heads: c.n_kv,
        };
        let routed = c.train_mode.has_routers();
        let blocks = (0..c.n_layer)
            .map(|_| {
                let experts = (0..c.n_att)
                    .map(|_| AttentionExpert {
                        w_q: Tensor::zeros(&[layout.q_width(), d]),
                        w_o: Tensor::zeros(&[layout.q_width(), d]),
                    })
                    .collect();
                let attn = MoaLayer::new(
                    experts,
                    Tensor::zeros(&[layout.kv_width(), d]),
                    Tensor::zeros(&[layout.kv_width(), d]),
                    routed.then(|| Router::new(Tensor::zeros(&[c.n_att, d]))).transpose()?,
                    layout,
                )?;
                let ffn = MoeFfnLayer::new(
                    (0..c.n_ffd).map(|_| ExpertMlp::zeros(d, c.d_ffd)).collect(),
                    routed.then(|| Router::new(Tensor::zeros(&[c.n_ffd, d]))).transpose()?,
                )?;
                Ok(Block {
                    norm1: LayerNorm::new(d),
                    attn,
                    norm2: LayerNorm::new(d),
                    ffn,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DsMoeModel {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[c.vocab_size, d]),
            pos_emb: Tensor::zeros(&[c.max_seq_len, d]),
            blocks,
            final_norm: LayerNorm::new(d),
            lm_head: Tensor::zeros(&[c.vocab_size, d]),
        })
    }

    /// Weights drawn from `N(0, 0.02²)`, output projections scaled by
    /// `1/√(2·n_layer)`, layer norms at identity. Deterministic per seed.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = DsMoeModel::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let depth_scale = 1.0 / (2.0 * config.n_layer as f64).sqrt();
        model.visit_mut("", &mut |name, t| {
            if name.ends_with(".gain") {
                t.fill(1.0);
            } else if name.ends_with(".bias") {
                t.fill(0.0);
            } else {
                let std = if is_output_projection(&name) {
                    INIT_STD * depth_scale
                } else {
                    INIT_STD
                };
                for v in t.data_mut() {
                    *v = std * normal.sample(&mut rng);
                }
            }
        });
        Ok(model)
    }

    /// Zero-valued buffer with this model's parameter layout.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    pub fn round_to_f32(&mut self) {
        self.visit_mut("", &mut |_, t| t.round_to_f32());
    }

    /// Strategy used by the FFN layers while training in this model's mode.
    pub fn train_ffn_strategy(&self) -> SelectionStrategy {
        match self.config.train_mode {
            TrainMode::SparseGradient => SelectionStrategy::TopK {
                k: self.config.topk_train,
            },
            _ => SelectionStrategy::Dense,
        }
    }

    /// Per-layer strategies derived from one model-level strategy.
    fn layer_strategies(&self, strategy: SelectionStrategy) -> (SelectionStrategy, SelectionStrategy) {
        (
            strategy.for_attention().clamp_to(self.config.n_att),
            strategy.clamp_to(self.config.n_ffd),
        )
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let seq_len = tokens.first().map_or(0, Vec::len);
        if seq_len == 0 || tokens.iter().any(|t| t.len() != seq_len) {
            return Err(Error::Data("token batch must be non-empty and rectangular".into()));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq_len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                limit: self.config.vocab_size,
            });
        }
        Ok(seq_len)
    }

    fn embed(&self, tokens: &[Vec<usize>], seq_len: usize) -> Tensor {
        let d = self.config.d_emb;
        let mut x = Tensor::zeros(&[tokens.len() * seq_len, d]);
        for (b, seq) in tokens.iter().enumerate() {
            for (p, &id) in seq.iter().enumerate() {
                let row = x.row_mut(b * seq_len + p);
                for ((o, &e), &q) in row.iter_mut().zip(self.tok_emb.row(id)).zip(self.pos_emb.row(p)) {
                    *o = e + q;
                }
            }
        }
        x
    }

    fn embed_one(&self, id: usize, pos: usize) -> Vec<f64> {
        self.tok_emb
            .row(id)
            .iter()
            .zip(self.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Inference forward over `tokens: [batch][seq_len]`.
    ///
    /// TopK and Threshold-TopK act on FFN experts only (attention stays
    /// dense); Dense and Threshold act on both.
    pub fn forward(&self, tokens: &[Vec<usize>], strategy: SelectionStrategy) -> Result<ForwardOutput> {
        let seq_len = self.check_tokens(tokens)?;
        let (att_strategy, ffn_strategy) = self.layer_strategies(strategy);
        let mut x = self.embed(tokens, seq_len);
        let mut gates = Vec::with_capacity(2 * self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (h, _) = layer_norm(&x, &block.norm1.gain, &block.norm1.bias)?;
            let (a, g) = block.attn.forward(&h, seq_len, att_strategy)?;
            x.add_assign(&a)?;
            gates.push(GateRecord {
                layer: l,
                kind: LayerKind::Attention,
                gate: g,
            });
            let (h, _) = layer_norm(&x, &block.norm2.gain, &block.norm2.bias)?;
            let (f, g) = block.ffn.forward(&h, ffn_strategy)?;
            x.add_assign(&f)?;
            gates.push(GateRecord {
                layer: l,
                kind: LayerKind::Ffn,
                gate: g,
            });
        }
        let (h, _) = layer_norm(&x, &self.final_norm.gain, &self.final_norm.bias)?;
        let logits = linear(&h, &self.lm_head)?.reshape(&[tokens.len(), seq_len, self.config.vocab_size])?;
        Ok(ForwardOutput { logits, gates })
    }

    fn aux_kinds(&self) -> (AuxKind, AuxKind) {
        match self.config.train_mode {
            TrainMode::SingleExpert => (AuxKind::None, AuxKind::None),
            TrainMode::DenseGradient => (AuxKind::MutualInformation, AuxKind::MutualInformation),
            TrainMode::SparseGradient => (AuxKind::MutualInformation, AuxKind::Switch),
        }
    }

    fn aux_value(kind: AuxKind, gate: &GateBatch) -> f64 {
        match kind {
            AuxKind::MutualInformation => mi_loss(&gate.scores),
            AuxKind::Switch => switch_loss(gate),
            AuxKind::None => 0.0,
        }
    }

    fn aux_grad(kind: AuxKind, gate: &GateBatch, weight: f64) -> Option<Tensor> {
        let mut g = match kind {
            AuxKind::MutualInformation => mi_loss_backward(&gate.scores),
            AuxKind::Switch => switch_loss_backward(gate),
            AuxKind::None => return None,
        };
        g.scale(weight);
        Some(g)
    }

    fn loss_report(&self, lm: f64, gates: &[GateRecord]) -> LossReport {
        let (att_kind, ffn_kind) = self.aux_kinds();
        let collect = |kind: LayerKind, aux: AuxKind| -> Vec<f64> {
            if aux == AuxKind::None {
                return Vec::new();
            }
            gates
                .iter()
                .filter(|r| r.kind == kind)
                .map(|r| Self::aux_value(aux, &r.gate))
                .collect()
        };
        LossReport::new(
            lm,
            (att_kind, collect(LayerKind::Attention, att_kind)),
            (ffn_kind, collect(LayerKind::Ffn, ffn_kind)),
            self.config.alpha_att,
            self.config.alpha_ffd,
        )
    }

    /// Training objective without gradients, using the training-mode
    /// selection (dense attention, mode-dependent FFN).
    pub fn training_loss(&self, batch: &Batch) -> Result<LossReport> {
        let out = self.forward(&batch.inputs, self.train_ffn_strategy())?;
        let lm = cross_entropy(&out.logits, &batch.flat_targets())?;
        Ok(self.loss_report(lm, &out.gates))
    }

    /// Forward and backward of the training objective; gradients are
    /// accumulated into `grads`.
    pub fn loss_and_grad(&mut self, batch: &Batch, grads: &mut DsMoeModel) -> Result<StepOutput> {
        let seq_len = self.check_tokens(&batch.inputs)?;
        let targets = batch.flat_targets();
        let ffn_strategy = self.train_ffn_strategy();
        let sparse_ffn = !ffn_strategy.is_dense();
        let mut x = self.embed(&batch.inputs, seq_len);
        let mut norm_caches = Vec::with_capacity(self.blocks.len());
        let mut gates = Vec::with_capacity(2 * self.blocks.len());
        for (l, block) in self.blocks.iter_mut().enumerate() {
            let (h, c1) = layer_norm(&x, &block.norm1.gain, &block.norm1.bias)?;
            let (a, g) = block.attn.forward_train(&h, seq_len, SelectionStrategy::Dense)?;
            x.add_assign(&a)?;
            gates.push(GateRecord {
                layer: l,
                kind: LayerKind::Attention,
                gate: g,
            });
            let (h, c2) = layer_norm(&x, &block.norm2.gain, &block.norm2.bias)?;
            let (f, g) = block.ffn.sparse_forward(&h, ffn_strategy)?;
            x.add_assign(&f)?;
            gates.push(GateRecord {
                layer: l,
                kind: LayerKind::Ffn,
                gate: g,
            });
            norm_caches.push((c1, c2));
        }
        let (h, final_cache) = layer_norm(&x, &self.final_norm.gain, &self.final_norm.bias)?;
        let logits = linear(&h, &self.lm_head)?;
        let lm = cross_entropy(&logits, &targets)?;
        let report = self.loss_report(lm, &gates);
        if !report.total.is_finite() {
            for block in &mut self.blocks {
                block.attn.clear_cache();
                block.ffn.clear_cache();
            }
            return Err(Error::NonFinite("training loss".into()));
        }

        let d_logits = cross_entropy_backward(&logits, &targets)?;
        let d_h = linear_backward(&h, &self.lm_head, &d_logits, &mut grads.lm_head)?;
        let mut d_x = layer_norm_backward(
            &final_cache,
            &self.final_norm.gain,
            &d_h,
            &mut grads.final_norm.gain,
            &mut grads.final_norm.bias,
        );
        let (att_kind, ffn_kind) = self.aux_kinds();
        let n_layer = self.blocks.len() as f64;
        let att_weight = self.config.alpha_att / n_layer;
        let ffn_weight = self.config.alpha_ffd / n_layer;
        for (l, (block, (c1, c2))) in self.blocks.iter_mut().zip(&norm_caches).enumerate().rev() {
            let gb = &mut grads.blocks[l];
            let extra = Self::aux_grad(ffn_kind, &gates[2 * l + 1].gate, ffn_weight);
            let back = if sparse_ffn {
                block.ffn.sparse_backward(&d_x, extra.as_ref(), &mut gb.ffn)?
            } else {
                block.ffn.dense_backward(&d_x, extra.as_ref(), &mut gb.ffn)?
            };
            let d_norm = layer_norm_backward(c2, &block.norm2.gain, &back.d_input, &mut gb.norm2.gain, &mut gb.norm2.bias);
            d_x.add_assign(&d_norm)?;

            let extra = Self::aux_grad(att_kind, &gates[2 * l].gate, att_weight);
            let back = block.attn.backward(&d_x, extra.as_ref(), &mut gb.attn)?;
            let d_norm = layer_norm_backward(c1, &block.norm1.gain, &back.d_input, &mut gb.norm1.gain, &mut gb.norm1.bias);
            d_x.add_assign(&d_norm)?;
        }
        for (b, seq) in batch.inputs.iter().enumerate() {
            for (p, &id) in seq.iter().enumerate() {
                let g = d_x.row(b * seq_len + p);
                for (o, v) in grads.tok_emb.row_mut(id).iter_mut().zip(g) {
                    *o += v;
                }
                for (o, v) in grads.pos_emb.row_mut(p).iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Ok(StepOutput { loss: report, gates })
    }

    /// One KV cache per layer for incremental decoding.
    pub fn new_caches(&self, capacity: usize) -> Vec<KvCache> {
        let capacity = capacity.min(self.config.max_seq_len);
        self.blocks.iter().map(|b| b.attn.new_cache(capacity)).collect()
    }

    /// Logits for one new token given the per-layer caches of its prefix.
    pub fn decode_step(
        &self,
        token: usize,
        caches: &mut [KvCache],
        strategy: SelectionStrategy,
    ) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::Index {
                what: "token id",
                index: token,
                limit: self.config.vocab_size,
            });
        }
        let pos = caches.first().map_or(0, KvCache::len);
        if pos >= self.config.max_seq_len {
            return Err(Error::CacheOverflow {
                capacity: self.config.max_seq_len,
            });
        }
        let (att_strategy, ffn_strategy) = self.layer_strategies(strategy);
        let d = self.config.d_emb;
        let mut x = Tensor::new(&[1, d], self.embed_one(token, pos))?;
        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            let (h, _) = layer_norm(&x, &block.norm1.gain, &block.norm1.bias)?;
            let (a, _) = block.attn.decode_step(h.data(), cache, att_strategy)?;
            for (o, v) in x.data_mut().iter_mut().zip(&a) {
                *o += v;
            }
            let (h, _) = layer_norm(&x, &block.norm2.gain, &block.norm2.bias)?;
            let (f, _) = block.ffn.forward(&h, ffn_strategy)?;
            x.add_assign(&f)?;
        }
        let (h, _) = layer_norm(&x, &self.final_norm.gain, &self.final_norm.bias)?;
        Ok(linear(&h, &self.lm_head)?.into_data())
    }

    /// Marginal gate entropy `H(e)` per FFN layer for a pass's records.
    pub fn ffn_entropies(gates: &[GateRecord]) -> Vec<f64> {
        gates
            .iter()
            .filter(|r| r.kind == LayerKind::Ffn)
            .map(|r| gate_stats(&r.gate.scores).entropy)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::next_batch;
    use crate::tensor::GradComparison;

    fn small_batch(seed: u64) -> Batch {
        let tokens: Vec<usize> = (0..300).map(|i| (i * 31 + i / 7) % 257).collect();
        next_batch(&tokens, 2, 5, seed, 0).unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = DsMoeModel::new(&cfg, 7).unwrap().named_params();
        let b = DsMoeModel::new(&cfg, 7).unwrap().named_params();
        let c = DsMoeModel::new(&cfg, 8).unwrap().named_params();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_statistics() {
        let mut cfg = ModelConfig::tiny();
        cfg.vocab_size = 3200;
        let m = DsMoeModel::new(&cfg, 1).unwrap();
        let values = m.tok_emb.data();
        assert!(values.len() >= 50_000);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
        assert!(mean.abs() < 5e-4, "{mean}");
        assert!((std - INIT_STD).abs() < 5e-4, "{std}");
        let wo = &m.blocks[0].attn.experts[0].w_o;
        let wo_std = (wo.sq_norm() / wo.numel() as f64).sqrt();
        assert!(wo_std < INIT_STD * 0.8);
        assert_eq!(m.blocks[0].norm1.gain.data(), &[1.0; 16]);
    }

    #[test]
    fn single_expert_mode_has_constant_gate() {
        let cfg = ModelConfig::tiny().with_mode(TrainMode::SingleExpert);
        let m = DsMoeModel::new(&cfg, 2).unwrap();
        assert!(m.blocks[0].ffn.router.is_none());
        let out = m.forward(&[vec![1, 2, 3]], SelectionStrategy::TopK { k: 2 }).unwrap();
        for rec in &out.gates {
            assert_eq!(rec.gate.num_experts(), 1);
            assert!(rec.gate.scores.data().iter().all(|&s| s == 1.0));
        }
    }

    #[test]
    fn dense_topk_full_and_zero_threshold_agree() {
        let m = DsMoeModel::new(&ModelConfig::tiny(), 3).unwrap();
        let tokens = vec![vec![5, 80, 100, 7, 9, 200], vec![1, 2, 3, 4, 5, 6]];
        let dense = m.forward(&tokens, SelectionStrategy::Dense).unwrap().logits;
        let topk = m.forward(&tokens, SelectionStrategy::TopK { k: 4 }).unwrap().logits;
        let thr = m.forward(&tokens, SelectionStrategy::Threshold { eps: 0.0 }).unwrap().logits;
        assert!(dense.max_abs_diff(&topk) < 1e-12);
        assert!(dense.max_abs_diff(&thr) < 1e-12);
    }

    #[test]
    fn causal_logits() {
        let m = DsMoeModel::new(&ModelConfig::tiny(), 4).unwrap();
        let a = m.forward(&[vec![10, 20, 30, 40]], SelectionStrategy::Dense).unwrap().logits;
        let b = m.forward(&[vec![10, 20, 30, 41]], SelectionStrategy::Dense).unwrap().logits;
        let v = m.config.vocab_size;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..], &b.data()[3 * v..]);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.max_seq_len = 4;
        let m = DsMoeModel::new(&cfg, 5).unwrap();
        assert!(matches!(
            m.forward(&[vec![1; 5]], SelectionStrategy::Dense),
            Err(Error::SequenceTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn training_loss_matches_loss_and_grad() {
        for mode in [TrainMode::DenseGradient, TrainMode::SparseGradient, TrainMode::SingleExpert] {
            let cfg = ModelConfig::tiny().with_mode(mode);
            let mut m = DsMoeModel::new(&cfg, 6).unwrap();
            let batch = small_batch(1);
            let mut grads = m.zeros_like();
            let step = m.loss_and_grad(&batch, &mut grads).unwrap();
            let direct = m.training_loss(&batch).unwrap();
            assert!((step.loss.total - direct.total).abs() < 1e-12, "{mode}");
        }
    }

    #[test]
    fn sampled_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::tiny();
        cfg.alpha_att = 0.05;
        cfg.alpha_ffd = 0.07;
        let mut m = DsMoeModel::new(&cfg, 9).unwrap();
        // Larger weights make every gradient path visible.
        m.visit_mut("", &mut |name, t| {
            if !name.ends_with(".gain") && !name.ends_with(".bias") {
                t.scale(10.0);
            }
        });
        let batch = small_batch(2);
        let mut grads = m.zeros_like();
        m.loss_and_grad(&batch, &mut grads).unwrap();
        let analytic = grads.named_params();
        let mut pairs = Vec::new();
        for (k, (name, value)) in m.named_params().into_iter().enumerate() {
            let n = value.numel();
            for idx in [0, n / 3, n - 1] {
                let f = |v: f64| {
                    let mut probe = m.clone();
                    probe.visit_mut("", &mut |pn, t| {
                        if pn == name {
                            t.data_mut()[idx] = v;
                        }
                    });
                    probe.training_loss(&batch).unwrap().total
                };
                let x0 = value.data()[idx];
                let h = 1e-5;
                let numeric = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
                pairs.push((analytic[k].1.data()[idx], numeric));
            }
        }
        let cmp = GradComparison::from_pairs(pairs, 1e-8);
        assert!(cmp.max_rel_err < 1e-4, "{cmp:?}");
    }

    #[test]
    fn decode_matches_forward() {
        let m = DsMoeModel::new(&ModelConfig::tiny(), 10).unwrap();
        let tokens = vec![3, 99, 42, 17, 250, 0, 64];
        let full = m.forward(std::slice::from_ref(&tokens), SelectionStrategy::Dense).unwrap().logits;
        let mut caches = m.new_caches(16);
        for (t, &id) in tokens.iter().enumerate() {
            let logits = m.decode_step(id, &mut caches, SelectionStrategy::Dense).unwrap();
            let v = m.config.vocab_size;
            let row = &full.data()[t * v..(t + 1) * v];
            let diff = logits.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10);
        }
    }
}
