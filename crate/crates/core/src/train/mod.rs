//! AdamW training loop with warmup-cosine schedule and gradient clipping.

mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use optim::{adamw_update, clip_gradients, cosine_lr, global_norm, is_decayed, AdamW, AdamWParams};

use crate::analysis::eval_perplexity;
use crate::corpus::{next_batch, TokenStream};
use crate::error::{Error, Result};
use crate::gating::gate_stats;
use crate::losses::AuxKind;
use crate::model::{save_checkpoint, DsMoeModel, LayerKind, TrainMode};
use crate::params::Parameters;

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Steps between validation passes and checkpoints; 0 disables both
    /// except at the start and end.
    pub eval_interval: usize,
    /// Leading validation windows used per validation pass.
    pub eval_windows: usize,
}

impl TrainConfig {
    /// Defaults for `steps` steps of `batch_size x seq_len` tokens, with
    /// warmup over 2% of the budget.
    pub fn for_steps(steps: usize, batch_size: usize, seq_len: usize) -> Self {
        let total = (steps * batch_size * seq_len) as u64;
        TrainConfig {
            lr_peak: 3e-4,
            warmup_tokens: (total / 50).max(1),
            total_tokens: total,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size,
            seq_len,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            eval_interval: 0,
            eval_windows: 64,
        }
    }

    pub fn batch_tokens(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    pub fn steps(&self) -> usize {
        self.total_tokens.div_ceil(self.batch_tokens().max(1)) as usize
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("lr_peak", self.lr_peak),
            ("clip_norm", self.clip_norm),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            errs.push("batch_size and seq_len must be positive".into());
        }
        if self.warmup_tokens == 0 || self.warmup_tokens >= self.total_tokens {
            errs.push(format!(
                "need 0 < warmup_tokens < total_tokens, got {} and {}",
                self.warmup_tokens, self.total_tokens
            ));
        }
        if self.eval_windows == 0 {
            errs.push("eval_windows must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        tokens: u64,
        lm: f64,
        aux_att: f64,
        aux_ffd: f64,
        aux_att_kind: AuxKind,
        aux_ffd_kind: AuxKind,
        total: f64,
        lr: f64,
        grad_norm: f64,
        /// Marginal gate entropy per attention layer.
        entropy_att: Vec<f64>,
        /// Marginal gate entropy per FFN layer.
        entropy_ffd: Vec<f64>,
    },
    Eval {
        step: usize,
        tokens: u64,
        val_lm: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub tokens: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub final_entropy_ffd: Vec<f64>,
    pub records: Vec<MetricRecord>,
}

/// Validation lm loss under the model's own training-time selection.
pub fn validation_loss(model: &DsMoeModel, data: &TokenStream, cfg: &TrainConfig) -> Result<f64> {
    let r = eval_perplexity(model, data.validation(), cfg.seq_len, model.train_ffn_strategy(), Some(cfg.eval_windows))?;
    Ok(r.mean_nll)
}

/// Names of FFN experts selected by no token of the step, which a sparse
/// update must leave untouched.
fn unselected_experts(step: &crate::model::StepOutput) -> Vec<String> {
    let mut out = Vec::new();
    for rec in step.gates.iter().filter(|r| r.kind == LayerKind::Ffn) {
        let mut used = vec![false; rec.gate.num_experts()];
        for s in &rec.gate.selected {
            for &e in s {
                used[e] = true;
            }
        }
        for (e, u) in used.iter().enumerate() {
            if !u {
                out.push(format!("blocks.{}.ffn.experts.{e}.", rec.layer));
            }
        }
    }
    out
}

struct Sink {
    file: Option<fs::File>,
    path: PathBuf,
}

impl Sink {
    fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Writes the checkpoint into a staging directory and swaps it in, so the
/// previous good checkpoint survives a failed write.
fn checkpoint(model: &DsMoeModel, out: &Path, step: u64) -> Result<()> {
    let dest = out.join(CHECKPOINT_DIR);
    let staging = out.join(format!("{CHECKPOINT_DIR}.tmp"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    save_checkpoint(model, &staging, step)?;
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    fs::rename(&staging, &dest).map_err(|e| Error::io(&dest, e))
}

/// Trains `model` in place. With `out`, the metrics log and checkpoints are
/// written there. A non-finite loss or gradient aborts with
/// [`Error::Diverged`], leaving the last checkpoint in place.
pub fn train(model: &mut DsMoeModel, data: &TokenStream, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            max: model.config.max_seq_len,
        });
    }
    let mut sink = Sink {
        file: None,
        path: PathBuf::new(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        sink.file = Some(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        sink.path = path;
    }
    let sparse = model.config.train_mode == TrainMode::SparseGradient;
    let mut opt = AdamW::new(model, cfg.adamw());
    let mut grads = model.zeros_like();
    let mut records = Vec::new();
    let mut emit = |rec: MetricRecord, sink: &mut Sink| -> Result<()> {
        sink.write(&rec)?;
        records.push(rec);
        Ok(())
    };

    let initial_val_loss = validation_loss(model, data, cfg)?;
    if !initial_val_loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            reason: "initial validation loss".into(),
        });
    }
    emit(
        MetricRecord::Eval {
            step: 0,
            tokens: 0,
            val_lm: initial_val_loss,
        },
        &mut sink,
    )?;
    if let Some(dir) = out {
        checkpoint(model, dir, 0)?;
    }

    let steps = cfg.steps();
    let mut tokens = 0u64;
    let mut final_val_loss = initial_val_loss;
    let mut final_entropy_ffd = Vec::new();
    for step in 1..=steps {
        let batch = next_batch(data.train(), cfg.batch_size, cfg.seq_len, cfg.seed, step as u64)?;
        // Schedule position is the middle of this batch, so neither the
        // first nor the last step gets a zero rate.
        let lr = cosine_lr(tokens + cfg.batch_tokens() / 2, cfg.lr_peak, cfg.warmup_tokens, cfg.total_tokens);
        tokens += cfg.batch_tokens();
        grads.zero_params();
        let diverged = |reason: String| Error::Diverged { step, reason };
        let out_step = match model.loss_and_grad(&batch, &mut grads) {
            Ok(s) => s,
            Err(Error::NonFinite(what)) => return Err(diverged(what)),
            Err(e) => return Err(e),
        };
        let grad_norm = match clip_gradients(&mut grads, cfg.clip_norm) {
            Ok(n) => n,
            Err(Error::NonFinite(what)) => return Err(diverged(what)),
            Err(e) => return Err(e),
        };
        let frozen = if sparse { unselected_experts(&out_step) } else { Vec::new() };
        opt.step(model, &grads, lr, &|name| frozen.iter().any(|p| name.starts_with(p.as_str())))?;
        if !opt.is_finite() {
            return Err(diverged("optimizer moments".into()));
        }

        let entropies = |kind| -> Vec<f64> {
            out_step
                .gates
                .iter()
                .filter(|r| r.kind == kind)
                .map(|r| gate_stats(&r.gate.scores).entropy)
                .collect()
        };
        final_entropy_ffd = entropies(LayerKind::Ffn);
        let loss = &out_step.loss;
        emit(
            MetricRecord::Step {
                step,
                tokens,
                lm: loss.lm_loss,
                aux_att: loss.mean_attention_aux(),
                aux_ffd: loss.mean_ffn_aux(),
                aux_att_kind: loss.attention_aux_kind,
                aux_ffd_kind: loss.ffn_aux_kind,
                total: loss.total,
                lr,
                grad_norm,
                entropy_att: entropies(LayerKind::Attention),
                entropy_ffd: final_entropy_ffd.clone(),
            },
            &mut sink,
        )?;

        let at_interval = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
        if at_interval || step == steps {
            let val = validation_loss(model, data, cfg)?;
            if !val.is_finite() {
                return Err(diverged("validation loss".into()));
            }
            final_val_loss = val;
            emit(
                MetricRecord::Eval {
                    step,
                    tokens,
                    val_lm: val,
                },
                &mut sink,
            )?;
            if let Some(dir) = out {
                checkpoint(model, dir, step as u64)?;
            }
        }
    }
    Ok(TrainReport {
        steps,
        tokens,
        initial_val_loss,
        final_val_loss,
        final_entropy_ffd,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_checkpoint, ModelConfig};

    fn corpus() -> TokenStream {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(400);
        TokenStream::from_bytes(text.as_bytes()).unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        let mut c = TrainConfig::for_steps(steps, 4, 16);
        c.lr_peak = 3e-3;
        c.eval_windows = 8;
        c
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10).validate().is_ok());
        let mut c = cfg(10);
        c.warmup_tokens = c.total_tokens;
        c.lr_peak = -1.0;
        match c.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_decreases_and_runs_are_deterministic() {
        let data = corpus();
        let mut a = DsMoeModel::new(&ModelConfig::tiny(), 1).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg(60), None).unwrap();
        let rb = train(&mut b, &data, &cfg(60), None).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.final_val_loss < ra.initial_val_loss);
        assert_eq!(ra.steps, 60);
    }

    fn expert_params(m: &DsMoeModel) -> Vec<(String, crate::tensor::Tensor)> {
        m.named_params().into_iter().filter(|(n, _)| n.contains(".ffn.experts.")).collect()
    }

    #[test]
    fn dense_gradient_mode_updates_every_expert() {
        let data = corpus();
        let mut m = DsMoeModel::new(&ModelConfig::tiny(), 2).unwrap();
        let before = expert_params(&m);
        train(&mut m, &data, &TrainConfig::for_steps(1, 2, 8), None).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(expert_params(&m)) {
            assert!(a.max_abs_diff(&b) > 0.0, "{name} unchanged");
        }
    }

    #[test]
    fn sparse_mode_leaves_unselected_experts_bit_identical() {
        let data = corpus();
        let mut config = ModelConfig::tiny().with_mode(TrainMode::SparseGradient);
        config.topk_train = 1;
        let mut m = DsMoeModel::new(&config, 3).unwrap();
        // Uniform scores tie, and ties go to expert 0.
        for b in &mut m.blocks {
            b.ffn.router.as_mut().unwrap().weight.fill(0.0);
        }
        let tc = TrainConfig::for_steps(1, 2, 8);
        let batch = next_batch(data.train(), 2, 8, tc.seed, 1).unwrap();
        let gates = m.forward(&batch.inputs, m.train_ffn_strategy()).unwrap().gates;
        let before = expert_params(&m);
        train(&mut m, &data, &tc, None).unwrap();
        let after = expert_params(&m);
        let mut checked = 0;
        for rec in gates.iter().filter(|r| r.kind == LayerKind::Ffn) {
            for e in 0..rec.gate.num_experts() {
                let used = rec.gate.selected.iter().any(|s| s.contains(&e));
                let prefix = format!("blocks.{}.ffn.experts.{e}.", rec.layer);
                for ((name, a), (_, b)) in before.iter().zip(&after) {
                    if name.starts_with(&prefix) {
                        assert_eq!(used, a != b, "{name}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus();
        let mut m = DsMoeModel::new(&ModelConfig::tiny(), 4).unwrap();
        let mut c = cfg(6);
        c.eval_interval = 3;
        let r = train(&mut m, &data, &c, Some(dir.path())).unwrap();
        let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log.lines().count(), r.records.len());
        assert_eq!(r.records.len(), 6 + 3);
        for line in log.lines() {
            let _: MetricRecord = serde_json::from_str(line).unwrap();
        }
        let (loaded, step) = load_checkpoint(dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(step, 6);
        assert_eq!(loaded.config, m.config);
    }

    #[test]
    fn divergence_keeps_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus();
        let mut m = DsMoeModel::new(&ModelConfig::tiny(), 5).unwrap();
        train(&mut m, &data, &cfg(2), Some(dir.path())).unwrap();
        let good = m.clone();
        m.lm_head.data_mut()[0] = f64::NAN;
        let err = train(&mut m, &data, &cfg(4), Some(dir.path()));
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
        let (loaded, step) = load_checkpoint(dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(step, 2);
        let mut rounded = good;
        rounded.round_to_f32();
        assert_eq!(loaded.named_params(), rounded.named_params());
    }

    #[test]
    fn non_finite_step_loss_is_divergence() {
        let data = corpus();
        let mut m = DsMoeModel::new(&ModelConfig::tiny(), 6).unwrap();
        let mut grads = m.zeros_like();
        m.lm_head.data_mut()[0] = f64::INFINITY;
        let batch = next_batch(data.train(), 2, 8, 0, 1).unwrap();
        assert!(matches!(m.loss_and_grad(&batch, &mut grads), Err(Error::NonFinite(_))));
    }
}
