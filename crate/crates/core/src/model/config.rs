use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Gradient regime used during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Every expert is evaluated and receives gradient (DS-MoE).
    #[serde(rename = "dsmoe")]
    DenseGradient,
    /// Top-K experts forward, masked backward, switch load-balancing loss.
    #[serde(rename = "smoe")]
    SparseGradient,
    /// One expert per layer, no routers.
    #[serde(rename = "dense")]
    SingleExpert,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::DenseGradient => "dsmoe",
            TrainMode::SparseGradient => "smoe",
            TrainMode::SingleExpert => "dense",
        }
    }

    pub fn has_routers(&self) -> bool {
        !matches!(self, TrainMode::SingleExpert)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsmoe" => Ok(TrainMode::DenseGradient),
            "smoe" => Ok(TrainMode::SparseGradient),
            "dense" => Ok(TrainMode::SingleExpert),
            other => Err(Error::Config(vec![format!("unknown train mode {other:?}")])),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub n_layer: usize,
    /// Attention experts per layer.
    pub n_att: usize,
    /// Query heads per attention expert.
    pub n_head: usize,
    /// Per-head width.
    pub d_att: usize,
    /// Shared key/value heads.
    pub n_kv: usize,
    /// FFN experts per layer.
    pub n_ffd: usize,
    pub d_ffd: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub train_mode: TrainMode,
    pub alpha_att: f64,
    pub alpha_ffd: f64,
    /// Experts per token in sparse-gradient training.
    pub topk_train: usize,
}

impl ModelConfig {
    /// Smallest configuration that exercises every code path.
    pub fn tiny() -> Self {
        ModelConfig {
            d_emb: 16,
            n_layer: 2,
            n_att: 2,
            n_head: 2,
            d_att: 8,
            n_kv: 1,
            n_ffd: 4,
            d_ffd: 16,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 128,
            train_mode: TrainMode::DenseGradient,
            alpha_att: 3.5e-4,
            alpha_ffd: 6.3e-4,
            topk_train: 2,
        }
    }

    /// Named preset or a JSON file path.
    pub fn load(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(ModelConfig::tiny()),
            path => ModelConfig::from_file(path),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.train_mode = mode;
        if mode == TrainMode::SingleExpert {
            self.n_att = 1;
            self.n_ffd = 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("d_emb", self.d_emb),
            ("n_layer", self.n_layer),
            ("n_att", self.n_att),
            ("n_head", self.n_head),
            ("d_att", self.d_att),
            ("n_kv", self.n_kv),
            ("n_ffd", self.n_ffd),
            ("d_ffd", self.d_ffd),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("topk_train", self.topk_train),
        ];
        for (name, v) in positive {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_kv > self.n_head {
            problems.push(format!("n_kv ({}) exceeds n_head ({})", self.n_kv, self.n_head));
        }
        for (name, a) in [("alpha_att", self.alpha_att), ("alpha_ffd", self.alpha_ffd)] {
            if !(a.is_finite() && a >= 0.0) {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        match self.train_mode {
            TrainMode::SingleExpert if self.n_att != 1 || self.n_ffd != 1 => {
                problems.push("single-expert mode requires n_att = n_ffd = 1".into())
            }
            TrainMode::SparseGradient if self.topk_train > self.n_ffd => problems.push(format!(
                "topk_train ({}) exceeds n_ffd ({})",
                self.topk_train, self.n_ffd
            )),
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}
