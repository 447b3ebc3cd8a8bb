//! Training configuration, accepted as JSON with these exact field names.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::TokenizerConfig;
use crate::losses::{CbbNormalizer, Reduction};
use crate::miner::MinerConfig;
use crate::optim::{linear_warmup, warmup_steps, AdamWConfig};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub lowercase: bool,
    pub d_model: usize,
    /// Output dimension D.
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32768,
            lowercase: true,
            d_model: 64,
            dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            vocab_size: self.vocab_size,
            lowercase: self.lowercase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub pretrain_batch: usize,
    pub retrieval_batch: usize,
    pub sts_batch: usize,
    #[serde(alias = "τ")]
    pub tau: f64,
    #[serde(alias = "β")]
    pub beta: f64,
    /// Simulated workers N.
    pub n_workers: usize,
    /// Negatives per query held by each worker.
    pub n_neg: usize,
    pub miner: MinerConfig,
    pub mrl_dims: Vec<usize>,
    /// Per-dimension loss weights; uniform when absent.
    pub mrl_weights: Option<Vec<f64>>,
    pub total_steps: u64,
    pub seed: u64,
    pub normalizer: CbbNormalizer,
    pub pretrain_reduction: Reduction,
    /// When false the installed negatives never change.
    pub dynamic_mining: bool,
    /// Examples whose positive and negative cosines are logged every step.
    pub monitor_examples: usize,
    /// Probability that the sequential baseline picks the STS task.
    pub sts_task_prob: f64,
    pub adam: AdamWConfig,
    pub model: ModelConfig,
    /// Write per-worker partial denominators every step.
    pub trace_shards: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            warmup_ratio: 0.05,
            weight_decay: 0.001,
            pretrain_batch: 8,
            retrieval_batch: 4,
            sts_batch: 32,
            tau: 0.05,
            beta: 0.8,
            n_workers: 4,
            n_neg: 4,
            miner: MinerConfig::default(),
            mrl_dims: vec![16, 32, 64, 128],
            mrl_weights: None,
            total_steps: 2000,
            seed: 0,
            normalizer: CbbNormalizer::Queries,
            pretrain_reduction: Reduction::Mean,
            dynamic_mining: true,
            monitor_examples: 32,
            sts_task_prob: 0.5,
            adam: AdamWConfig::default(),
            model: ModelConfig::default(),
            trace_shards: false,
        }
    }
}

impl TrainConfig {
    /// Large-model settings for reference; too big for desk-scale runs.
    pub fn large_preset() -> Self {
        Self {
            mrl_dims: vec![256, 512, 768, 1024, 1536, 1792],
            model: ModelConfig {
                d_model: 1024,
                dim: 1792,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Width of the mining window: every negative of one query across workers.
    pub fn negatives_per_query(&self) -> usize {
        self.n_workers * self.n_neg
    }

    pub fn warmup_steps(&self) -> u64 {
        warmup_steps(self.warmup_ratio, self.total_steps)
    }

    pub fn warmup_lr(&self, step: u64) -> f64 {
        linear_warmup(step, self.lr, self.warmup_steps())
    }

    /// Normalized MRL weights, one per dim.
    pub fn resolved_mrl_weights(&self) -> Vec<f64> {
        match &self.mrl_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.mrl_dims.len() as f64; self.mrl_dims.len()],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [("lr", self.lr), ("tau", self.tau)];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta", "must be non-negative"));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(invalid("warmup_ratio", format!("must lie in (0, 1), got {}", self.warmup_ratio)));
        }
        let counts = [
            ("pretrain_batch", self.pretrain_batch),
            ("retrieval_batch", self.retrieval_batch),
            ("sts_batch", self.sts_batch),
            ("n_workers", self.n_workers),
            ("n_neg", self.n_neg),
            ("monitor_examples", self.monitor_examples),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.pretrain_batch < 2 {
            return Err(invalid("pretrain_batch", "in-batch negatives need at least 2"));
        }
        if self.sts_batch < 2 {
            return Err(invalid("sts_batch", "CoSENT needs at least 2 pairs"));
        }
        if !(0.0..=1.0).contains(&self.sts_task_prob) {
            return Err(invalid("sts_task_prob", "must lie in [0, 1]"));
        }
        self.miner.validate().map_err(|e| invalid("miner", e.to_string()))?;
        let m = &self.model;
        if m.vocab_size < 2 || m.d_model == 0 || m.dim == 0 {
            return Err(invalid("model", "vocab_size >= 2, d_model >= 1 and dim >= 1 required"));
        }
        if self.mrl_dims.is_empty() {
            return Err(invalid("mrl_dims", "must not be empty"));
        }
        if self.mrl_dims[0] == 0 || self.mrl_dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("mrl_dims", "must be positive and strictly ascending"));
        }
        if *self.mrl_dims.last().expect("non-empty") != m.dim {
            return Err(invalid("mrl_dims", format!("must end at the output dim {}", m.dim)));
        }
        if let Some(w) = &self.mrl_weights {
            if w.len() != self.mrl_dims.len() {
                return Err(invalid("mrl_weights", "needs one weight per dim"));
            }
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || !(w.iter().sum::<f64>() > 0.0) {
                return Err(invalid("mrl_weights", "must be non-negative with a positive sum"));
            }
        }
        Ok(())
    }
}
