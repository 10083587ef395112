//! Model, objective and training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A chaining checkpoint: the CLS state at `layer`, truncated to `dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub layer: usize,
    pub dim: usize,
}

impl Checkpoint {
    pub const fn new(layer: usize, dim: usize) -> Self {
        Checkpoint { layer, dim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// 0 means "take it from the vocabulary" when training from a corpus.
    #[serde(default)]
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Strictly increasing prefix widths, ending at `hidden_dim`.
    pub nested_dims: Vec<usize>,
    /// Layers (1-based) where intra-relational alignment is applied.
    pub sia_layers: Vec<usize>,
    pub checkpoints: Vec<Checkpoint>,
    /// One ratio per prefix below the full width.
    pub gamma_schedule: Vec<f64>,
    pub k_min: usize,
    pub tau_att: f64,
    pub tau_nce: f64,
    pub tau_sim: f64,
    pub alpha: f64,
    /// Maximum tokens per sentence including CLS.
    pub max_len: usize,
    pub seed: u64,
    /// Optional per-prefix weights for the nested task loss; ones when absent.
    #[serde(default)]
    pub mrl_weights: Option<Vec<f64>>,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 0,
            hidden_dim: 32,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 64,
            dropout: 0.1,
            nested_dims: vec![4, 8, 16, 32],
            sia_layers: vec![1, 2, 3, 4],
            checkpoints: vec![
                Checkpoint::new(1, 4),
                Checkpoint::new(2, 8),
                Checkpoint::new(3, 16),
                Checkpoint::new(4, 32),
            ],
            gamma_schedule: vec![0.3, 0.5, 0.7],
            k_min: 4,
            tau_att: 1.0,
            tau_nce: 0.05,
            tau_sim: 0.05,
            alpha: 0.4,
            max_len: 16,
            seed: 0,
            mrl_weights: None,
        }
    }

    /// Small configuration for exhaustive gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 12,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            dropout: 0.1,
            nested_dims: vec![2, 4, 8],
            sia_layers: vec![1, 2],
            checkpoints: vec![Checkpoint::new(1, 2), Checkpoint::new(2, 8)],
            gamma_schedule: vec![0.4, 0.7],
            k_min: 2,
            tau_att: 1.0,
            tau_nce: 0.05,
            tau_sim: 0.05,
            alpha: 0.4,
            max_len: 7,
            seed: 0,
            mrl_weights: None,
        }
    }

    pub fn full_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Prefix widths strictly below the full width.
    pub fn prefix_dims(&self) -> &[usize] {
        &self.nested_dims[..self.nested_dims.len().saturating_sub(1)]
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return fail("hidden_dim and num_layers must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return fail("max_len must leave room for CLS and one token".into());
        }
        let dims = &self.nested_dims;
        if dims.is_empty() || dims[0] == 0 || dims.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "nested_dims {dims:?} must be strictly increasing and positive"
            ));
        }
        if *dims.last().unwrap() != self.hidden_dim {
            return fail(format!(
                "nested_dims must end at hidden_dim {}, got {dims:?}",
                self.hidden_dim
            ));
        }
        let layers = &self.sia_layers;
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("sia_layers {layers:?} must be strictly increasing"));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > self.num_layers) {
            return fail(format!(
                "sia layer {bad} outside 1..={}",
                self.num_layers
            ));
        }
        let cps = &self.checkpoints;
        if cps.len() < 2 {
            return fail(format!(
                "need at least two chaining checkpoints, got {}",
                cps.len()
            ));
        }
        if cps
            .windows(2)
            .any(|w| w[0].layer >= w[1].layer || w[0].dim >= w[1].dim)
        {
            return fail(format!(
                "checkpoints {cps:?} must be strictly increasing in layer and dim"
            ));
        }
        for cp in cps {
            if cp.layer == 0 || cp.layer > self.num_layers {
                return fail(format!("checkpoint layer {} outside 1..={}", cp.layer, self.num_layers));
            }
            if !dims.contains(&cp.dim) {
                return fail(format!("checkpoint dim {} not in nested_dims", cp.dim));
            }
        }
        let gamma = &self.gamma_schedule;
        if gamma.len() != dims.len() - 1 {
            return fail(format!(
                "gamma_schedule needs {} entries (one per prefix), got {}",
                dims.len() - 1,
                gamma.len()
            ));
        }
        if gamma.iter().any(|&g| !(g > 0.0 && g <= 1.0)) || gamma.windows(2).any(|w| w[0] > w[1]) {
            return fail(format!(
                "gamma_schedule {gamma:?} must be non-decreasing within (0, 1]"
            ));
        }
        if self.k_min == 0 {
            return fail("k_min must be at least 1".into());
        }
        for (name, t) in [
            ("tau_att", self.tau_att),
            ("tau_nce", self.tau_nce),
            ("tau_sim", self.tau_sim),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("{name} must be a positive finite temperature, got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if let Some(w) = &self.mrl_weights {
            if w.len() != dims.len() || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return fail(format!(
                    "mrl_weights needs {} non-negative entries, got {w:?}",
                    dims.len()
                ));
            }
        }
        Ok(())
    }

    /// Field-level differences against `other`, as `field: ours != theirs`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return vec![];
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, v)| {
                format!(
                    "{k}: {v} != {}",
                    b.get(k).cloned().unwrap_or(serde_json::Value::Null)
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Which auxiliary terms are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_sia: bool,
    pub no_pic: bool,
    pub mrl_only: bool,
}

impl Ablation {
    pub fn sia_enabled(&self) -> bool {
        !(self.no_sia || self.mrl_only)
    }

    pub fn pic_enabled(&self) -> bool {
        !(self.no_pic || self.mrl_only)
    }

    /// Short label used in reports.
    pub fn label(&self) -> &'static str {
        match (self.sia_enabled(), self.pic_enabled()) {
            _ if self.mrl_only => "MRL-only",
            (true, true) => "MIPIC",
            (false, true) => "w/o SIA",
            (true, false) => "w/o PIC",
            (false, false) => "w/o SIA+PIC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    #[serde(default)]
    pub no_sia: bool,
    #[serde(default)]
    pub no_pic: bool,
    #[serde(default)]
    pub mrl_only: bool,
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Include AdamW moments in checkpoint files.
    #[serde(default)]
    pub save_optimizer_state: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: training from scratch needs a far larger step
    /// size than fine-tuning a pretrained backbone.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            betas: [0.9, 0.999],
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 16,
            schedule: Schedule::Cosine,
            seed: 0,
            no_sia: false,
            no_pic: false,
            mrl_only: false,
            corpus: None,
            checkpoint_every: 0,
            max_steps: None,
            save_optimizer_state: false,
        }
    }

    /// Fine-tuning setting used with pretrained backbones.
    pub fn fine_tune() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            epochs: 5,
            ..Self::desk()
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_sia: self.no_sia,
            no_pic: self.no_pic,
            mrl_only: self.mrl_only,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// On-disk run configuration: `{"model": {...}, "train": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
