//! Model and training configuration.
//!
//! Every field is optional in JSON; missing fields take the full-size
//! defaults. Keys accept both descriptive names and the short symbol aliases
//! (`d_x`, `d_t`, `d_h`, `M`, `d_v`, `d_out`, `T`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(alias = "d_x")]
    pub word_dim: usize,
    #[serde(alias = "d_t")]
    pub pos_dim: usize,
    /// Convolution output channels; `None` means `word_dim + pos_dim`.
    #[serde(alias = "d_g")]
    pub conv_channels: Option<usize>,
    /// Per-direction GRU hidden size and graph-attention output size.
    #[serde(alias = "d_h")]
    pub hidden_dim: usize,
    #[serde(alias = "M")]
    pub heads: usize,
    pub conv_window: usize,
    pub max_subtree_len: usize,
    #[serde(alias = "d_v")]
    pub entity_dim: usize,
    /// Width of scene-context, message and message-attention vectors.
    #[serde(alias = "d_ctx")]
    pub context_dim: usize,
    #[serde(alias = "d_out")]
    pub output_dim: usize,
    /// Hidden width of the top-down attention and of the classifier MLP.
    pub fusion_dim: usize,
    #[serde(alias = "T")]
    pub steps: usize,
    pub min_entities: usize,
    pub max_entities: usize,

    pub lr_base: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train / val / test fractions applied to a dataset directory.
    pub split: [f64; 3],
    pub threads: usize,

    pub glove_path: Option<String>,
    /// Standard deviation of random word vectors when no GloVe file is given.
    pub word_init_std: f64,
    /// POS inventory; `None` uses the 42 Penn Treebank tags.
    pub pos_labels: Option<Vec<String>>,

    pub no_tree_conv: bool,
    pub no_message_passing: bool,
    pub no_fused_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 300,
            pos_dim: 128,
            conv_channels: None,
            hidden_dim: 1024,
            heads: 8,
            conv_window: 3,
            max_subtree_len: 4,
            entity_dim: 2048,
            context_dim: 1024,
            output_dim: 1024,
            fusion_dim: 1024,
            steps: 4,
            min_entities: 1,
            max_entities: 100,
            lr_base: 1e-3,
            lr_peak: 4e-3,
            warmup_epochs: 4,
            lr_decay: 0.5,
            plateau_patience: 2,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            threads: 1,
            glove_path: None,
            word_init_std: 0.4,
            pos_labels: None,
            no_tree_conv: false,
            no_message_passing: false,
            no_fused_attention: false,
        }
    }
}

impl ModelConfig {
    /// Small dimensions suitable for desk-scale synthetic experiments.
    pub fn desk() -> Self {
        ModelConfig {
            word_dim: 16,
            pos_dim: 8,
            conv_channels: Some(16),
            hidden_dim: 32,
            heads: 4,
            entity_dim: 32,
            context_dim: 32,
            output_dim: 32,
            fusion_dim: 32,
            batch_size: 8,
            ..ModelConfig::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + self.pos_dim
    }

    pub fn conv_dim(&self) -> usize {
        self.conv_channels.unwrap_or_else(|| self.input_dim())
    }

    /// Number of message-passing steps actually run.
    pub fn effective_steps(&self) -> usize {
        if self.no_message_passing {
            0
        } else {
            self.steps
        }
    }

    pub fn phrase_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("conv_channels", self.conv_dim()),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("conv_window", self.conv_window),
            ("entity_dim", self.entity_dim),
            ("context_dim", self.context_dim),
            ("output_dim", self.output_dim),
            ("fusion_dim", self.fusion_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.max_subtree_len < 2 {
            return Err(Error::Config("max_subtree_len must be at least 2".into()));
        }
        if self.min_entities == 0 || self.min_entities > self.max_entities {
            return Err(Error::Config("entity bounds must satisfy 1 ≤ min ≤ max".into()));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        let rates = [self.lr_base, self.lr_peak, self.lr_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) || self.lr_decay > 1.0 {
            return Err(Error::Config("learning rates must be positive and lr_decay in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Epoch-level learning-rate policy: linear warmup from `lr_base` to
/// `lr_peak`, then multiply by `lr_decay` whenever the validation score has
/// not improved for `plateau_patience` epochs.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    base: f64,
    peak: f64,
    warmup: usize,
    decay: f64,
    patience: usize,
    current_peak: f64,
    best: f64,
    stale: usize,
}

impl LrSchedule {
    pub fn new(cfg: &ModelConfig) -> Self {
        LrSchedule {
            base: cfg.lr_base,
            peak: cfg.lr_peak,
            warmup: cfg.warmup_epochs,
            decay: cfg.lr_decay,
            patience: cfg.plateau_patience,
            current_peak: cfg.lr_peak,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch + 1 < self.warmup {
            let frac = epoch as f64 / (self.warmup - 1) as f64;
            self.base + (self.peak - self.base) * frac
        } else {
            self.current_peak
        }
    }

    /// Feeds the score observed after `epoch`.
    pub fn observe(&mut self, epoch: usize, score: f64) {
        if score > self.best {
            self.best = score;
            self.stale = 0;
            return;
        }
        if epoch + 1 < self.warmup || self.patience == 0 {
            return;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.current_peak *= self.decay;
            self.stale = 0;
        }
    }
}
