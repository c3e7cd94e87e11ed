//! Training configuration: a `key = value` text file plus overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::PosSet;
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub heads: usize,
    /// FFN hidden width; `None` means `2d`.
    pub ffn_hidden: Option<usize>,
    pub k: usize,
    pub joint_layers: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub beta_plus: f64,
    pub beta_minus: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub seed: Option<u64>,
    pub pos: PosSet,
    /// Patch side used when the dataset carries no generator description.
    pub patch: usize,
    pub word_vectors: Option<PathBuf>,
    pub subset_size: usize,
    /// Seed of the frozen encoder that defines visually similar subsets.
    pub subset_seed: u64,
    pub recall_ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    /// Evaluate on the validation split every this many epochs (0: last only).
    pub eval_every: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            ffn_hidden: None,
            k: 3,
            joint_layers: 2,
            alpha: 200.0,
            gamma: 2.65926,
            beta_plus: 1.0,
            beta_minus: 4.0,
            lr: 5e-4,
            lr_decay: 0.5,
            lr_decay_every: 10,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 50,
            freeze_epochs: 8,
            seed: None,
            pos: PosSet::all(),
            patch: 8,
            word_vectors: None,
            subset_size: 6,
            subset_seed: 0,
            recall_ks: vec![1, 5, 10, 50],
            subset_ks: vec![1, 2, 3],
            eval_every: 1,
            variant: Variant::full(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, HarnessError> {
    let mut v = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

impl TrainConfig {
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.d)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let (key, value) = (key.trim(), value.trim());
        let v = &mut self.variant;
        match key {
            "d" => self.d = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = Some(parse(key, value)?),
            "k" | "K" => self.k = parse(key, value)?,
            "joint_layers" => self.joint_layers = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "beta_plus" => self.beta_plus = parse(key, value)?,
            "beta_minus" => self.beta_minus = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "freeze_epochs" => self.freeze_epochs = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "pos" => {
                self.pos = value
                    .parse()
                    .map_err(|e: crate::data::DataError| HarnessError::Config(format!("pos: {e}")))?
            }
            "patch" => self.patch = parse(key, value)?,
            "word_vectors" => self.word_vectors = (!value.is_empty()).then(|| PathBuf::from(value)),
            "subset_size" => self.subset_size = parse(key, value)?,
            "subset_seed" => self.subset_seed = parse(key, value)?,
            "recall_ks" => self.recall_ks = parse_list(key, value)?,
            "subset_ks" => self.subset_ks = parse_list(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "reference_only" => v.reference_only = parse_bool(key, value)?,
            "target_only" => v.target_only = parse_bool(key, value)?,
            "cross_entropy_loss" => v.cross_entropy_loss = parse_bool(key, value)?,
            "remove_fusion" => v.remove_fusion = parse_bool(key, value)?,
            "plain_layer_norm" => v.plain_layer_norm = parse_bool(key, value)?,
            "remove_concept_module" => v.remove_concept_module = parse_bool(key, value)?,
            "context_score_on" => v.context_score_on = parse_bool(key, value)?,
            "share_block_weights" => v.share_block_weights = parse_bool(key, value)?,
            other => return Err(HarnessError::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), HarnessError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let v = &self.variant;
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("d = {}", self.d),
            format!("heads = {}", self.heads),
            format!("ffn_hidden = {}", self.ffn_hidden()),
            format!("k = {}", self.k),
            format!("joint_layers = {}", self.joint_layers),
            format!("alpha = {}", self.alpha),
            format!("gamma = {}", self.gamma),
            format!("beta_plus = {}", self.beta_plus),
            format!("beta_minus = {}", self.beta_minus),
            format!("lr = {}", self.lr),
            format!("lr_decay = {}", self.lr_decay),
            format!("lr_decay_every = {}", self.lr_decay_every),
            format!("weight_decay = {}", self.weight_decay),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("freeze_epochs = {}", self.freeze_epochs),
            format!("pos = {}", self.pos),
            format!("patch = {}", self.patch),
            format!("subset_size = {}", self.subset_size),
            format!("subset_seed = {}", self.subset_seed),
            format!("recall_ks = {}", list(&self.recall_ks)),
            format!("subset_ks = {}", list(&self.subset_ks)),
            format!("eval_every = {}", self.eval_every),
            format!("reference_only = {}", v.reference_only),
            format!("target_only = {}", v.target_only),
            format!("cross_entropy_loss = {}", v.cross_entropy_loss),
            format!("remove_fusion = {}", v.remove_fusion),
            format!("plain_layer_norm = {}", v.plain_layer_norm),
            format!("remove_concept_module = {}", v.remove_concept_module),
            format!("context_score_on = {}", v.context_score_on),
            format!("share_block_weights = {}", v.share_block_weights),
        ];
        if let Some(s) = self.seed {
            lines.push(format!("seed = {s}"));
        }
        if let Some(p) = &self.word_vectors {
            lines.push(format!("word_vectors = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.batch_size < 2 {
            return err(format!("batch_size must be at least 2 (got {})", self.batch_size));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return err(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if self.joint_layers == 0 {
            return err("joint_layers must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return err(format!("lr must be positive (got {})", self.lr));
        }
        if !(self.gamma > 0.0) {
            return err(format!("gamma must be positive (got {})", self.gamma));
        }
        if self.alpha < 0.0 || self.beta_plus < 0.0 || self.beta_minus < 0.0 {
            return err("alpha, beta_plus and beta_minus must be non-negative".into());
        }
        if self.subset_size == 0 {
            return err("subset_size must be at least 1".into());
        }
        if self.recall_ks.contains(&0) || self.subset_ks.contains(&0) {
            return err("recall cutoffs must be positive".into());
        }
        self.variant.validate().map_err(HarnessError::Config)
    }

    /// Model hyperparameters for images of `tokens` patches of `patch²·channels` values.
    pub fn model_config(&self, patch: usize, channels: usize, tokens: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden(),
            k: self.k,
            joint_layers: self.joint_layers,
            alpha: self.alpha,
            gamma: self.gamma,
            beta_plus: self.beta_plus,
            beta_minus: self.beta_minus,
            patch,
            channels,
            tokens,
            word_dim: self.d,
            variant: self.variant.clone(),
        }
    }
}
