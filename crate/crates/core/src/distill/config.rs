use serde::{Deserialize, Serialize};

use super::{format_lambda, parse_lambda, DistillError, TeacherConfig};
use crate::kv::{KvError, KvMap};
use crate::model::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Linear warmup from 0, then constant.
    ConstantWithWarmup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Maximum pseudo-label WER kept for training; `None` keeps everything.
    pub lambda_threshold: Option<f64>,
    pub alpha_kl: f64,
    pub alpha_pl: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub scheduler: Scheduler,
    pub batch_size: usize,
    /// Pseudo-labels with more tokens than this (EOS included) are skipped.
    pub max_label_length: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
    /// Compute teacher distributions once up front instead of once per batch.
    pub cache_teacher_distributions: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_threshold: Some(80.0),
            alpha_kl: 0.8,
            alpha_pl: 1.0,
            learning_rate: 1e-4,
            warmup_steps: 50,
            scheduler: Scheduler::ConstantWithWarmup,
            batch_size: 128,
            max_label_length: 225,
            epochs: 10,
            seed: 0,
            max_grad_norm: Some(1.0),
            cache_teacher_distributions: false,
        }
    }
}

const KEYS: &[&str] = &[
    "lambda_threshold",
    "alpha_kl",
    "alpha_pl",
    "learning_rate",
    "warmup_steps",
    "scheduler",
    "batch_size",
    "max_label_length",
    "epochs",
    "seed",
    "max_grad_norm",
    "cache_teacher_distributions",
];

fn bad(key: &str, value: &str, message: String) -> KvError {
    KvError::BadValue { key: key.into(), value: value.into(), message }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let err = |m: &str| Err(DistillError::InvalidConfig(m.into()));
        if !(self.alpha_kl >= 0.0 && self.alpha_pl >= 0.0 && self.alpha_kl.is_finite() && self.alpha_pl.is_finite()) {
            return err("alpha_kl and alpha_pl must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if let Some(l) = self.lambda_threshold {
            if !(l > 0.0 && l.is_finite()) {
                return err("lambda_threshold must be > 0 when present");
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if self.max_label_length == 0 {
            return err("max_label_length must be at least 1");
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return err("max_grad_norm must be positive when present");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            warmup_steps: self.warmup_steps,
            max_grad_norm: self.max_grad_norm,
            decay_to_zero_at: None,
            ..AdamConfig::default()
        }
    }

    /// Overrides fields from a flat config; unknown keys are rejected.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<(), KvError> {
        kv.check_keys(KEYS, &[])?;
        if let Some(v) = kv.get("lambda_threshold") {
            self.lambda_threshold = parse_lambda(v).map_err(|m| bad("lambda_threshold", v, m))?;
        }
        kv.read("alpha_kl", &mut self.alpha_kl)?;
        kv.read("alpha_pl", &mut self.alpha_pl)?;
        kv.read("learning_rate", &mut self.learning_rate)?;
        kv.read("warmup_steps", &mut self.warmup_steps)?;
        if let Some(v) = kv.get("scheduler") {
            if v != "constant_with_warmup" {
                return Err(bad("scheduler", v, "only constant_with_warmup is supported".into()));
            }
        }
        kv.read("batch_size", &mut self.batch_size)?;
        kv.read("max_label_length", &mut self.max_label_length)?;
        kv.read("epochs", &mut self.epochs)?;
        kv.read("seed", &mut self.seed)?;
        read_clip(kv, &mut self.max_grad_norm)?;
        kv.read("cache_teacher_distributions", &mut self.cache_teacher_distributions)?;
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("lambda_threshold", format_lambda(self.lambda_threshold));
        kv.set("alpha_kl", self.alpha_kl);
        kv.set("alpha_pl", self.alpha_pl);
        kv.set("learning_rate", self.learning_rate);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("scheduler", "constant_with_warmup");
        kv.set("batch_size", self.batch_size);
        kv.set("max_label_length", self.max_label_length);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("max_grad_norm", self.max_grad_norm.map_or_else(|| "none".into(), |g| g.to_string()));
        kv.set("cache_teacher_distributions", self.cache_teacher_distributions);
        kv
    }
}

const TEACHER_KEYS: &[&str] = &[
    "learning_rate",
    "warmup_steps",
    "batch_size",
    "max_epochs",
    "target_dev_wer",
    "stop_at_target",
    "max_grad_norm",
    "linear_decay",
    "layer_drop",
    "seed",
];

fn read_clip(kv: &KvMap, slot: &mut Option<f64>) -> Result<(), KvError> {
    if let Some(v) = kv.get("max_grad_norm") {
        *slot = match v {
            "none" => None,
            _ => Some(v.parse().map_err(|e: std::num::ParseFloatError| bad("max_grad_norm", v, e.to_string()))?),
        };
    }
    Ok(())
}

impl TeacherConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        kv.check_keys(TEACHER_KEYS, &[])?;
        let mut c = Self::default();
        kv.read("learning_rate", &mut c.learning_rate)?;
        kv.read("warmup_steps", &mut c.warmup_steps)?;
        kv.read("batch_size", &mut c.batch_size)?;
        kv.read("max_epochs", &mut c.max_epochs)?;
        kv.read("target_dev_wer", &mut c.target_dev_wer)?;
        kv.read("stop_at_target", &mut c.stop_at_target)?;
        read_clip(kv, &mut c.max_grad_norm)?;
        kv.read("linear_decay", &mut c.linear_decay)?;
        kv.read("layer_drop", &mut c.layer_drop)?;
        kv.read("seed", &mut c.seed)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("learning_rate", self.learning_rate);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("target_dev_wer", self.target_dev_wer);
        kv.set("stop_at_target", self.stop_at_target);
        kv.set("max_grad_norm", self.max_grad_norm.map_or_else(|| "none".into(), |g| g.to_string()));
        kv.set("linear_decay", self.linear_decay);
        kv.set("layer_drop", self.layer_drop);
        kv.set("seed", self.seed);
        kv
    }
}
