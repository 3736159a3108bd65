//! Pseudo-labeling, WER filtering, the distillation objective, training, and the sweep and
//! scaling harnesses.

mod config;
pub mod eval;
pub mod experiments;
pub mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::metrics::wer;
use crate::model::{ModelError, SeqModel, TokenDistributions};
use crate::textnorm::{normalize, NormalizationMode};

pub use config::{DistillConfig, Scheduler};
pub use eval::{evaluate, EvalSet};
pub use experiments::{data_scaling, scaling_tsv, sweep_tsv, threshold_sweep, ScalingRow, SweepRow};
pub use train::{kl_to_teacher, train_distill, train_teacher, DistillInputs, TeacherConfig, TeacherOutcome, TrainingLog};

/// Scoring mode for pseudo-label filtering.
pub const FILTER_MODE: NormalizationMode = NormalizationMode::NormalizedNoDiacritics;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("requested {requested} segments but only {available} are available")]
    SizeExceedsCorpus { requested: usize, available: usize },
    #[error("no frames for utterance {0:?}")]
    MissingUtterance(String),
    #[error("teacher did not reach dev WER {target:.2} (best {best:.2})")]
    BudgetExhausted { target: f64, best: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Config(#[from] crate::kv::KvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSegment {
    pub id: String,
    pub reference: String,
    /// The teacher's greedy transcript; empty when labeling failed.
    pub hypothesis: String,
    /// WER of the hypothesis against the reference in percent; `None` when labeling failed.
    pub wer: Option<f64>,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

fn label_one(teacher: &SeqModel, u: &Utterance) -> PseudoLabeledSegment {
    let failed = |diagnostic: String| PseudoLabeledSegment {
        id: u.id.clone(),
        reference: u.reference.clone(),
        hypothesis: String::new(),
        wer: None,
        kept: false,
        diagnostic: Some(diagnostic),
    };
    if normalize(&u.reference, FILTER_MODE).is_empty() {
        return failed("reference normalizes to empty".into());
    }
    let hypothesis = match teacher.transcribe(&u.frames) {
        Ok(h) => h,
        Err(e) => return failed(e.to_string()),
    };
    match wer(&u.reference, &hypothesis, FILTER_MODE) {
        Ok(w) => PseudoLabeledSegment {
            id: u.id.clone(),
            reference: u.reference.clone(),
            hypothesis,
            wer: Some(w),
            kept: true,
            diagnostic: None,
        },
        Err(e) => failed(e.to_string()),
    }
}

/// Greedy teacher transcripts for every utterance, in input order. Failures are kept as records
/// with `kept = false` and a diagnostic.
pub fn pseudo_label(teacher: &SeqModel, data: &[Utterance]) -> Vec<PseudoLabeledSegment> {
    data.par_iter().map(|u| label_one(teacher, u)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    /// All input segments, `kept` recomputed for the threshold.
    pub segments: Vec<PseudoLabeledSegment>,
    pub retained_fraction: f64,
}

impl Filtered {
    pub fn retained(&self) -> impl Iterator<Item = &PseudoLabeledSegment> {
        self.segments.iter().filter(|s| s.kept)
    }

    pub fn retained_count(&self) -> usize {
        self.retained().count()
    }
}

/// Keeps segments with `wer <= lambda` (all labeled segments when `lambda` is `None`). Failed
/// segments are never kept but count towards the fraction's denominator.
pub fn filter_by_wer(segments: &[PseudoLabeledSegment], lambda: Option<f64>) -> Filtered {
    let segments: Vec<PseudoLabeledSegment> = segments
        .iter()
        .map(|s| {
            let kept = match (s.wer, lambda) {
                (None, _) => false,
                (Some(_), None) => true,
                (Some(w), Some(l)) => w <= l,
            };
            PseudoLabeledSegment { kept, ..s.clone() }
        })
        .collect();
    let kept = segments.iter().filter(|s| s.kept).count();
    let retained_fraction = if segments.is_empty() { 1.0 } else { kept as f64 / segments.len() as f64 };
    Filtered { segments, retained_fraction }
}

pub fn parse_lambda(s: &str) -> Result<Option<f64>, String> {
    match s.trim() {
        "none" => Ok(None),
        t => match t.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Some(v)),
            _ => Err(format!("threshold must be a positive number or `none`, got {t:?}")),
        },
    }
}

pub fn format_lambda(l: Option<f64>) -> String {
    l.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn check_pair(a: &TokenDistributions, b_len: usize, what: &str) -> Result<(), DistillError> {
    if a.len() != b_len {
        return Err(DistillError::LengthMismatch(format!("{what}: {} positions vs {b_len}", a.len())));
    }
    Ok(())
}

/// `sum_i KL(teacher_i || student_i)` per sequence, averaged over sequences. Natural log.
pub fn kl_loss(teacher: &[TokenDistributions], student: &[TokenDistributions]) -> Result<f64, DistillError> {
    if teacher.len() != student.len() {
        return Err(DistillError::LengthMismatch(format!("{} vs {} sequences", teacher.len(), student.len())));
    }
    if teacher.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (q, p) in teacher.iter().zip(student) {
        check_pair(q, p.len(), "sequence")?;
        if q.vocab_size() != p.vocab_size() {
            return Err(DistillError::LengthMismatch(format!("vocab {} vs {}", q.vocab_size(), p.vocab_size())));
        }
        for i in 0..q.len() {
            for (&qv, &pv) in q.position(i).iter().zip(p.position(i)) {
                if qv > 0.0 {
                    total += qv * (qv.ln() - pv.ln());
                }
            }
        }
    }
    Ok(total / teacher.len() as f64)
}

/// `-sum_i ln P(y_i)` per sequence, averaged over sequences.
pub fn pl_loss(student: &[TokenDistributions], targets: &[Vec<u32>]) -> Result<f64, DistillError> {
    if student.len() != targets.len() {
        return Err(DistillError::LengthMismatch(format!("{} vs {} sequences", student.len(), targets.len())));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, ys) in student.iter().zip(targets) {
        check_pair(p, ys.len(), "targets")?;
        for (i, &y) in ys.iter().enumerate() {
            let row = p.position(i);
            let py = *row.get(y as usize).ok_or(DistillError::TokenOutOfRange { token: y, vocab: row.len() })?;
            total -= py.ln();
        }
    }
    Ok(total / student.len() as f64)
}

pub fn kd_loss(kl: f64, pl: f64, alpha_kl: f64, alpha_pl: f64) -> f64 {
    alpha_kl * kl + alpha_pl * pl
}
