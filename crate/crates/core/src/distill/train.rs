//! Training loops for supervised teachers and distilled students.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::corpus_wer;
use super::{DistillConfig, DistillError, PseudoLabeledSegment};
use crate::data::{shuffled_indices, Utterance};
use crate::model::optim::{Adam, AdamConfig};
use crate::model::student::{check_compatible, scatter_layers, with_layers};
use crate::model::{Example, LossDefinition, LossValue, Mat, ModelError, SeqModel};
use crate::rng::{derive_seed, label, stream};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub kl: f64,
    pub pl: f64,
    pub kd: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub dev_wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Share of pseudo-labeled segments that passed the filter (1.0 for supervised runs).
    pub retained_fraction: f64,
    pub train_examples: usize,
    /// Labels dropped for exceeding the maximum label length.
    pub skipped_long: usize,
    pub notes: Vec<String>,
}

impl TrainingLog {
    /// Loss sequence as JSONL, one record per step.
    pub fn steps_jsonl(&self) -> String {
        self.steps.iter().map(|s| serde_json::to_string(s).expect("serializable") + "\n").collect()
    }

    pub fn final_dev_wer(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.dev_wer)
    }
}

/// What the student learns from.
#[derive(Debug, Clone, Copy)]
pub struct DistillInputs<'a> {
    pub teacher: &'a SeqModel,
    /// Frames the teacher sees, by utterance id. Normally the student's training set.
    pub teacher_frames: &'a [Utterance],
    pub student_frames: &'a [Utterance],
    /// Pseudo-labels; only `kept` ones are trained on.
    pub segments: &'a [PseudoLabeledSegment],
    pub dev: &'a [Utterance],
}

/// Hyperparameters for the supervised teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Dev WER the teacher must get below (see [`TeacherOutcome::check_target`]).
    pub target_dev_wer: f64,
    /// End training at the first epoch that meets the target.
    pub stop_at_target: bool,
    pub max_grad_norm: Option<f64>,
    /// Decay the learning rate linearly to zero over `max_epochs`.
    pub linear_decay: bool,
    /// Per-step probability of skipping each layer (LayerDrop); 0 trains the full stack.
    pub layer_drop: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            warmup_steps: 50,
            batch_size: 32,
            max_epochs: 30,
            target_dev_wer: 10.0,
            stop_at_target: true,
            max_grad_norm: Some(1.0),
            linear_decay: true,
            layer_drop: 0.0,
            seed: 0,
        }
    }
}

pub struct TeacherOutcome {
    /// The checkpoint with the lowest dev WER seen (the initial model if no epoch ran).
    pub model: SeqModel,
    pub log: TrainingLog,
    pub best_dev_wer: Option<f64>,
}

impl TeacherOutcome {
    pub fn check_target(&self, target: f64) -> Result<(), DistillError> {
        match self.best_dev_wer {
            Some(b) if b < target => Ok(()),
            b => Err(DistillError::BudgetExhausted { target, best: b.unwrap_or(f64::INFINITY) }),
        }
    }
}

/// Shared epoch loop. `batch_for` turns example indices into a ready batch.
struct Loop<'a> {
    adam: AdamConfig,
    loss: LossDefinition,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    dev: &'a [Utterance],
    stop_below: Option<f64>,
    layer_drop: f64,
}

impl Loop<'_> {
    fn run(
        &self,
        model: &mut SeqModel,
        n: usize,
        batch_for: &(dyn Fn(&[usize]) -> Result<Vec<Example>, DistillError> + Sync),
        log: &mut TrainingLog,
        best: &mut Option<(f64, SeqModel)>,
    ) -> Result<(), DistillError> {
        let mut opt = Adam::new(self.adam, &model.config);
        for epoch in 0..self.epochs {
            let order = shuffled_indices(n, derive_seed(self.seed, &[epoch as u64]));
            let mut steps = 0;
            for chunk in order.chunks(self.batch_size) {
                let step = opt.steps_taken();
                let batch = batch_for(chunk)?;
                let to_err = |e| match e {
                    ModelError::NonFiniteLoss => DistillError::NonFiniteLoss { step },
                    other => other.into(),
                };
                let (value, grads) = if self.layer_drop > 0.0 {
                    let mut rng = stream(self.seed, &[label("layer-drop"), step as u64]);
                    let enc = surviving_layers(model.config.encoder_layers, self.layer_drop, &mut rng);
                    let dec = surviving_layers(model.config.decoder_layers, self.layer_drop, &mut rng);
                    let sub = with_layers(model, &enc, &dec);
                    let (v, g) = sub.loss_gradients(&batch, self.loss).map_err(to_err)?;
                    (v, scatter_layers(&model.config, g, &enc, &dec))
                } else {
                    model.loss_gradients(&batch, self.loss).map_err(to_err)?
                };
                let lr = opt.config.lr_at(step);
                let grad_norm = opt.update(&mut model.weights, &grads);
                log.steps.push(step_log(step, epoch, lr, value, grad_norm));
                steps += 1;
            }
            let dev_wer = if self.dev.is_empty() { None } else { Some(corpus_wer(model, self.dev)?) };
            log.epochs.push(EpochLog { epoch, steps, dev_wer });
            if let Some(w) = dev_wer {
                if best.as_ref().is_none_or(|(b, _)| w < *b) {
                    *best = Some((w, model.clone()));
                }
                if self.stop_below.is_some_and(|t| w < t) {
                    log.notes.push(format!("reached dev WER {w:.2} after epoch {epoch}"));
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Layers kept for one step; each survives with probability `1 - p`, and at least one always does.
fn surviving_layers(n: usize, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let kept: Vec<usize> = (0..n).filter(|_| !rng.random_bool(p)).collect();
    if kept.is_empty() {
        vec![rng.random_range(0..n)]
    } else {
        kept
    }
}

fn step_log(step: usize, epoch: usize, lr: f64, v: LossValue, grad_norm: f64) -> StepLog {
    StepLog { step, epoch, lr, kl: v.kl, pl: v.pl, kd: v.total, grad_norm }
}

/// Supervised cross-entropy training on reference transcripts.
pub fn train_teacher(
    init: SeqModel,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TeacherConfig,
) -> Result<TeacherOutcome, DistillError> {
    if cfg.batch_size == 0 {
        return Err(DistillError::InvalidConfig("batch_size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.layer_drop) {
        return Err(DistillError::InvalidConfig("layer_drop must be in [0, 1)".into()));
    }
    let examples: Vec<Example> = train
        .iter()
        .map(|u| Example { frames: u.frames.clone(), tokens: init.vocab.encode(&u.reference), teacher_log_probs: None })
        .collect();
    let mut log = TrainingLog { retained_fraction: 1.0, train_examples: examples.len(), ..TrainingLog::default() };
    let mut model = init;
    let mut best = None;
    let total_steps = cfg.max_epochs * examples.len().div_ceil(cfg.batch_size);
    let looper = Loop {
        adam: AdamConfig {
            lr: cfg.learning_rate,
            warmup_steps: cfg.warmup_steps,
            max_grad_norm: cfg.max_grad_norm,
            decay_to_zero_at: cfg.linear_decay.then_some(total_steps),
            ..AdamConfig::default()
        },
        loss: LossDefinition::CrossEntropy,
        batch_size: cfg.batch_size,
        epochs: cfg.max_epochs,
        seed: cfg.seed,
        dev,
        stop_below: cfg.stop_at_target.then_some(cfg.target_dev_wer),
        layer_drop: cfg.layer_drop,
    };
    let batch_for = |idx: &[usize]| Ok(idx.iter().map(|&i| examples[i].clone()).collect());
    looper.run(&mut model, examples.len(), &batch_for, &mut log, &mut best)?;
    Ok(match best {
        Some((w, m)) => TeacherOutcome { model: m, log, best_dev_wer: Some(w) },
        None => TeacherOutcome { model, log, best_dev_wer: None },
    })
}

fn index(data: &[Utterance]) -> HashMap<&str, &Mat> {
    data.iter().map(|u| (u.id.as_str(), &u.frames)).collect()
}

/// Teacher log-probabilities under teacher forcing on `[BOS] + tokens`.
fn teacher_targets(teacher: &SeqModel, frames: &Mat, tokens: &[u32]) -> Result<Mat, ModelError> {
    let input: Vec<u32> = std::iter::once(crate::model::BOS).chain(tokens.iter().copied()).collect();
    teacher.log_probs(frames, &input)
}

/// Distills `student` from the teacher on the kept pseudo-labels.
///
/// Each epoch visits the kept segments in an order shuffled with `seed` and the epoch index. The
/// teacher is run with teacher forcing on the pseudo-label tokens to produce KL targets.
pub fn train_distill(
    inputs: DistillInputs<'_>,
    student: SeqModel,
    cfg: &DistillConfig,
) -> Result<(SeqModel, TrainingLog), DistillError> {
    cfg.validate()?;
    check_compatible(&inputs.teacher.config, &student.config)?;
    if inputs.teacher.vocab != student.vocab {
        return Err(ModelError::IncompatibleConfig("teacher and student vocabularies differ".into()).into());
    }
    let total = inputs.segments.len();
    let kept: Vec<&PseudoLabeledSegment> = inputs.segments.iter().filter(|s| s.kept).collect();
    let mut log = TrainingLog {
        retained_fraction: if total == 0 { 1.0 } else { kept.len() as f64 / total as f64 },
        ..TrainingLog::default()
    };
    let student_frames = index(inputs.student_frames);
    let teacher_frames = index(inputs.teacher_frames);
    let max_tokens = cfg.max_label_length.min(student.config.max_target_len);
    // (student frames, teacher frames, tokens)
    let mut items: Vec<(&Mat, &Mat, Vec<u32>)> = Vec::with_capacity(kept.len());
    for s in &kept {
        let sf = student_frames.get(s.id.as_str()).ok_or_else(|| DistillError::MissingUtterance(s.id.clone()))?;
        let tf = teacher_frames.get(s.id.as_str()).ok_or_else(|| DistillError::MissingUtterance(s.id.clone()))?;
        let tokens = student.vocab.encode(&s.hypothesis);
        if tokens.len() + 1 > max_tokens {
            log.skipped_long += 1;
            continue;
        }
        items.push((sf, tf, tokens));
    }
    log.train_examples = items.len();
    if items.is_empty() {
        log.notes.push("empty training set: student returned unchanged".into());
        return Ok((student, log));
    }

    let need_teacher = cfg.alpha_kl != 0.0;
    let cached: Option<Vec<Mat>> = if need_teacher && cfg.cache_teacher_distributions {
        Some(
            items
                .par_iter()
                .map(|(_, tf, tokens)| teacher_targets(inputs.teacher, tf, tokens))
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    let batch_for = |idx: &[usize]| -> Result<Vec<Example>, DistillError> {
        idx.par_iter()
            .map(|&i| {
                let (sf, tf, tokens) = &items[i];
                let teacher_log_probs = match (&cached, need_teacher) {
                    (Some(c), _) => Some(c[i].clone()),
                    (None, true) => Some(teacher_targets(inputs.teacher, tf, tokens)?),
                    (None, false) => None,
                };
                Ok(Example { frames: (*sf).clone(), tokens: tokens.clone(), teacher_log_probs })
            })
            .collect()
    };
    let looper = Loop {
        adam: cfg.adam(),
        loss: LossDefinition::Distill { alpha_kl: cfg.alpha_kl, alpha_pl: cfg.alpha_pl },
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
        dev: inputs.dev,
        stop_below: None,
        layer_drop: 0.0,
    };
    let mut model = student;
    let mut best = None;
    looper.run(&mut model, items.len(), &batch_for, &mut log, &mut best)?;
    Ok((model, log))
}

/// Batch-mean `KL(teacher || student)` over the pseudo-labels of `segments` (all of them, kept
/// or not, as long as labeling succeeded).
pub fn kl_to_teacher(
    teacher: &SeqModel,
    student: &SeqModel,
    data: &[Utterance],
    segments: &[PseudoLabeledSegment],
) -> Result<f64, DistillError> {
    let frames = index(data);
    let batch: Vec<Example> = segments
        .iter()
        .filter(|s| s.wer.is_some())
        .map(|s| {
            let f = frames.get(s.id.as_str()).ok_or_else(|| DistillError::MissingUtterance(s.id.clone()))?;
            let tokens = student.vocab.encode(&s.hypothesis);
            let t = teacher_targets(teacher, f, &tokens)?;
            Ok(Example { frames: (*f).clone(), tokens, teacher_log_probs: Some(t) })
        })
        .collect::<Result<_, DistillError>>()?;
    Ok(student.loss(&batch, LossDefinition::Distill { alpha_kl: 1.0, alpha_pl: 0.0 })?.kl)
}
