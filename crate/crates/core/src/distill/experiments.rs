//! Threshold sweep and data-scaling harnesses.

use std::fmt::Write as _;

use super::eval::{evaluate, EvalSet};
use super::train::{train_distill, DistillInputs, TrainingLog};
use super::{filter_by_wer, format_lambda, DistillConfig, DistillError, PseudoLabeledSegment, FILTER_MODE};
use crate::data::shuffled_indices;
use crate::metrics::EvalReport;
use crate::model::SeqModel;
use crate::rng::{derive_seed, label};

/// One distillation run of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: Option<f64>,
    pub retained_fraction: f64,
    pub report: EvalReport,
    pub log: TrainingLog,
}

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub size: usize,
    pub report: EvalReport,
    pub log: TrainingLog,
}

/// Distills one student per threshold from the same pseudo-labels and evaluates each.
pub fn threshold_sweep(
    inputs: DistillInputs<'_>,
    student_init: &SeqModel,
    lambdas: &[Option<f64>],
    cfg: &DistillConfig,
    eval_sets: &[EvalSet<'_>],
) -> Result<Vec<SweepRow>, DistillError> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let filtered = filter_by_wer(inputs.segments, lambda);
        let run_cfg = DistillConfig { lambda_threshold: lambda, ..cfg.clone() };
        let run_inputs = DistillInputs { segments: &filtered.segments, ..inputs };
        let (student, log) = train_distill(run_inputs, student_init.clone(), &run_cfg)?;
        let (report, _) = evaluate(&student, eval_sets)?;
        rows.push(SweepRow { lambda, retained_fraction: filtered.retained_fraction, report, log });
    }
    Ok(rows)
}

/// Distills on nested seeded subsamples of the segments kept at `cfg.lambda_threshold`.
pub fn data_scaling(
    inputs: DistillInputs<'_>,
    student_init: &SeqModel,
    sizes: &[usize],
    cfg: &DistillConfig,
    eval_sets: &[EvalSet<'_>],
) -> Result<Vec<ScalingRow>, DistillError> {
    let kept: Vec<PseudoLabeledSegment> = filter_by_wer(inputs.segments, cfg.lambda_threshold).retained().cloned().collect();
    if let Some(&too_big) = sizes.iter().find(|&&s| s > kept.len()) {
        return Err(DistillError::SizeExceedsCorpus { requested: too_big, available: kept.len() });
    }
    let order = shuffled_indices(kept.len(), derive_seed(cfg.seed, &[label("scaling")]));
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut idx = order[..size].to_vec();
        idx.sort_unstable();
        let subset: Vec<PseudoLabeledSegment> = idx.iter().map(|&i| kept[i].clone()).collect();
        let run_inputs = DistillInputs { segments: &subset, ..inputs };
        let (student, log) = train_distill(run_inputs, student_init.clone(), cfg)?;
        let (report, _) = evaluate(&student, eval_sets)?;
        rows.push(ScalingRow { size, report, log });
    }
    Ok(rows)
}

fn score_rows(out: &mut String, prefix: &str, report: &EvalReport) {
    for d in report.per_dataset.values() {
        if let Some(s) = d.scores.get(&FILTER_MODE) {
            writeln!(out, "{prefix}\t{}\t{:.2}\t{:.2}", d.dataset, s.wer, s.cer).expect("write to string");
        }
    }
    if let Some(s) = report.overall_average.get(&FILTER_MODE) {
        writeln!(out, "{prefix}\tavg\t{:.2}\t{:.2}", s.wer, s.cer).expect("write to string");
    }
}

/// `lambda, retained_fraction, dataset, wer, cer`; one row per evaluation set plus `avg`.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda\tretained_fraction\tdataset\twer\tcer\n");
    for r in rows {
        score_rows(&mut out, &format!("{}\t{:.4}", format_lambda(r.lambda), r.retained_fraction), &r.report);
    }
    out
}

/// `size, dataset, wer, cer`.
pub fn scaling_tsv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("size\tdataset\twer\tcer\n");
    for r in rows {
        score_rows(&mut out, &r.size.to_string(), &r.report);
    }
    out
}
