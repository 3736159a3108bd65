//! Decoding evaluation sets and scoring them in every normalization mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DistillError, FILTER_MODE};
use crate::data::Utterance;
use crate::metrics::{aggregate, corpus_scores, DatasetGroup, EvalReport};
use crate::model::{ModelError, SeqModel};
use crate::textnorm::NormalizationMode;

#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub group: DatasetGroup,
    pub data: &'a [Utterance],
}

/// One decoded utterance, as written to score files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub dataset: String,
    pub id: String,
    pub dialect: Option<String>,
    pub reference: String,
    pub hypothesis: String,
}

/// Greedy transcripts in input order.
pub fn transcribe_all(model: &SeqModel, data: &[Utterance]) -> Result<Vec<String>, ModelError> {
    data.par_iter().map(|u| model.transcribe(&u.frames)).collect()
}

/// Corpus WER in the filtering mode.
pub fn corpus_wer(model: &SeqModel, data: &[Utterance]) -> Result<f64, DistillError> {
    let hyps = transcribe_all(model, data)?;
    let pairs = data.iter().zip(&hyps).map(|(u, h)| (u.reference.as_str(), h.as_str()));
    Ok(corpus_scores(pairs, FILTER_MODE)?.wer)
}

/// Decodes every set and scores it in all normalization modes.
pub fn evaluate(model: &SeqModel, sets: &[EvalSet<'_>]) -> Result<(EvalReport, Vec<ScoredUtterance>), DistillError> {
    let mut entries = Vec::new();
    let mut scored = Vec::new();
    for set in sets {
        let hyps = transcribe_all(model, set.data)?;
        for mode in NormalizationMode::ALL {
            let pairs = set.data.iter().zip(&hyps).map(|(u, h)| (u.reference.as_str(), h.as_str()));
            entries.push((set.name.to_string(), set.group, mode, corpus_scores(pairs, mode)?));
        }
        scored.extend(set.data.iter().zip(hyps).map(|(u, h)| ScoredUtterance {
            dataset: set.name.to_string(),
            id: u.id.clone(),
            dialect: u.dialect.clone(),
            reference: u.reference.clone(),
            hypothesis: h,
        }));
    }
    Ok((aggregate(entries)?, scored))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreInputError {
    #[error("{file} line {line}: {message}")]
    Json { file: &'static str, line: usize, message: String },
    #[error("{file}: duplicate id {id:?}")]
    DuplicateId { file: &'static str, id: String },
    #[error("no hypothesis for reference {0:?}")]
    MissingHypothesis(String),
    #[error("hypothesis {0:?} has no reference")]
    UnmatchedHypothesis(String),
}

/// Reference side of a score input; manifest lines also qualify (extra fields are ignored).
#[derive(Deserialize)]
struct RefRecord {
    id: String,
    reference: String,
    #[serde(default)]
    dataset: Option<String>,
    #[serde(default)]
    dialect: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HypRecord {
    id: String,
    hypothesis: String,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str, file: &'static str) -> Result<Vec<T>, ScoreInputError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ScoreInputError::Json { file, line: i + 1, message: e.to_string() }))
        .collect()
}

/// Joins reference and hypothesis JSONL by id. References without a `dataset` get `default_dataset`.
/// The result is sorted by dataset, then id.
pub fn pair_scores(refs: &str, hyps: &str, default_dataset: &str) -> Result<Vec<ScoredUtterance>, ScoreInputError> {
    let refs: Vec<RefRecord> = parse_lines(refs, "refs")?;
    let mut by_id = std::collections::BTreeMap::new();
    for h in parse_lines::<HypRecord>(hyps, "hyps")? {
        if by_id.insert(h.id.clone(), h.hypothesis).is_some() {
            return Err(ScoreInputError::DuplicateId { file: "hyps", id: h.id });
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        if !seen.insert(r.id.clone()) {
            return Err(ScoreInputError::DuplicateId { file: "refs", id: r.id });
        }
        let hypothesis = by_id.remove(&r.id).ok_or_else(|| ScoreInputError::MissingHypothesis(r.id.clone()))?;
        out.push(ScoredUtterance {
            dataset: r.dataset.unwrap_or_else(|| default_dataset.to_string()),
            id: r.id,
            dialect: r.dialect,
            reference: r.reference,
            hypothesis,
        });
    }
    if let Some(id) = by_id.into_keys().next() {
        return Err(ScoreInputError::UnmatchedHypothesis(id));
    }
    out.sort_by(|a, b| (&a.dataset, &a.id).cmp(&(&b.dataset, &b.id)));
    Ok(out)
}

/// Reads score files written by [`evaluate`] callers (one [`ScoredUtterance`] per line).
pub fn parse_scored(text: &str) -> Result<Vec<ScoredUtterance>, ScoreInputError> {
    parse_lines(text, "scores")
}

/// Corpus scores per dataset in each of `modes`, aggregated into a report.
pub fn score_report(
    scored: &[ScoredUtterance],
    modes: &[NormalizationMode],
    group_of: impl Fn(&str) -> DatasetGroup,
) -> Result<EvalReport, crate::metrics::MetricsError> {
    let mut by_dataset: std::collections::BTreeMap<&str, Vec<&ScoredUtterance>> = Default::default();
    for s in scored {
        by_dataset.entry(&s.dataset).or_default().push(s);
    }
    let mut entries = Vec::new();
    for (dataset, mut items) in by_dataset {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        for &mode in modes {
            let pairs = items.iter().map(|s| (s.reference.as_str(), s.hypothesis.as_str()));
            entries.push((dataset.to_string(), group_of(dataset), mode, corpus_scores(pairs, mode)?));
        }
    }
    aggregate(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFS: &str = "{\"id\":\"b\",\"reference\":\"كتب الولد\",\"dataset\":\"x\",\"frames\":[[0.0]]}\n{\"id\":\"a\",\"reference\":\"سلام\"}\n";

    #[test]
    fn pairs_by_id() {
        let hyps = "{\"id\":\"a\",\"hypothesis\":\"سلام\"}\n\n{\"id\":\"b\",\"hypothesis\":\"كتب\"}\n";
        let s = pair_scores(REFS, hyps, "d").unwrap();
        assert_eq!(s.iter().map(|u| (u.dataset.as_str(), u.id.as_str())).collect::<Vec<_>>(), [("d", "a"), ("x", "b")]);
        let r = score_report(&s, &[FILTER_MODE], |_| DatasetGroup::Benchmark).unwrap();
        assert_eq!(r.per_dataset["x"].scores[&FILTER_MODE].wer, 50.0);
        assert_eq!(r.overall_average[&FILTER_MODE].wer, 25.0);
    }

    #[test]
    fn rejects_bad_pairings() {
        let one = "{\"id\":\"a\",\"hypothesis\":\"\"}\n";
        assert_eq!(pair_scores(REFS, one, "d"), Err(ScoreInputError::MissingHypothesis("b".into())));
        let extra = "{\"id\":\"a\",\"hypothesis\":\"\"}\n{\"id\":\"b\",\"hypothesis\":\"\"}\n{\"id\":\"c\",\"hypothesis\":\"\"}\n";
        assert_eq!(pair_scores(REFS, extra, "d"), Err(ScoreInputError::UnmatchedHypothesis("c".into())));
        let dup = "{\"id\":\"a\",\"hypothesis\":\"\"}\n{\"id\":\"a\",\"hypothesis\":\"\"}\n";
        assert!(matches!(pair_scores(REFS, dup, "d"), Err(ScoreInputError::DuplicateId { file: "hyps", .. })));
        assert!(matches!(pair_scores(REFS, "{oops\n", "d"), Err(ScoreInputError::Json { file: "hyps", line: 1, .. })));
    }
}
