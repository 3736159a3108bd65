//! Levenshtein alignment, WER/CER and macro-averaged evaluation reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::textnorm::{normalize, tokens, NormalizationMode};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("reference is empty after normalization but the hypothesis is not")]
    EmptyReference,
    #[error("no scores to aggregate")]
    EmptyInput,
    #[error("unknown dataset group {0:?} (expected benchmark or in-house)")]
    UnknownGroup(String),
}

/// Error counts of a minimum-cost alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl EditBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `100 * errors / N`. Callers handle `N == 0` before getting here.
    pub fn rate(&self) -> f64 {
        100.0 * self.errors() as f64 / self.reference_length as f64
    }
}

impl std::ops::AddAssign for EditBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.substitutions += rhs.substitutions;
        self.deletions += rhs.deletions;
        self.insertions += rhs.insertions;
        self.reference_length += rhs.reference_length;
    }
}

/// Unit-cost edit distance with a deterministic backtrace.
///
/// Among minimum-cost alignments the backtrace (walking from the end) prefers a match, then a
/// substitution, then a deletion, then an insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditBreakdown {
    let n = reference.len();
    let m = hypothesis.len();
    let width = m + 1;
    let mut cost = vec![0u32; (n + 1) * width];
    for j in 0..=m {
        cost[j] = j as u32;
    }
    for i in 1..=n {
        cost[i * width] = i as u32;
        for j in 1..=m {
            let diag = cost[(i - 1) * width + j - 1]
                + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * width + j] + 1;
            let ins = cost[i * width + j - 1] + 1;
            cost[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut out = EditBreakdown {
        reference_length: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let diag = cost[(i - 1) * width + j - 1];
            if reference[i - 1] == hypothesis[j - 1] && diag == here {
                i -= 1;
                j -= 1;
                continue;
            }
            if diag + 1 == here {
                out.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * width + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

fn rate_from(breakdown: EditBreakdown, hyp_len: usize) -> Result<f64, MetricsError> {
    if breakdown.reference_length == 0 {
        if hyp_len == 0 {
            Ok(0.0)
        } else {
            Err(MetricsError::EmptyReference)
        }
    } else {
        Ok(breakdown.rate())
    }
}

/// Word-level breakdown after normalizing both sides under `mode`.
pub fn word_breakdown(reference: &str, hypothesis: &str, mode: NormalizationMode) -> EditBreakdown {
    let r = normalize(reference, mode);
    let h = normalize(hypothesis, mode);
    edit_distance(&tokens(&r), &tokens(&h))
}

/// Character-level breakdown (codepoints, inter-word spaces included).
pub fn char_breakdown(reference: &str, hypothesis: &str, mode: NormalizationMode) -> EditBreakdown {
    let r: Vec<char> = normalize(reference, mode).chars().collect();
    let h: Vec<char> = normalize(hypothesis, mode).chars().collect();
    edit_distance(&r, &h)
}

/// Word error rate in percent. May exceed 100.
pub fn wer(reference: &str, hypothesis: &str, mode: NormalizationMode) -> Result<f64, MetricsError> {
    let h = normalize(hypothesis, mode);
    let b = edit_distance(&tokens(&normalize(reference, mode)), &tokens(&h));
    rate_from(b, tokens(&h).len())
}

/// Character error rate in percent. May exceed 100.
pub fn cer(reference: &str, hypothesis: &str, mode: NormalizationMode) -> Result<f64, MetricsError> {
    let b = char_breakdown(reference, hypothesis, mode);
    rate_from(b, normalize(hypothesis, mode).chars().count())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScorePair {
    pub wer: f64,
    pub cer: f64,
}

impl ScorePair {
    pub fn new(wer: f64, cer: f64) -> Self {
        Self { wer, cer }
    }

    fn mean<'a>(items: impl IntoIterator<Item = &'a ScorePair>) -> Option<ScorePair> {
        let mut n = 0usize;
        let mut acc = ScorePair::default();
        for s in items {
            acc.wer += s.wer;
            acc.cer += s.cer;
            n += 1;
        }
        (n > 0).then(|| ScorePair::new(acc.wer / n as f64, acc.cer / n as f64))
    }
}

impl fmt::Display for ScorePair {
    /// One decimal place, `WER/CER`, the way result tables print them.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}/{:.1}", self.wer, self.cer)
    }
}

/// Corpus-level scores for one dataset: total edits over total reference length.
pub fn corpus_scores<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    mode: NormalizationMode,
) -> Result<ScorePair, MetricsError> {
    let mut words = EditBreakdown::default();
    let mut chars = EditBreakdown::default();
    for (r, h) in pairs {
        let rn = normalize(r, mode);
        let hn = normalize(h, mode);
        if rn.is_empty() && !hn.is_empty() {
            return Err(MetricsError::EmptyReference);
        }
        words += edit_distance(&tokens(&rn), &tokens(&hn));
        let rc: Vec<char> = rn.chars().collect();
        let hc: Vec<char> = hn.chars().collect();
        chars += edit_distance(&rc, &hc);
    }
    let pick = |b: EditBreakdown| if b.reference_length == 0 { 0.0 } else { b.rate() };
    Ok(ScorePair::new(pick(words), pick(chars)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetGroup {
    Benchmark,
    InHouse,
}

impl DatasetGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetGroup::Benchmark => "benchmark",
            DatasetGroup::InHouse => "in-house",
        }
    }
}

impl FromStr for DatasetGroup {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "benchmark" | "bench" => Ok(DatasetGroup::Benchmark),
            "in-house" | "inhouse" | "ih" => Ok(DatasetGroup::InHouse),
            other => Err(MetricsError::UnknownGroup(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub group: DatasetGroup,
    pub scores: BTreeMap<NormalizationMode, ScorePair>,
}

/// Per-dataset scores plus macro averages, keyed by normalization mode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_dataset: BTreeMap<String, DatasetScore>,
    pub benchmark_average: BTreeMap<NormalizationMode, ScorePair>,
    pub in_house_average: BTreeMap<NormalizationMode, ScorePair>,
    pub overall_average: BTreeMap<NormalizationMode, ScorePair>,
}

/// Macro-averages per-dataset scores within each group and overall.
///
/// If a dataset id appears more than once, its mode maps are merged (later entries win per mode).
pub fn aggregate<I>(entries: I) -> Result<EvalReport, MetricsError>
where
    I: IntoIterator<Item = (String, DatasetGroup, NormalizationMode, ScorePair)>,
{
    let mut report = EvalReport::default();
    for (dataset, group, mode, score) in entries {
        let slot = report
            .per_dataset
            .entry(dataset.clone())
            .or_insert_with(|| DatasetScore {
                dataset,
                group,
                scores: BTreeMap::new(),
            });
        slot.group = group;
        slot.scores.insert(mode, score);
    }
    if report.per_dataset.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    for mode in NormalizationMode::ALL {
        let in_group = |g: Option<DatasetGroup>| {
            report
                .per_dataset
                .values()
                .filter(move |d| g.is_none_or(|g| d.group == g))
                .filter_map(move |d| d.scores.get(&mode))
        };
        if let Some(avg) = ScorePair::mean(in_group(Some(DatasetGroup::Benchmark))) {
            report.benchmark_average.insert(mode, avg);
        }
        if let Some(avg) = ScorePair::mean(in_group(Some(DatasetGroup::InHouse))) {
            report.in_house_average.insert(mode, avg);
        }
        if let Some(avg) = ScorePair::mean(in_group(None)) {
            report.overall_average.insert(mode, avg);
        }
    }
    Ok(report)
}

impl EvalReport {
    /// Tab-separated table: one row per dataset and mode, then the average rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dataset\tgroup\tmode\twer\tcer\n");
        for d in self.per_dataset.values() {
            for (mode, s) in &d.scores {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{:.1}\t{:.1}\n",
                    d.dataset,
                    d.group.as_str(),
                    mode,
                    s.wer,
                    s.cer
                ));
            }
        }
        for (label, group, map) in [
            ("avg-benchmark", "benchmark", &self.benchmark_average),
            ("avg-in-house", "in-house", &self.in_house_average),
            ("avg-overall", "all", &self.overall_average),
        ] {
            for (mode, s) in map {
                out.push_str(&format!(
                    "{label}\t{group}\t{mode}\t{:.1}\t{:.1}\n",
                    s.wer, s.cer
                ));
            }
        }
        out
    }

    /// JSONL records: one per dataset, then one per average row.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in self.per_dataset.values() {
            let rec = serde_json::json!({
                "kind": "dataset",
                "dataset": d.dataset,
                "group": d.group,
                "scores": d.scores,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        for (label, map) in [
            ("benchmark", &self.benchmark_average),
            ("in-house", &self.in_house_average),
            ("overall", &self.overall_average),
        ] {
            if map.is_empty() {
                continue;
            }
            let rec = serde_json::json!({ "kind": "average", "group": label, "scores": map });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}
