//! Automatic error flags for pathological transcripts and per-dialect error reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::shuffled_indices;
use crate::distill::eval::ScoredUtterance;
use crate::metrics::cer;
use crate::rng::{derive_seed, label};
use crate::textnorm::{normalize, tokens, NormalizationMode};

/// Mode used for tokenizing and scoring in this module.
pub const ANALYSIS_MODE: NormalizationMode = NormalizationMode::NormalizedNoDiacritics;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("reference is empty after normalization")]
    EmptyReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCategory {
    Empty,
    Deterioration,
    Incomplete,
    #[serde(rename = "HighCER")]
    HighCer,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [Self::Empty, Self::Deterioration, Self::Incomplete, Self::HighCer];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Empty => "Empty",
            Self::Deterioration => "Deterioration",
            Self::Incomplete => "Incomplete",
            Self::HighCer => "HighCER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFlag {
    pub category: ErrorCategory,
    pub evidence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagParams {
    /// Longest repeated n-gram considered.
    pub max_ngram: usize,
    /// Back-to-back occurrences needed to call a repetition.
    pub min_repeats: usize,
    /// In-lexicon token rate below which a hypothesis counts as gibberish.
    pub min_lexicon_rate: f64,
    /// Hypotheses shorter than this fraction of the reference may be incomplete.
    pub incomplete_ratio: f64,
    /// Maximum per-token error of the hypothesis against its best reference prefix.
    pub prefix_error: f64,
    /// CER (percent) above which an utterance is triaged.
    pub cer_triage: f64,
}

impl Default for FlagParams {
    fn default() -> Self {
        Self { max_ngram: 5, min_repeats: 4, min_lexicon_rate: 0.2, incomplete_ratio: 0.5, prefix_error: 0.3, cer_triage: 75.0 }
    }
}

/// Known words, stored normalized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon(BTreeSet<String>);

impl Lexicon {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokens(&normalize(t, ANALYSIS_MODE)).into_iter().map(str::to_string));
        }
        Self(words)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Longest back-to-back run of one n-gram, as `(start, n, repeats)`. Earliest start and then
/// the shortest n win ties.
fn longest_repetition(toks: &[&str], max_ngram: usize) -> Option<(usize, usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for start in 0..toks.len() {
        for n in 1..=max_ngram.min(toks.len() - start) {
            let unit = &toks[start..start + n];
            let mut repeats = 1;
            while toks.get(start + (repeats + 1) * n - 1).is_some()
                && &toks[start + repeats * n..start + (repeats + 1) * n] == unit
            {
                repeats += 1;
            }
            if best.is_none_or(|b| repeats > b.2) {
                best = Some((start, n, repeats));
            }
        }
    }
    best
}

/// Fewest edits turning `hyp` into some prefix of `reference`.
fn prefix_alignment_errors(reference: &[&str], hyp: &[&str]) -> usize {
    let mut prev: Vec<usize> = vec![0; reference.len() + 1];
    for (j, p) in prev.iter_mut().enumerate() {
        *p = j;
    }
    for (i, h) in hyp.iter().enumerate() {
        let mut cur = vec![i + 1; reference.len() + 1];
        for j in 1..=reference.len() {
            let sub = prev[j - 1] + usize::from(reference[j - 1] != *h);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev.into_iter().min().unwrap_or(0)
}

/// Flags a single transcript. Deterministic; several flags can apply at once, in category order.
///
/// `lexicon` enables the gibberish check; without it only repetition counts as deterioration.
pub fn flag_errors(
    reference: &str,
    hypothesis: &str,
    lexicon: Option<&Lexicon>,
    params: &FlagParams,
) -> Result<Vec<ErrorFlag>, AnalysisError> {
    let r_norm = normalize(reference, ANALYSIS_MODE);
    if r_norm.is_empty() {
        return Err(AnalysisError::EmptyReference);
    }
    let h_norm = normalize(hypothesis, ANALYSIS_MODE);
    let r = tokens(&r_norm);
    let h = tokens(&h_norm);
    let mut flags = Vec::new();
    let mut flag = |category, evidence: String| flags.push(ErrorFlag { category, evidence });

    if h.is_empty() {
        flag(ErrorCategory::Empty, "empty hypothesis".into());
    }

    let mut deterioration = Vec::new();
    if let Some((start, n, repeats)) = longest_repetition(&h, params.max_ngram) {
        if repeats >= params.min_repeats {
            deterioration.push(format!("{:?} repeated {repeats} times", h[start..start + n].join(" ")));
        }
    }
    if let Some(lex) = lexicon {
        if !h.is_empty() {
            let known = h.iter().filter(|t| lex.contains(t)).count();
            let rate = known as f64 / h.len() as f64;
            if rate < params.min_lexicon_rate {
                deterioration.push(format!("in-lexicon rate {rate:.3}"));
            }
        }
    }
    if !deterioration.is_empty() {
        flag(ErrorCategory::Deterioration, deterioration.join("; "));
    }

    if !h.is_empty() && (h.len() as f64) < params.incomplete_ratio * r.len() as f64 {
        let per_token = prefix_alignment_errors(&r, &h) as f64 / h.len() as f64;
        if per_token < params.prefix_error {
            flag(
                ErrorCategory::Incomplete,
                format!("length ratio {:.3}, prefix error {per_token:.3}", h.len() as f64 / r.len() as f64),
            );
        }
    }

    let c = cer(reference, hypothesis, ANALYSIS_MODE).map_err(|_| AnalysisError::EmptyReference)?;
    if c > params.cer_triage {
        flag(ErrorCategory::HighCer, format!("CER {c:.2}"));
    }
    Ok(flags)
}

/// A scored utterance with its flags, as exported for review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedUtterance {
    pub model: String,
    pub dataset: String,
    pub id: String,
    pub dialect: Option<String>,
    pub reference: String,
    pub hypothesis: String,
    pub flags: Vec<ErrorFlag>,
}

impl FlaggedUtterance {
    fn group(&self) -> &str {
        self.dialect.as_deref().unwrap_or("-")
    }
}

/// Flags every utterance of one model's scores. Utterances with an empty normalized
/// reference cannot be flagged and are returned by id instead.
pub fn flag_corpus(
    model: &str,
    scored: &[ScoredUtterance],
    lexicon: Option<&Lexicon>,
    params: &FlagParams,
) -> (Vec<FlaggedUtterance>, Vec<String>) {
    let results: Vec<Result<FlaggedUtterance, String>> = scored
        .par_iter()
        .map(|s| match flag_errors(&s.reference, &s.hypothesis, lexicon, params) {
            Ok(flags) => Ok(FlaggedUtterance {
                model: model.to_string(),
                dataset: s.dataset.clone(),
                id: s.id.clone(),
                dialect: s.dialect.clone(),
                reference: s.reference.clone(),
                hypothesis: s.hypothesis.clone(),
                flags,
            }),
            Err(_) => Err(s.id.clone()),
        })
        .collect();
    let mut flagged = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(f) => flagged.push(f),
            Err(id) => skipped.push(id),
        }
    }
    (flagged, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    /// Dialect tag, or `-` for untagged utterances.
    pub dialect: String,
    pub utterances: usize,
    pub counts: BTreeMap<ErrorCategory, usize>,
}

impl ReportRow {
    /// Share of utterances carrying `category`, in percent. Shares of one row can sum past 100.
    pub fn percent(&self, category: ErrorCategory) -> f64 {
        if self.utterances == 0 {
            return 0.0;
        }
        100.0 * self.counts.get(&category).copied().unwrap_or(0) as f64 / self.utterances as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// One row per (model, dialect), sorted.
    pub rows: Vec<ReportRow>,
    /// Up to `sample_size` utterances per (model, dialect) for human review.
    pub samples: Vec<FlaggedUtterance>,
}

/// Counts flags per model and dialect and draws a seeded review sample from each group.
pub fn error_report(flagged: &[FlaggedUtterance], sample_size: usize, seed: u64) -> ErrorReport {
    let mut groups: BTreeMap<(&str, &str), Vec<&FlaggedUtterance>> = BTreeMap::new();
    for f in flagged {
        groups.entry((f.model.as_str(), f.group())).or_default().push(f);
    }
    let mut rows = Vec::with_capacity(groups.len());
    let mut samples = Vec::new();
    for ((model, dialect), mut members) in groups {
        members.sort_by(|a, b| (&a.dataset, &a.id).cmp(&(&b.dataset, &b.id)));
        let mut counts: BTreeMap<ErrorCategory, usize> = ErrorCategory::ALL.iter().map(|&c| (c, 0)).collect();
        for m in &members {
            for f in &m.flags {
                *counts.entry(f.category).or_default() += 1;
            }
        }
        rows.push(ReportRow { model: model.into(), dialect: dialect.into(), utterances: members.len(), counts });
        let order = shuffled_indices(members.len(), derive_seed(seed, &[label(model), label(dialect)]));
        let mut picked: Vec<usize> = order.into_iter().take(sample_size).collect();
        picked.sort_unstable();
        samples.extend(picked.into_iter().map(|i| members[i].clone()));
    }
    ErrorReport { rows, samples }
}

impl ErrorReport {
    /// `model, dialect, category, count, percent`; one row per category of each group.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tdialect\tcategory\tcount\tpercent\n");
        for r in &self.rows {
            for c in ErrorCategory::ALL {
                let n = r.counts.get(&c).copied().unwrap_or(0);
                writeln!(out, "{}\t{}\t{}\t{n}\t{:.2}", r.model, r.dialect, c.as_str(), r.percent(c)).expect("write to string");
            }
        }
        out
    }

    /// Review sample, one JSON object per line.
    pub fn samples_jsonl(&self) -> String {
        self.samples.iter().map(|s| serde_json::to_string(s).expect("serializable") + "\n").collect()
    }
}
