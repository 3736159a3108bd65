//! Utterances, manifests, corpus statistics, sampling and splits, plus the synthetic corpus.

pub mod manifest;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::model::Mat;
use crate::textnorm::{normalize, tokens, NormalizationMode};

pub use manifest::{load_manifest, write_manifest, FramesStorage};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};

/// Nominal frame rate used for the duration proxy.
pub const FRAMES_PER_SECOND: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("duplicate utterance id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("requested {requested} segments but only {available} are available")]
    SizeExceedsCorpus { requested: usize, available: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios(Vec<f64>),
    #[error("invalid synthetic corpus config: {0}")]
    InvalidConfig(String),
    #[error("frames archive {path}: {message}")]
    CorruptFrames { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub reference: String,
    pub dataset: String,
    pub dialect: Option<String>,
    /// One row per frame.
    pub frames: Mat,
}

impl Utterance {
    /// Frame count, standing in for audio duration.
    pub fn duration_proxy(&self) -> usize {
        self.frames.rows
    }

    /// Checks the per-record invariants: non-empty id and frames, finite values.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.frames.rows == 0 || self.frames.cols == 0 {
            return Err(format!("utterance {:?} has no frames", self.id));
        }
        if !self.frames.is_finite() {
            return Err(format!("utterance {:?} has non-finite frame values", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct CorpusStats {
    pub utterances: usize,
    pub words: usize,
    pub frames: usize,
}

impl CorpusStats {
    pub fn words_per_utterance(&self) -> f64 {
        if self.utterances == 0 {
            0.0
        } else {
            self.words as f64 / self.utterances as f64
        }
    }

    pub fn hours_proxy(&self) -> f64 {
        self.frames as f64 / FRAMES_PER_SECOND / 3600.0
    }
}

impl std::ops::AddAssign for CorpusStats {
    fn add_assign(&mut self, o: Self) {
        self.utterances += o.utterances;
        self.words += o.words;
        self.frames += o.frames;
    }
}

/// Counts on whitespace-tokenized orthographic references.
pub fn corpus_stats<'a>(data: impl IntoIterator<Item = &'a Utterance>) -> CorpusStats {
    let mut s = CorpusStats::default();
    for u in data {
        s.utterances += 1;
        s.words += tokens(&normalize(&u.reference, NormalizationMode::Orthographic)).len();
        s.frames += u.frames.rows;
    }
    s
}

/// Per-dialect statistics table plus an `all` row.
pub fn stats_tsv(data: &[Utterance]) -> String {
    let mut groups: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in data {
        groups.entry(u.dialect.as_deref().unwrap_or("-")).or_default().push(u);
    }
    let mut out = String::from("dialect\tutterances\twords\twords_per_utt\thours_proxy\n");
    let mut row = |name: &str, s: CorpusStats| {
        writeln!(
            out,
            "{name}\t{}\t{}\t{:.2}\t{:.4}",
            s.utterances,
            s.words,
            s.words_per_utterance(),
            s.hours_proxy()
        )
        .expect("write to string");
    };
    for (name, us) in &groups {
        row(name, corpus_stats(us.iter().copied()));
    }
    row("all", corpus_stats(data));
    out
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng::stream(seed, &[crate::rng::label("shuffle")]));
    idx
}

/// Uniform sample without replacement from the concatenation of `datasets`: one seeded shuffle of
/// the pool, then the first `n`. Samples of different sizes under one seed are nested.
pub fn sample_mixture(datasets: &[&[Utterance]], n: usize, seed: u64) -> Result<Vec<Utterance>, DataError> {
    let pool: Vec<&Utterance> = datasets.iter().flat_map(|d| d.iter()).collect();
    if n > pool.len() {
        return Err(DataError::SizeExceedsCorpus { requested: n, available: pool.len() });
    }
    Ok(shuffled_indices(pool.len(), seed)[..n].iter().map(|&i| pool[i].clone()).collect())
}

/// Seeded partition into parts with the given ratios. Part boundaries are rounded cumulative
/// ratios, so every item lands in exactly one part.
pub fn split(data: &[Utterance], ratios: &[f64], seed: u64) -> Result<Vec<Vec<Utterance>>, DataError> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios.to_vec()));
    }
    let order = shuffled_indices(data.len(), seed);
    let n = data.len() as f64;
    let mut parts = Vec::with_capacity(ratios.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        let end = if i + 1 == ratios.len() { data.len() } else { ((cum * n).round() as usize).min(data.len()) };
        let end = end.max(start);
        parts.push(order[start..end].iter().map(|&j| data[j].clone()).collect());
        start = end;
    }
    Ok(parts)
}

/// Ids that occur in more than one of the given collections.
pub fn overlapping_ids<'a>(sets: &[&'a [Utterance]]) -> Vec<&'a str> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut dup = Vec::new();
    for set in sets {
        let local: HashSet<&str> = set.iter().map(|u| u.id.as_str()).collect();
        for id in local {
            if !seen.insert(id) {
                dup.push(id);
            }
        }
    }
    dup.sort_unstable();
    dup
}
