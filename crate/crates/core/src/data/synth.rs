//! Synthetic "dialectal transcription" corpus.
//!
//! References are short strings of words over a letter alphabet, with no letter repeated
//! back-to-back inside a word. Each character (space included) has a fixed random embedding; an
//! utterance's frames are those embeddings in order, each emitted one or more times (variable
//! duration) with Gaussian noise added. Dialect test sets swap letters for other codepoints in
//! both the text and the frames.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Utterance};
use crate::kv::{KvError, KvMap};
use crate::model::mat::round_f32;
use crate::model::Mat;
use crate::rng::{derive_seed, label, stream};

/// Letters used by the default corpus.
pub const DEFAULT_ALPHABET: &str = "ابتجدرسعفقكلمنوي";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub alphabet: Vec<char>,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub frame_dim: usize,
    pub embedding_seed: u64,
    pub sigma: f64,
    /// Probability of emitting one more frame for the same character (repeated, capped at 3
    /// extra frames).
    pub duplication: f64,
    /// Per dialect tag, letter substitutions applied to dialect test sets.
    pub dialects: BTreeMap<String, BTreeMap<char, char>>,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let rules = |pairs: &[(char, char)]| pairs.iter().copied().collect::<BTreeMap<_, _>>();
        let dialects = BTreeMap::from([
            ("gulf".to_string(), rules(&[('ج', 'ي'), ('ق', 'گ'), ('ك', 'چ')])),
            ("egy".to_string(), rules(&[('ق', 'ء'), ('ج', 'گ')])),
            ("lev".to_string(), rules(&[('ق', 'ء'), ('ب', 'پ'), ('ف', 'ڤ')])),
            ("mag".to_string(), rules(&[('ك', 'ڭ'), ('ب', 'پ'), ('ل', 'ڵ'), ('ف', 'ڤ')])),
        ]);
        Self {
            alphabet: DEFAULT_ALPHABET.chars().collect(),
            min_words: 1,
            max_words: 3,
            min_word_len: 2,
            max_word_len: 4,
            frame_dim: 8,
            embedding_seed: 7,
            sigma: 0.3,
            duplication: 0.3,
            dialects,
            train_size: 5000,
            dev_size: 500,
            test_size: 200,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "alphabet",
    "min_words",
    "max_words",
    "min_word_len",
    "max_word_len",
    "frame_dim",
    "embedding_seed",
    "sigma",
    "duplication",
    "train_size",
    "dev_size",
    "test_size",
    "seed",
];

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.duplication) {
            return bad(format!("duplication must be in [0, 1), got {}", self.duplication));
        }
        let letters: BTreeSet<char> = self.alphabet.iter().copied().collect();
        if letters.len() < 2 || letters.len() != self.alphabet.len() || letters.iter().any(|c| c.is_whitespace()) {
            return bad("alphabet needs at least two distinct non-space characters".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 <= min_words <= max_words".into());
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("need 1 <= min_word_len <= max_word_len".into());
        }
        if self.frame_dim == 0 {
            return bad("frame_dim must be positive".into());
        }
        for (tag, rules) in &self.dialects {
            let targets: BTreeSet<char> = rules.values().copied().collect();
            if targets.len() != rules.len() {
                return bad(format!("dialect {tag}: substitutions are not injective"));
            }
            if rules.iter().any(|(a, b)| a == b || b.is_whitespace()) {
                return bad(format!("dialect {tag}: substitutions must change a letter into a non-space"));
            }
        }
        Ok(())
    }

    /// Every character a reference can contain: the alphabet, substitution targets, and space.
    pub fn symbols(&self) -> Vec<char> {
        let mut out = self.alphabet.clone();
        for rules in self.dialects.values() {
            for &c in rules.values() {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out.push(' ');
        out
    }

    /// Reads keys from a flat config. Dialects are given as `dialect.TAG = a>b c>d`.
    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        kv.check_keys(KEYS, &["dialect."])?;
        let mut c = Self::default();
        if let Some(a) = kv.get("alphabet") {
            c.alphabet = a.chars().collect();
        }
        kv.read("min_words", &mut c.min_words)?;
        kv.read("max_words", &mut c.max_words)?;
        kv.read("min_word_len", &mut c.min_word_len)?;
        kv.read("max_word_len", &mut c.max_word_len)?;
        kv.read("frame_dim", &mut c.frame_dim)?;
        kv.read("embedding_seed", &mut c.embedding_seed)?;
        kv.read("sigma", &mut c.sigma)?;
        kv.read("duplication", &mut c.duplication)?;
        kv.read("train_size", &mut c.train_size)?;
        kv.read("dev_size", &mut c.dev_size)?;
        kv.read("test_size", &mut c.test_size)?;
        kv.read("seed", &mut c.seed)?;
        let dialect_keys: Vec<(&str, &str)> = kv.iter().filter(|(k, _)| k.starts_with("dialect.")).collect();
        if !dialect_keys.is_empty() {
            c.dialects.clear();
        }
        for (k, v) in dialect_keys {
            let tag = &k["dialect.".len()..];
            let mut rules = BTreeMap::new();
            for pair in v.split_whitespace() {
                let mut chars = pair.chars();
                match (chars.next(), chars.next(), chars.next(), chars.next()) {
                    (Some(a), Some('>'), Some(b), None) => {
                        rules.insert(a, b);
                    }
                    _ => {
                        return Err(KvError::BadValue {
                            key: k.into(),
                            value: v.into(),
                            message: format!("expected `a>b` pairs, found {pair:?}"),
                        })
                    }
                }
            }
            c.dialects.insert(tag.to_string(), rules);
        }
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("alphabet", self.alphabet.iter().collect::<String>());
        kv.set("min_words", self.min_words);
        kv.set("max_words", self.max_words);
        kv.set("min_word_len", self.min_word_len);
        kv.set("max_word_len", self.max_word_len);
        kv.set("frame_dim", self.frame_dim);
        kv.set("embedding_seed", self.embedding_seed);
        kv.set("sigma", self.sigma);
        kv.set("duplication", self.duplication);
        kv.set("train_size", self.train_size);
        kv.set("dev_size", self.dev_size);
        kv.set("test_size", self.test_size);
        kv.set("seed", self.seed);
        for (tag, rules) in &self.dialects {
            let v: Vec<String> = rules.iter().map(|(a, b)| format!("{a}>{b}")).collect();
            kv.set(format!("dialect.{tag}"), v.join(" "));
        }
        kv
    }
}

/// Fixed per-character frame embeddings, `N(0, 1)` per component, keyed on the embedding seed and
/// the codepoint.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub chars: Vec<char>,
    pub vectors: Vec<Vec<f64>>,
}

pub fn char_embedding(seed: u64, c: char, dim: usize) -> Vec<f64> {
    let mut rng = stream(seed, &[label("embedding"), c as u64]);
    (0..dim).map(|_| round_f32(rng.sample::<f64, _>(rand_distr::StandardNormal))).collect()
}

impl EmbeddingTable {
    pub fn new(seed: u64, chars: &[char], dim: usize) -> Self {
        Self { chars: chars.to_vec(), vectors: chars.iter().map(|&c| char_embedding(seed, c, dim)).collect() }
    }

    pub fn for_config(c: &SynthConfig) -> Self {
        Self::new(c.embedding_seed, &c.symbols(), c.frame_dim)
    }

    pub fn get(&self, c: char) -> Option<&[f64]> {
        self.chars.iter().position(|&x| x == c).map(|i| self.vectors[i].as_slice())
    }

    /// Labels each frame with its nearest embedding and collapses runs of the same label.
    pub fn nearest_neighbor_decode(&self, frames: &Mat) -> String {
        let mut out = String::new();
        let mut prev = None;
        for r in 0..frames.rows {
            let row = frames.row(r);
            let best = (0..self.chars.len())
                .min_by(|&a, &b| {
                    let da: f64 = self.vectors[a].iter().zip(row).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = self.vectors[b].iter().zip(row).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.total_cmp(&db)
                })
                .expect("non-empty table");
            if prev != Some(best) {
                out.push(self.chars[best]);
            }
            prev = Some(best);
        }
        out.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    /// Test sets keyed by dialect tag. `base` carries the unmodified text.
    pub tests: BTreeMap<String, Vec<Utterance>>,
}

pub const BASE_DIALECT: &str = "base";

fn random_reference<R: Rng>(c: &SynthConfig, rng: &mut R) -> String {
    let words = rng.random_range(c.min_words..=c.max_words);
    let mut out = String::new();
    for w in 0..words {
        if w > 0 {
            out.push(' ');
        }
        let len = rng.random_range(c.min_word_len..=c.max_word_len);
        let mut prev = None;
        for _ in 0..len {
            let ch = loop {
                let ch = c.alphabet[rng.random_range(0..c.alphabet.len())];
                if Some(ch) != prev {
                    break ch;
                }
            };
            out.push(ch);
            prev = Some(ch);
        }
    }
    out
}

/// Frames for `text` under the config's noise and duplication settings.
pub fn render_frames<R: Rng>(c: &SynthConfig, table: &EmbeddingTable, text: &str, rng: &mut R) -> Mat {
    let noise = Normal::new(0.0, c.sigma).expect("validated sigma");
    let mut data = Vec::new();
    let mut rows = 0;
    for ch in text.chars() {
        let e = table.get(ch).expect("character covered by the embedding table");
        let mut copies = 1;
        while copies < 4 && rng.random::<f64>() < c.duplication {
            copies += 1;
        }
        for _ in 0..copies {
            data.extend(e.iter().map(|&x| round_f32(x + noise.sample(rng))));
            rows += 1;
        }
    }
    Mat::from_vec(rows, c.frame_dim, data)
}

fn apply_rules(text: &str, rules: &BTreeMap<char, char>) -> String {
    text.chars().map(|ch| *rules.get(&ch).unwrap_or(&ch)).collect()
}

/// Generates train, dev and per-dialect test sets. Every utterance draws from its own random
/// stream keyed on (seed, split, index), so the output does not depend on generation order.
pub fn synth_corpus(c: &SynthConfig) -> Result<SynthCorpus, DataError> {
    c.validate()?;
    let table = EmbeddingTable::for_config(c);
    let make = |split: &str, dialect: Option<&str>, i: usize| -> Utterance {
        let mut text_rng = stream(c.seed, &[label(split), i as u64]);
        let base = random_reference(c, &mut text_rng);
        let reference = match dialect {
            Some(tag) if tag != BASE_DIALECT => apply_rules(&base, &c.dialects[tag]),
            _ => base,
        };
        let tag = dialect.unwrap_or("");
        let mut frame_rng = stream(c.seed, &[label(split), label(tag), i as u64, label("frames")]);
        let frames = render_frames(c, &table, &reference, &mut frame_rng);
        let id = match dialect {
            Some(tag) => format!("{split}-{tag}-{i:06}"),
            None => format!("{split}-{i:06}"),
        };
        Utterance { id, reference, dataset: format!("synth-{split}"), dialect: dialect.map(str::to_string), frames }
    };
    let train = (0..c.train_size).map(|i| make("train", None, i)).collect();
    let dev = (0..c.dev_size).map(|i| make("dev", None, i)).collect();
    let mut tests = BTreeMap::new();
    let tags = std::iter::once(BASE_DIALECT).chain(c.dialects.keys().map(String::as_str));
    for tag in tags {
        tests.insert(tag.to_string(), (0..c.test_size).map(|i| make("test", Some(tag), i)).collect());
    }
    Ok(SynthCorpus { train, dev, tests })
}

/// Copies of `data` with extra Gaussian frame noise of standard deviation `sigma`.
pub fn add_frame_noise(data: &[Utterance], sigma: f64, seed: u64) -> Vec<Utterance> {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    data.iter()
        .map(|u| {
            let mut rng = stream(derive_seed(seed, &[label("noise")]), &[label(&u.id)]);
            let mut v = u.clone();
            for x in &mut v.frames.data {
                *x = round_f32(*x + noise.sample(&mut rng));
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{corpus_scores, wer};
    use crate::textnorm::NormalizationMode;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { train_size: 50, dev_size: 10, test_size: 20, seed, ..SynthConfig::default() }
    }

    fn oracle_wer(c: &SynthConfig, data: &[Utterance]) -> f64 {
        let table = EmbeddingTable::for_config(c);
        let pairs: Vec<(String, String)> =
            data.iter().map(|u| (u.reference.clone(), table.nearest_neighbor_decode(&u.frames))).collect();
        corpus_scores(pairs.iter().map(|(r, h)| (r.as_str(), h.as_str())), NormalizationMode::NormalizedNoDiacritics)
            .unwrap()
            .wer
    }

    #[test]
    fn noiseless_frames_decode_exactly() {
        let c = SynthConfig { sigma: 0.0, duplication: 0.0, ..small(1) };
        let corpus = synth_corpus(&c).unwrap();
        let table = EmbeddingTable::for_config(&c);
        for u in corpus.train.iter().chain(&corpus.dev) {
            assert_eq!(u.frames.rows, u.reference.chars().count());
            for (r, ch) in u.reference.chars().enumerate() {
                assert_eq!(u.frames.row(r), table.get(ch).unwrap());
            }
        }
        assert_eq!(oracle_wer(&c, &corpus.train), 0.0);
    }

    #[test]
    fn duplication_is_collapsed_by_the_oracle() {
        let c = SynthConfig { sigma: 0.0, duplication: 0.6, ..small(2) };
        let corpus = synth_corpus(&c).unwrap();
        assert!(corpus.train.iter().any(|u| u.frames.rows > u.reference.chars().count()));
        assert_eq!(oracle_wer(&c, &corpus.train), 0.0);
    }

    #[test]
    fn heavy_noise_defeats_the_oracle() {
        let c = SynthConfig { sigma: 10.0, train_size: 1000, ..small(3) };
        let corpus = synth_corpus(&c).unwrap();
        assert!(oracle_wer(&c, &corpus.train) > 50.0);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(synth_corpus(&small(4)).unwrap(), synth_corpus(&small(4)).unwrap());
        assert_ne!(synth_corpus(&small(4)).unwrap().train, synth_corpus(&small(5)).unwrap().train);
    }

    #[test]
    fn references_follow_the_shape_rules() {
        let c = small(6);
        for u in synth_corpus(&c).unwrap().train {
            let words: Vec<&str> = u.reference.split(' ').collect();
            assert!((c.min_words..=c.max_words).contains(&words.len()));
            for w in words {
                let chars: Vec<char> = w.chars().collect();
                assert!((c.min_word_len..=c.max_word_len).contains(&chars.len()));
                assert!(chars.windows(2).all(|p| p[0] != p[1]));
            }
        }
    }

    #[test]
    fn dialects_differ_from_base() {
        let c = small(7);
        let corpus = synth_corpus(&c).unwrap();
        let base = &corpus.tests[BASE_DIALECT];
        for (tag, set) in &corpus.tests {
            if tag == BASE_DIALECT {
                continue;
            }
            let mut errors = 0.0;
            for (b, d) in base.iter().zip(set) {
                assert_eq!(b.id.replace(BASE_DIALECT, tag), d.id);
                errors += wer(&b.reference, &d.reference, NormalizationMode::NormalizedNoDiacritics).unwrap();
            }
            assert!(errors > 0.0, "dialect {tag} identical to base");
        }
    }

    #[test]
    fn ids_are_unique_across_splits() {
        let corpus = synth_corpus(&small(8)).unwrap();
        let mut sets: Vec<&[Utterance]> = vec![&corpus.train, &corpus.dev];
        sets.extend(corpus.tests.values().map(Vec::as_slice));
        assert!(crate::data::overlapping_ids(&sets).is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = small(0);
        c.sigma = -1.0;
        assert!(c.validate().is_err());
        let mut c = small(0);
        c.dialects.insert("x".into(), BTreeMap::from([('ا', 'پ'), ('ب', 'پ')]));
        assert!(c.validate().is_err());
        let mut c = small(0);
        c.min_words = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let c = small(9);
        let back = SynthConfig::from_kv(&KvMap::parse(&c.to_kv().render()).unwrap()).unwrap();
        assert_eq!(back, c);
        let kv = KvMap::parse("dialect.x = ab").unwrap();
        assert!(SynthConfig::from_kv(&kv).is_err());
        assert!(SynthConfig::from_kv(&KvMap::parse("colour = red").unwrap()).is_err());
    }

    #[test]
    fn added_noise_is_keyed_per_utterance() {
        let corpus = synth_corpus(&small(10)).unwrap();
        let a = add_frame_noise(&corpus.dev, 1.0, 3);
        let b = add_frame_noise(&corpus.dev[1..], 1.0, 3);
        assert_eq!(a[1..], b[..]);
        assert_ne!(a[0].frames, corpus.dev[0].frames);
        assert_eq!(add_frame_noise(&corpus.dev, 0.0, 3), corpus.dev);
    }
}
