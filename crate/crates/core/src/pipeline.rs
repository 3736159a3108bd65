//! The full corpus → teacher → pseudo-labels → filter → student → evaluation run.
//!
//! Every stage writes into `OUT/<stage>-<key>/`, where the key hashes the stage's own settings
//! and the keys of the stages it reads from. A finished stage records the SHA-256 of each file it
//! wrote in `stage.json`; reruns reuse finished stages after checking those hashes, so runs that
//! share a prefix of settings (for example a λ sweep) share the earlier stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::manifest::{load_manifest, write_manifest, FramesStorage};
use crate::data::synth::{add_frame_noise, synth_corpus, SynthConfig, SynthCorpus, BASE_DIALECT};
use crate::data::Utterance;
use crate::distill::eval::{evaluate, EvalSet, ScoredUtterance};
use crate::distill::{
    filter_by_wer, pseudo_label, train_distill, train_teacher, DistillConfig, DistillInputs, PseudoLabeledSegment,
    TeacherConfig, TrainingLog,
};
use crate::kv::{KvError, KvMap};
use crate::metrics::{DatasetGroup, EvalReport};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::student::init_student_from_teacher;
use crate::model::{ModelConfig, SeqModel, Vocab};
use crate::rng::{derive_seed, label, stream};

pub const STAGES: [&str; 7] =
    ["gen-corpus", "train-teacher", "pseudolabel", "filter", "init-student", "distill", "evaluate"];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Teacher architecture; the student shares everything except the layer counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_target_len: usize,
    pub max_source_len: usize,
    pub init_seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            encoder_layers: 4,
            decoder_layers: 4,
            max_target_len: 32,
            max_source_len: 64,
            init_seed: 1,
        }
    }
}

const SHAPE_KEYS: &[&str] =
    &["d_model", "n_heads", "ffn_dim", "encoder_layers", "decoder_layers", "max_target_len", "max_source_len", "init_seed"];

impl ModelShape {
    pub fn config(&self, vocab_size: usize, frame_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            ffn_dim: self.ffn_dim,
            max_target_len: self.max_target_len,
            max_source_len: self.max_source_len,
            frame_dim,
        }
    }

    /// Randomly initialized model for `vocab`, seeded with `init_seed`.
    pub fn build(&self, vocab: Vocab, frame_dim: usize) -> Result<SeqModel, crate::model::ModelError> {
        let cfg = self.config(vocab.len(), frame_dim);
        SeqModel::random(cfg, vocab, &mut stream(self.init_seed, &[label("model-init")]))
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        kv.check_keys(SHAPE_KEYS, &[])?;
        let mut s = Self::default();
        kv.read("d_model", &mut s.d_model)?;
        kv.read("n_heads", &mut s.n_heads)?;
        kv.read("ffn_dim", &mut s.ffn_dim)?;
        kv.read("encoder_layers", &mut s.encoder_layers)?;
        kv.read("decoder_layers", &mut s.decoder_layers)?;
        kv.read("max_target_len", &mut s.max_target_len)?;
        kv.read("max_source_len", &mut s.max_source_len)?;
        kv.read("init_seed", &mut s.init_seed)?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("ffn_dim", self.ffn_dim);
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("decoder_layers", self.decoder_layers);
        kv.set("max_target_len", self.max_target_len);
        kv.set("max_source_len", self.max_source_len);
        kv.set("init_seed", self.init_seed);
        kv
    }
}

/// Everything a pipeline run depends on. The defaults are the desk-scale experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: SynthConfig,
    pub model: ModelShape,
    pub teacher: TeacherConfig,
    /// Extra frame noise the teacher sees while pseudo-labeling and producing KL targets; 0 uses
    /// the student's frames.
    pub label_noise: f64,
    pub student_encoder_layers: usize,
    pub student_decoder_layers: usize,
    pub distill: DistillConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: SynthConfig { max_words: 5, duplication: 0.1, ..SynthConfig::default() },
            model: ModelShape::default(),
            teacher: TeacherConfig {
                learning_rate: 1e-2,
                max_epochs: 40,
                stop_at_target: false,
                layer_drop: 0.15,
                ..TeacherConfig::default()
            },
            label_noise: 0.0,
            student_encoder_layers: 2,
            student_decoder_layers: 2,
            distill: DistillConfig {
                learning_rate: 3e-3,
                batch_size: 32,
                cache_teacher_distributions: true,
                ..DistillConfig::default()
            },
        }
    }
}

const SECTIONS: [&str; 5] = ["corpus.", "model.", "teacher.", "distill.", "student."];
const STUDENT_KEYS: &[&str] = &["encoder_layers", "decoder_layers", "label_noise"];

impl PipelineConfig {
    /// Overrides the defaults with `corpus.*`, `model.*`, `teacher.*`, `student.*` and
    /// `distill.*` keys.
    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        kv.check_keys(&[], &SECTIONS)?;
        let mut c = Self::default();
        let mut corpus = c.corpus.to_kv();
        let overrides = kv.section("corpus.");
        if overrides.iter().any(|(k, _)| k.starts_with("dialect.")) {
            corpus = corpus.iter().filter(|(k, _)| !k.starts_with("dialect.")).fold(KvMap::default(), |mut m, (k, v)| {
                m.set(k, v);
                m
            });
        }
        corpus.merge(&overrides);
        c.corpus = SynthConfig::from_kv(&corpus)?;
        let mut model = c.model.to_kv();
        model.merge(&kv.section("model."));
        c.model = ModelShape::from_kv(&model)?;
        let mut teacher = c.teacher.to_kv();
        teacher.merge(&kv.section("teacher."));
        c.teacher = TeacherConfig::from_kv(&teacher)?;
        c.distill.apply_kv(&kv.section("distill."))?;
        let student = kv.section("student.");
        student.check_keys(STUDENT_KEYS, &[])?;
        student.read("encoder_layers", &mut c.student_encoder_layers)?;
        student.read("decoder_layers", &mut c.student_decoder_layers)?;
        student.read("label_noise", &mut c.label_noise)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.nest("corpus.", &self.corpus.to_kv());
        kv.nest("model.", &self.model.to_kv());
        kv.nest("teacher.", &self.teacher.to_kv());
        kv.nest("distill.", &self.distill.to_kv());
        kv.set("student.encoder_layers", self.student_encoder_layers);
        kv.set("student.decoder_layers", self.student_decoder_layers);
        kv.set("student.label_noise", self.label_noise);
        kv
    }

    /// Sets every seed (corpus, initialization, teacher and student shuffling) to `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.model.init_seed = seed;
        self.teacher.seed = seed;
        self.distill.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    /// File name to SHA-256 hex.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageStatus {
    pub stage: &'static str,
    pub key: String,
    pub dir: PathBuf,
    /// Reused from an earlier run.
    pub skipped: bool,
}

pub struct PipelineOutcome {
    pub report: EvalReport,
    pub teacher_dev_wer: Option<f64>,
    pub retained_fraction: f64,
    pub student_log: TrainingLog,
    pub stages: Vec<StageStatus>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stage_key(stage: &str, parents: &[&str], settings: &str) -> String {
    let text = format!("{stage}\n{}\n{settings}", parents.join(","));
    sha256_hex(text.as_bytes())[..16].to_string()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == "stage.json" || !path.is_file() {
            continue;
        }
        files.insert(name, sha256_hex(&fs::read(&path).map_err(io_err(&path))?));
    }
    Ok(files)
}

struct Runner<'a> {
    out: &'a Path,
    statuses: Vec<StageStatus>,
}

type StageResult<T> = Result<T, String>;

impl Runner<'_> {
    /// Produces the stage into a scratch directory unless a verified finished copy exists, then
    /// loads it. Failed stages leave their partial output in `<dir>.partial`.
    fn stage<T>(
        &mut self,
        stage: &'static str,
        key: String,
        produce: impl FnOnce(&Path) -> StageResult<()>,
        load: impl FnOnce(&Path) -> StageResult<T>,
    ) -> Result<T, PipelineError> {
        let fail = |message: String| PipelineError::Stage { stage, message };
        let dir = self.out.join(format!("{stage}-{key}"));
        let marker = dir.join("stage.json");
        let skipped = marker.is_file();
        if skipped {
            let text = fs::read_to_string(&marker).map_err(io_err(&marker))?;
            let record: StageRecord =
                serde_json::from_str(&text).map_err(|e| fail(format!("unreadable stage.json: {e}")))?;
            let actual = hash_files(&dir)?;
            for (name, hash) in &record.files {
                match actual.get(name) {
                    Some(h) if h == hash => {}
                    Some(_) => return Err(fail(format!("artifact {name} changed since the stage finished"))),
                    None => return Err(fail(format!("artifact {name} is missing"))),
                }
            }
        } else {
            let scratch = self.out.join(format!("{stage}-{key}.partial"));
            for d in [&dir, &scratch] {
                if d.exists() {
                    fs::remove_dir_all(d).map_err(io_err(d))?;
                }
            }
            fs::create_dir_all(&scratch).map_err(io_err(&scratch))?;
            produce(&scratch).map_err(fail)?;
            let record = StageRecord { stage: stage.into(), key: key.clone(), files: hash_files(&scratch)? };
            let json = serde_json::to_string_pretty(&record).expect("serializable") + "\n";
            let m = scratch.join("stage.json");
            fs::write(&m, json).map_err(io_err(&m))?;
            fs::rename(&scratch, &dir).map_err(io_err(&dir))?;
        }
        let value = load(&dir).map_err(fail)?;
        self.statuses.push(StageStatus { stage, key, dir, skipped });
        Ok(value)
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn write(path: &Path, text: &str) -> StageResult<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> StageResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect()
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> StageResult<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

fn write_log(dir: &Path, log: &TrainingLog) -> StageResult<()> {
    write(&dir.join("steps.jsonl"), &log.steps_jsonl())?;
    write(&dir.join("log.json"), &(serde_json::to_string_pretty(log).expect("serializable") + "\n"))
}

fn read_log(dir: &Path) -> StageResult<TrainingLog> {
    serde_json::from_str(&read(&dir.join("log.json"))?).map_err(s)
}

pub fn write_corpus(dir: &Path, c: &SynthCorpus) -> Result<(), String> {
    let mut sets: Vec<(String, &[Utterance])> = vec![("train".into(), &c.train), ("dev".into(), &c.dev)];
    sets.extend(c.tests.iter().map(|(tag, d)| (format!("test-{tag}"), d.as_slice())));
    for (name, data) in sets {
        write_manifest(dir.join(format!("{name}.jsonl")), data, &FramesStorage::Sidecar(format!("{name}.frames")))
            .map_err(s)?;
    }
    Ok(())
}

/// Reads a corpus written by the `gen-corpus` stage.
pub fn load_corpus(dir: &Path) -> Result<SynthCorpus, String> {
    let load = |name: &str| load_manifest(dir.join(format!("{name}.jsonl"))).map_err(|e| format!("{name}: {e}"));
    let mut tests = BTreeMap::new();
    let mut entries: Vec<String> = fs::read_dir(dir)
        .map_err(s)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .collect();
    entries.sort();
    for name in entries {
        if let Some(tag) = name.strip_prefix("test-").and_then(|n| n.strip_suffix(".jsonl")) {
            tests.insert(tag.to_string(), load(&format!("test-{tag}"))?);
        }
    }
    Ok(SynthCorpus { train: load("train")?, dev: load("dev")?, tests })
}

/// Evaluation sets of a corpus: dev and the base test set count as benchmarks, dialect test sets
/// as in-house.
pub fn eval_sets(corpus: &SynthCorpus) -> Vec<(String, DatasetGroup, &[Utterance])> {
    let mut sets = vec![("dev".to_string(), DatasetGroup::Benchmark, corpus.dev.as_slice())];
    for (tag, data) in &corpus.tests {
        let group = if tag == BASE_DIALECT { DatasetGroup::Benchmark } else { DatasetGroup::InHouse };
        sets.push((format!("test-{tag}"), group, data.as_slice()));
    }
    sets
}

/// Frames the teacher labels: the training set, with `label_noise` added when positive.
pub fn teacher_view(train: &[Utterance], label_noise: f64, corpus_seed: u64) -> Vec<Utterance> {
    if label_noise > 0.0 {
        add_frame_noise(train, label_noise, derive_seed(corpus_seed, &[label("label-noise")]))
    } else {
        train.to_vec()
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    tool: &'a str,
    version: &'a str,
    config: BTreeMap<&'a str, &'a str>,
    stages: Vec<(&'a str, &'a str)>,
}

/// Runs (or resumes) every stage under `out` and writes `out/run.meta`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome, PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut r = Runner { out, statuses: Vec::new() };

    let corpus_key = stage_key("gen-corpus", &[], &cfg.corpus.to_kv().render());
    let corpus = r.stage(
        "gen-corpus",
        corpus_key.clone(),
        |dir| write_corpus(dir, &synth_corpus(&cfg.corpus).map_err(s)?),
        load_corpus,
    )?;

    let mut teacher_settings = cfg.model.to_kv();
    teacher_settings.nest("train.", &cfg.teacher.to_kv());
    let teacher_key = stage_key("train-teacher", &[&corpus_key], &teacher_settings.render());
    let (teacher, teacher_log) = r.stage(
        "train-teacher",
        teacher_key.clone(),
        |dir| {
            let init = cfg.model.build(Vocab::new(cfg.corpus.symbols()), cfg.corpus.frame_dim).map_err(s)?;
            let outcome = train_teacher(init, &corpus.train, &corpus.dev, &cfg.teacher).map_err(s)?;
            save_checkpoint(&outcome.model, dir.join("teacher.ckpt")).map_err(s)?;
            write_log(dir, &outcome.log)?;
            outcome.check_target(cfg.teacher.target_dev_wer).map_err(s)
        },
        |dir| Ok((load_checkpoint(dir.join("teacher.ckpt")).map_err(s)?, read_log(dir)?)),
    )?;

    let teacher_frames = teacher_view(&corpus.train, cfg.label_noise, cfg.corpus.seed);
    let label_key = stage_key("pseudolabel", &[&teacher_key, &corpus_key], &format!("label_noise = {}", cfg.label_noise));
    let segments: Vec<PseudoLabeledSegment> = r.stage(
        "pseudolabel",
        label_key.clone(),
        |dir| write(&dir.join("segments.jsonl"), &jsonl(&pseudo_label(&teacher, &teacher_frames))),
        |dir| parse_jsonl(&read(&dir.join("segments.jsonl"))?),
    )?;

    let lambda = crate::distill::format_lambda(cfg.distill.lambda_threshold);
    let filter_key = stage_key("filter", &[&label_key], &lambda);
    let (filtered, retained_fraction) = r.stage(
        "filter",
        filter_key.clone(),
        |dir| {
            let f = filter_by_wer(&segments, cfg.distill.lambda_threshold);
            write(&dir.join("segments.jsonl"), &jsonl(&f.segments))?;
            let summary = format!(
                "lambda\tretained\ttotal\tretained_fraction\n{lambda}\t{}\t{}\t{:.6}\n",
                f.retained_count(),
                f.segments.len(),
                f.retained_fraction
            );
            write(&dir.join("summary.tsv"), &summary)
        },
        |dir| {
            let segs: Vec<PseudoLabeledSegment> = parse_jsonl(&read(&dir.join("segments.jsonl"))?)?;
            let kept = segs.iter().filter(|s| s.kept).count();
            let fraction = if segs.is_empty() { 1.0 } else { kept as f64 / segs.len() as f64 };
            Ok((segs, fraction))
        },
    )?;

    let (el, dl) = (cfg.student_encoder_layers, cfg.student_decoder_layers);
    let init_key = stage_key("init-student", &[&teacher_key], &format!("{el}/{dl}"));
    let student_init = r.stage(
        "init-student",
        init_key.clone(),
        |dir| {
            let student = init_student_from_teacher(&teacher, el, dl).map_err(s)?;
            save_checkpoint(&student, dir.join("student-init.ckpt")).map_err(s)
        },
        |dir| load_checkpoint(dir.join("student-init.ckpt")).map_err(s),
    )?;

    let distill_key =
        stage_key("distill", &[&filter_key, &init_key, &corpus_key], &cfg.distill.to_kv().render());
    let (student, student_log) = r.stage(
        "distill",
        distill_key.clone(),
        |dir| {
            let inputs = DistillInputs {
                teacher: &teacher,
                teacher_frames: &teacher_frames,
                student_frames: &corpus.train,
                segments: &filtered,
                dev: &corpus.dev,
            };
            let (student, log) = train_distill(inputs, student_init.clone(), &cfg.distill).map_err(s)?;
            save_checkpoint(&student, dir.join("student.ckpt")).map_err(s)?;
            write_log(dir, &log)
        },
        |dir| Ok((load_checkpoint(dir.join("student.ckpt")).map_err(s)?, read_log(dir)?)),
    )?;

    let eval_key = stage_key("evaluate", &[&distill_key, &corpus_key], "");
    let report = r.stage(
        "evaluate",
        eval_key,
        |dir| {
            let named = eval_sets(&corpus);
            let sets: Vec<EvalSet<'_>> =
                named.iter().map(|(n, g, d)| EvalSet { name: n, group: *g, data: d }).collect();
            let (report, scored) = evaluate(&student, &sets).map_err(s)?;
            write(&dir.join("report.tsv"), &report.to_tsv())?;
            write(&dir.join("report.jsonl"), &report.to_jsonl())?;
            write(&dir.join("report.json"), &(serde_json::to_string_pretty(&report).map_err(s)? + "\n"))?;
            write(&dir.join("scores.jsonl"), &jsonl::<ScoredUtterance>(&scored))
        },
        |dir| serde_json::from_str(&read(&dir.join("report.json"))?).map_err(s),
    )?;

    let kv = cfg.to_kv();
    let meta = RunMeta {
        tool: "kd",
        version: env!("CARGO_PKG_VERSION"),
        config: kv.iter().collect(),
        stages: r.statuses.iter().map(|st| (st.stage, st.key.as_str())).collect(),
    };
    let meta_path = out.join("run.meta");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable") + "\n").map_err(io_err(&meta_path))?;

    Ok(PipelineOutcome {
        report,
        teacher_dev_wer: teacher_log.epochs.iter().filter_map(|e| e.dev_wer).reduce(f64::min),
        retained_fraction,
        student_log,
        stages: r.statuses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips() {
        let mut c = PipelineConfig::default();
        c.reseed(5);
        c.label_noise = 0.6;
        c.distill.lambda_threshold = None;
        let back = PipelineConfig::from_kv(&KvMap::parse(&c.to_kv().render()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(PipelineConfig::from_kv(&KvMap::default()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        for text in ["epochs = 3\n", "distill.temperature = 2\n", "student.heads = 1\n", "model.width = 3\n"] {
            assert!(PipelineConfig::from_kv(&KvMap::parse(text).unwrap()).is_err(), "{text}");
        }
    }

    #[test]
    fn dialect_overrides_replace_the_defaults() {
        let c = PipelineConfig::from_kv(&KvMap::parse("corpus.dialect.x = ب>پ\n").unwrap()).unwrap();
        assert_eq!(c.corpus.dialects.keys().collect::<Vec<_>>(), ["x"]);
    }

    #[test]
    fn keys_depend_on_parents_and_settings() {
        let a = stage_key("filter", &["abc"], "80");
        assert_eq!(a.len(), 16);
        assert_eq!(a, stage_key("filter", &["abc"], "80"));
        assert_ne!(a, stage_key("filter", &["abd"], "80"));
        assert_ne!(a, stage_key("filter", &["abc"], "40"));
        assert_ne!(a, stage_key("distill", &["abc"], "80"));
    }
}
