use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kd_core::analysis::{error_report, flag_corpus, FlagParams, Lexicon};
use kd_core::data::manifest::load_manifest;
use kd_core::data::synth::{add_frame_noise, synth_corpus, SynthConfig};
use kd_core::data::{stats_tsv, Utterance};
use kd_core::distill::eval::{pair_scores, parse_scored, score_report, EvalSet, ScoredUtterance};
use kd_core::distill::{
    data_scaling, evaluate, filter_by_wer, format_lambda, parse_lambda, pseudo_label, scaling_tsv, sweep_tsv,
    threshold_sweep, train_distill, train_teacher, DistillConfig, DistillInputs, PseudoLabeledSegment,
};
use kd_core::kv::KvMap;
use kd_core::metrics::DatasetGroup;
use kd_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use kd_core::model::student::init_student_from_teacher;
use kd_core::model::{SeqModel, Vocab};
use kd_core::pipeline::{run_pipeline, write_corpus, PipelineConfig};
use kd_core::rng::{derive_seed, label};
use kd_core::textnorm::{normalize, NormalizationMode, NormalizationRules};

#[derive(Parser)]
#[command(name = "kd", version, about = "Teacher-student distillation and Arabic-aware ASR scoring")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Overrides the seed of the command's config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, where noted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/dev/test corpus.
    GenCorpus,
    /// Per-dialect corpus statistics as TSV.
    Stats {
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
    },
    /// Normalize text line by line.
    Normalize {
        #[arg(long, default_value = "norm-nd")]
        mode: NormalizationMode,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Print the rule table instead.
        #[arg(long)]
        dump_rules: bool,
    },
    /// Score hypotheses against references.
    Score {
        #[arg(long, requires = "hyps", conflicts_with = "scores")]
        refs: Option<PathBuf>,
        #[arg(long)]
        hyps: Option<PathBuf>,
        /// Pre-paired score file as written by `evaluate`.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Score in one mode only; all modes by default.
        #[arg(long)]
        mode: Option<NormalizationMode>,
        #[arg(long, default_value = "benchmark")]
        group: DatasetGroup,
        /// Dataset name for references that do not carry one.
        #[arg(long, default_value = "data")]
        dataset: String,
    },
    /// Supervised training of a teacher on reference transcripts.
    TrainTeacher {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
    },
    /// Greedy teacher transcripts with their WER.
    Pseudolabel {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Extra frame noise seen by the teacher.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Apply a WER threshold to pseudo-labels.
    Filter {
        #[arg(long)]
        segments: PathBuf,
        /// Threshold in percent, or `none`.
        #[arg(long)]
        lambda: String,
    },
    /// Student from maximally spaced teacher layers.
    InitStudent {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student_el: usize,
        #[arg(long)]
        student_dl: usize,
    },
    /// Distill a student on filtered pseudo-labels.
    Distill {
        #[command(flatten)]
        run: DistillRun,
    },
    /// Decode evaluation sets and score them.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// `NAME=MANIFEST[:GROUP]`, repeatable.
        #[arg(long = "data", required = true)]
        data: Vec<String>,
    },
    /// One distillation run per threshold.
    Sweep {
        #[command(flatten)]
        run: DistillRun,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,80,none")]
        lambdas: Vec<String>,
    },
    /// Distillation on nested subsamples of the kept pseudo-labels.
    Scale {
        #[command(flatten)]
        run: DistillRun,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Error flags per dialect plus a review sample.
    ErrorReport {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 20)]
        sample: usize,
        /// Model name used in the report rows.
        #[arg(long, default_value = "model")]
        model: String,
        /// Manifest(s) whose references form the lexicon; defaults to the scored references.
        #[arg(long)]
        lexicon: Vec<PathBuf>,
    },
    /// Run every stage from corpus generation to evaluation, resuming finished stages.
    Pipeline,
}

#[derive(Args)]
struct DistillRun {
    #[arg(long)]
    teacher: PathBuf,
    /// Start from this checkpoint instead of teacher layers.
    #[arg(long, conflicts_with_all = ["student_el", "student_dl"])]
    student: Option<PathBuf>,
    #[arg(long, requires = "student_dl")]
    student_el: Option<usize>,
    #[arg(long, requires = "student_el")]
    student_dl: Option<usize>,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Frames the teacher sees, when different from `--train`.
    #[arg(long)]
    teacher_data: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let broken_pipe = e
            .chain()
            .any(|c| c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe));
        if broken_pipe {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn read_config(path: Option<&Path>) -> Result<KvMap> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            KvMap::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(KvMap::default()),
    }
}

fn out_dir(g: &Global) -> Result<&Path> {
    let dir = g.out.as_deref().context("--out is required for this command")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    args: Vec<String>,
    config: BTreeMap<String, String>,
}

/// Records the resolved configuration next to a command's outputs.
fn write_meta(path: &Path, command: &str, config: &KvMap) -> Result<()> {
    let meta = RunMeta {
        tool: "kd",
        version: env!("CARGO_PKG_VERSION"),
        command,
        args: std::env::args().skip(1).collect(),
        config: config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    };
    write(path, &(serde_json::to_string_pretty(&meta)? + "\n"))
}

fn load(path: &Path) -> Result<Vec<Utterance>> {
    load_manifest(path).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path) -> Result<SeqModel> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn read_segments(path: &Path) -> Result<Vec<PseudoLabeledSegment>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for i in items {
        out.push_str(&serde_json::to_string(i)?);
        out.push('\n');
    }
    Ok(out)
}

fn emit(g: &Global, text: &str) -> Result<()> {
    match &g.out {
        Some(p) => write(p, text),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let kv = read_config(g.config.as_deref())?;
    match &cli.command {
        Command::GenCorpus => {
            let mut c = SynthConfig::from_kv(&kv)?;
            if let Some(s) = g.seed {
                c.seed = s;
            }
            let dir = out_dir(g)?;
            let corpus = synth_corpus(&c)?;
            write_corpus(dir, &corpus).map_err(anyhow::Error::msg)?;
            let mut all = corpus.train.clone();
            all.extend(corpus.dev.iter().cloned());
            all.extend(corpus.tests.values().flatten().cloned());
            write(&dir.join("stats.tsv"), &stats_tsv(&all))?;
            write_meta(&dir.join("run.meta"), "gen-corpus", &c.to_kv())
        }
        Command::Stats { data } => {
            let mut all = Vec::new();
            for p in data {
                all.extend(load(p)?);
            }
            emit(g, &stats_tsv(&all))
        }
        Command::Normalize { mode, input, dump_rules } => {
            let mut out: Box<dyn Write> = match &g.out {
                Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
                None => Box::new(io::BufWriter::new(io::stdout().lock())),
            };
            if *dump_rules {
                NormalizationRules.dump_tsv(&mut out)?;
                return Ok(out.flush()?);
            }
            let reader: Box<dyn BufRead> = match input {
                Some(p) => Box::new(io::BufReader::new(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)),
                None => Box::new(io::stdin().lock()),
            };
            for line in reader.lines() {
                writeln!(out, "{}", normalize(&line?, *mode))?;
            }
            Ok(out.flush()?)
        }
        Command::Score { refs, hyps, scores, mode, group, dataset } => {
            let scored = match (refs, hyps, scores) {
                (Some(r), Some(h), None) => pair_scores(&fs::read_to_string(r)?, &fs::read_to_string(h)?, dataset)?,
                (None, None, Some(s)) => parse_scored(&fs::read_to_string(s)?)?,
                _ => bail!("give either --refs and --hyps, or --scores"),
            };
            let modes = match mode {
                Some(m) => vec![*m],
                None => NormalizationMode::ALL.to_vec(),
            };
            let report = score_report(&scored, &modes, |_| *group)?;
            match &g.out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    write(&dir.join("report.tsv"), &report.to_tsv())?;
                    write(&dir.join("report.jsonl"), &report.to_jsonl())
                }
                None => {
                    print!("{}", report.to_tsv());
                    Ok(())
                }
            }
        }
        Command::TrainTeacher { train, dev } => {
            let mut cfg = PipelineConfig::from_kv(&kv)?;
            if let Some(s) = g.seed {
                cfg.model.init_seed = s;
                cfg.teacher.seed = s;
            }
            let dir = out_dir(g)?;
            let (train, dev) = (load(train)?, load(dev)?);
            let chars: BTreeSet<char> = train.iter().chain(&dev).flat_map(|u| u.reference.chars()).collect();
            let frame_dim = train.first().context("empty training set")?.frames.cols;
            let init = cfg.model.build(Vocab::new(chars), frame_dim)?;
            let outcome = train_teacher(init, &train, &dev, &cfg.teacher)?;
            save_checkpoint(&outcome.model, dir.join("teacher.ckpt"))?;
            write(&dir.join("steps.jsonl"), &outcome.log.steps_jsonl())?;
            write(&dir.join("log.json"), &(serde_json::to_string_pretty(&outcome.log)? + "\n"))?;
            let mut meta = KvMap::default();
            meta.nest("model.", &cfg.model.to_kv());
            meta.nest("teacher.", &cfg.teacher.to_kv());
            write_meta(&dir.join("run.meta"), "train-teacher", &meta)?;
            outcome.check_target(cfg.teacher.target_dev_wer)?;
            Ok(())
        }
        Command::Pseudolabel { teacher, data, noise } => {
            let teacher = load_model(teacher)?;
            let mut data = load(data)?;
            if *noise > 0.0 {
                data = add_frame_noise(&data, *noise, derive_seed(g.seed.unwrap_or(0), &[label("label-noise")]));
            }
            let out = g.out.as_deref().context("--out SEGMENTS.jsonl is required")?;
            write(out, &jsonl(&pseudo_label(&teacher, &data))?)?;
            let mut meta = KvMap::default();
            meta.set("noise", noise);
            write_meta(&out.with_extension("meta"), "pseudolabel", &meta)
        }
        Command::Filter { segments, lambda } => {
            let lambda = parse_lambda(lambda).map_err(anyhow::Error::msg)?;
            let f = filter_by_wer(&read_segments(segments)?, lambda);
            if let Some(out) = &g.out {
                write(out, &jsonl(&f.segments)?)?;
            }
            print!(
                "lambda\tretained\ttotal\tretained_fraction\n{}\t{}\t{}\t{:.6}\n",
                format_lambda(lambda),
                f.retained_count(),
                f.segments.len(),
                f.retained_fraction
            );
            Ok(())
        }
        Command::InitStudent { teacher, student_el, student_dl } => {
            let s = init_student_from_teacher(&load_model(teacher)?, *student_el, *student_dl)?;
            let out = g.out.as_deref().context("--out CKPT is required")?;
            Ok(save_checkpoint(&s, out)?)
        }
        Command::Distill { run } => {
            let mut cfg = DistillConfig::from_kv(&kv)?;
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let dir = out_dir(g)?;
            let ctx = DistillContext::load(run)?;
            let filtered = filter_by_wer(&ctx.segments, cfg.lambda_threshold);
            let inputs = DistillInputs { segments: &filtered.segments, ..ctx.inputs() };
            let (student, log) = train_distill(inputs, ctx.student.clone(), &cfg)?;
            save_checkpoint(&student, dir.join("student.ckpt"))?;
            write(&dir.join("steps.jsonl"), &log.steps_jsonl())?;
            write(&dir.join("log.json"), &(serde_json::to_string_pretty(&log)? + "\n"))?;
            write_meta(&dir.join("run.meta"), "distill", &cfg.to_kv())
        }
        Command::Evaluate { model, data } => {
            let model = load_model(model)?;
            let dir = out_dir(g)?;
            let mut sets_data = Vec::new();
            for spec in data {
                let (name, rest) = spec.split_once('=').context("--data expects NAME=MANIFEST[:GROUP]")?;
                let (path, group) = match rest.rsplit_once(':') {
                    Some((p, grp)) if grp.parse::<DatasetGroup>().is_ok() => (p, grp.parse()?),
                    _ => (rest, DatasetGroup::Benchmark),
                };
                sets_data.push((name.to_string(), group, load(Path::new(path))?));
            }
            let sets: Vec<EvalSet<'_>> =
                sets_data.iter().map(|(n, grp, d)| EvalSet { name: n, group: *grp, data: d }).collect();
            let (report, scored) = evaluate(&model, &sets)?;
            write(&dir.join("report.tsv"), &report.to_tsv())?;
            write(&dir.join("report.jsonl"), &report.to_jsonl())?;
            write(&dir.join("scores.jsonl"), &jsonl::<ScoredUtterance>(&scored)?)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Sweep { run, lambdas } => {
            let mut cfg = DistillConfig::from_kv(&kv)?;
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let lambdas = lambdas.iter().map(|l| parse_lambda(l).map_err(anyhow::Error::msg)).collect::<Result<Vec<_>>>()?;
            let dir = out_dir(g)?;
            let ctx = DistillContext::load(run)?;
            let dev = [EvalSet { name: "dev", group: DatasetGroup::Benchmark, data: &ctx.dev }];
            let rows = threshold_sweep(ctx.inputs(), &ctx.student, &lambdas, &cfg, &dev)?;
            let table = sweep_tsv(&rows);
            write(&dir.join("sweep.tsv"), &table)?;
            write_meta(&dir.join("run.meta"), "sweep", &cfg.to_kv())?;
            print!("{table}");
            Ok(())
        }
        Command::Scale { run, sizes } => {
            let mut cfg = DistillConfig::from_kv(&kv)?;
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let dir = out_dir(g)?;
            let ctx = DistillContext::load(run)?;
            let dev = [EvalSet { name: "dev", group: DatasetGroup::Benchmark, data: &ctx.dev }];
            let rows = data_scaling(ctx.inputs(), &ctx.student, sizes, &cfg, &dev)?;
            let table = scaling_tsv(&rows);
            write(&dir.join("scaling.tsv"), &table)?;
            write_meta(&dir.join("run.meta"), "scale", &cfg.to_kv())?;
            print!("{table}");
            Ok(())
        }
        Command::ErrorReport { scores, sample, model, lexicon } => {
            let scored = parse_scored(&fs::read_to_string(scores).with_context(|| format!("reading {}", scores.display()))?)?;
            let lex = if lexicon.is_empty() {
                Lexicon::from_texts(scored.iter().map(|s| s.reference.as_str()))
            } else {
                let mut refs = Vec::new();
                for p in lexicon {
                    refs.extend(load(p)?.into_iter().map(|u| u.reference));
                }
                Lexicon::from_texts(refs.iter().map(String::as_str))
            };
            let (flagged, skipped) = flag_corpus(model, &scored, Some(&lex), &FlagParams::default());
            for id in &skipped {
                eprintln!("skipped {id}: reference is empty after normalization");
            }
            let report = error_report(&flagged, *sample, g.seed.unwrap_or(0));
            let dir = out_dir(g)?;
            write(&dir.join("errors.tsv"), &report.to_tsv())?;
            write(&dir.join("review.jsonl"), &report.samples_jsonl())?;
            let mut meta = KvMap::default();
            meta.set("sample", sample);
            meta.set("seed", g.seed.unwrap_or(0));
            write_meta(&dir.join("run.meta"), "error-report", &meta)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Pipeline => {
            let mut cfg = PipelineConfig::from_kv(&kv)?;
            if let Some(s) = g.seed {
                cfg.reseed(s);
            }
            let dir = out_dir(g)?;
            let outcome = run_pipeline(&cfg, dir)?;
            for st in &outcome.stages {
                eprintln!("{:<14} {} {}", st.stage, st.key, if st.skipped { "reused" } else { "ran" });
            }
            print!("{}", outcome.report.to_tsv());
            Ok(())
        }
    }
}

/// Loaded inputs shared by `distill`, `sweep` and `scale`.
struct DistillContext {
    teacher: SeqModel,
    student: SeqModel,
    segments: Vec<PseudoLabeledSegment>,
    train: Vec<Utterance>,
    teacher_train: Option<Vec<Utterance>>,
    dev: Vec<Utterance>,
}

impl DistillContext {
    fn load(run: &DistillRun) -> Result<Self> {
        let teacher = load_model(&run.teacher)?;
        let student = match (&run.student, run.student_el, run.student_dl) {
            (Some(p), _, _) => load_model(p)?,
            (None, Some(el), Some(dl)) => init_student_from_teacher(&teacher, el, dl)?,
            _ => bail!("give --student or both --student-el and --student-dl"),
        };
        Ok(Self {
            student,
            segments: read_segments(&run.segments)?,
            train: load(&run.train)?,
            teacher_train: run.teacher_data.as_deref().map(load).transpose()?,
            dev: load(&run.dev)?,
            teacher,
        })
    }

    fn inputs(&self) -> DistillInputs<'_> {
        DistillInputs {
            teacher: &self.teacher,
            teacher_frames: self.teacher_train.as_deref().unwrap_or(&self.train),
            student_frames: &self.train,
            segments: &self.segments,
            dev: &self.dev,
        }
    }
}
