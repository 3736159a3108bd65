//! Acceptance criteria 1-11, run in order with one PASS/FAIL line each.
//!
//! Built with `harness = false` so the criteria share one experiment fixture and print in a
//! fixed order. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kd_core::analysis::{flag_errors, ErrorCategory, FlagParams, Lexicon};
use kd_core::data::manifest::{load_manifest, manifest_text, parse_manifest, write_manifest, FramesStorage};
use kd_core::data::synth::{synth_corpus, SynthConfig, SynthCorpus};
use kd_core::data::{corpus_stats, shuffled_indices, Utterance};
use kd_core::distill::eval::{corpus_wer, EvalSet};
use kd_core::distill::{
    filter_by_wer, format_lambda, kl_loss, kl_to_teacher, pseudo_label, sweep_tsv, threshold_sweep, train_distill,
    train_teacher, DistillConfig, DistillInputs, PseudoLabeledSegment, SweepRow,
};
use kd_core::kv::KvMap;
use kd_core::metrics::{aggregate, edit_distance, DatasetGroup, ScorePair};
use kd_core::model::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use kd_core::model::student::{init_student_from_teacher, layer_indices};
use kd_core::model::{Example, LossDefinition, Mat, ModelConfig, SeqModel, TokenDistributions, Vocab};
use kd_core::pipeline::{run_pipeline, teacher_view, PipelineConfig};
use kd_core::rng::{label, stream};
use kd_core::textnorm::{normalize, NormalizationMode};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn out_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).expect("create acceptance output dir");
    dir
}

// -------------------------------------------------------------------------------------------
// 1. Edit distance against exhaustive search.

/// Minimum over every alignment, enumerated without memoization.
fn exhaustive_cost(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = exhaustive_cost(ra, rb) + usize::from(x != y);
            let del = exhaustive_cost(ra, b) + 1;
            let ins = exhaustive_cost(a, rb) + 1;
            diag.min(del).min(ins)
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 1000;
    for case in 0..cases {
        let alphabet = rng.random_range(1..=5u8);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let n = rng.random_range(0..=8);
            (0..n).map(|_| rng.random_range(0..alphabet)).collect()
        };
        let (r, h) = (draw(&mut rng), draw(&mut rng));
        let b = edit_distance(&r, &h);
        let want = exhaustive_cost(&r, &h);
        ensure(b.errors() == want, || format!("case {case}: {r:?} vs {h:?}: dp {} exhaustive {want}", b.errors()))?;
        ensure(b.reference_length == r.len() && r.len() + b.insertions == h.len() + b.deletions, || {
            format!("case {case}: inconsistent breakdown {b:?}")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:.2?}"))?;
    Ok(format!("{cases} cases match, {elapsed:.2?}"))
}

// -------------------------------------------------------------------------------------------
// 2. Normalization goldens and idempotence.

const DIACRITICS: [u32; 22] = [
    0x064B, 0x064C, 0x064D, 0x064E, 0x064F, 0x0650, 0x0651, 0x0652, 0x0653, 0x0654, 0x0655, 0x0656, 0x0657,
    0x0658, 0x0659, 0x065A, 0x065B, 0x065C, 0x065D, 0x065E, 0x065F, 0x0670,
];

/// `(input, orthographic, normalized, normalized without diacritics)`.
fn golden_cases() -> Vec<(String, String, String, String)> {
    let s = |x: &str| x.to_string();
    let mut cases = Vec::new();
    for cp in DIACRITICS {
        let d = char::from_u32(cp).unwrap();
        let marked = format!("ب{d}ت");
        cases.push((marked.clone(), marked.clone(), marked, s("بت")));
    }
    for v in ['\u{0622}', '\u{0623}', '\u{0625}', '\u{0671}'] {
        let word = format!("{v}حمد");
        cases.push((word.clone(), word, s("احمد"), s("احمد")));
    }
    let fixed: &[(&str, &str, &str, &str)] = &[
        ("أَحْمَد", "أَحْمَد", "اَحْمَد", "احمد"),
        ("إِلَى المَدْرَسَةِ", "إِلَى المَدْرَسَةِ", "اِلَى المَدْرَسَةِ", "الى المدرسة"),
        ("٠١٢٣٤٥٦٧٨٩", "٠١٢٣٤٥٦٧٨٩", "0123456789", "0123456789"),
        ("۰۱۲۳۴۵۶۷۸۹", "۰۱۲۳۴۵۶۷۸۹", "0123456789", "0123456789"),
        ("عام ٢٠٢٣", "عام ٢٠٢٣", "عام 2023", "عام 2023"),
        ("سنة ۱۴۰۲ و 2023", "سنة ۱۴۰۲ و 2023", "سنة 1402 و 2023", "سنة 1402 و 2023"),
        ("٣٫٥", "٣٫٥", "35", "35"),
        ("مرحبا hello عالم", "مرحبا hello عالم", "مرحبا عالم", "مرحبا عالم"),
        ("WhatsApp", "WhatsApp", "", ""),
        ("كلمةabc", "كلمةabc", "كلمة", "كلمة"),
        ("café مقهى", "café مقهى", "مقهى", "مقهى"),
        ("ＡＢＣ نص", "ＡＢＣ نص", "نص", "نص"),
        ("abc 123", "abc 123", "123", "123"),
        ("Hello, World!", "Hello, World!", "", ""),
        ("كــتـاب", "كــتـاب", "كتاب", "كتاب"),
        ("ـــ", "ـــ", "", ""),
        ("مرحبا، كيف الحال؟", "مرحبا، كيف الحال؟", "مرحبا كيف الحال", "مرحبا كيف الحال"),
        ("«نعم»", "«نعم»", "نعم", "نعم"),
        ("(قال) - نعم!", "(قال) - نعم!", "قال نعم", "قال نعم"),
        ("ص.ب", "ص.ب", "صب", "صب"),
        ("أولا؛ ثانيا", "أولا؛ ثانيا", "اولا ثانيا", "اولا ثانيا"),
        ("٥٠٪", "٥٠٪", "50", "50"),
        ("$5 دولار", "$5 دولار", "5 دولار", "5 دولار"),
        ("جميل 😀", "جميل 😀", "جميل", "جميل"),
        ("می\u{200C}خواهم", "می\u{200C}خواهم", "میخواهم", "میخواهم"),
        ("\u{200F}نص\u{200E}", "\u{200F}نص\u{200E}", "نص", "نص"),
        ("  ذهب   الولد \t\n", "ذهب الولد", "ذهب الولد", "ذهب الولد"),
        ("ذهب\u{00A0}الولد", "ذهب الولد", "ذهب الولد", "ذهب الولد"),
        ("ب \u{064E} ت", "ب \u{064E} ت", "ب \u{064E} ت", "ب ت"),
        ("مؤمن شيء سئل", "مؤمن شيء سئل", "مؤمن شيء سئل", "مؤمن شيء سئل"),
        ("مدرسة على", "مدرسة على", "مدرسة على", "مدرسة على"),
        ("", "", "", ""),
        (" \t ", "", "", ""),
        ("قُرْآن", "قُرْآن", "قُرْان", "قران"),
    ];
    for (i, o, n, nd) in fixed {
        cases.push((s(i), s(o), s(n), s(nd)));
    }
    cases
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..24);
    (0..len)
        .map(|_| match rng.random_range(0..6) {
            0 => char::from_u32(rng.random_range(0x0600..0x0700)).unwrap(),
            1 => [' ', '\t', '\n', '\u{00A0}', '\u{3000}'][rng.random_range(0..5)],
            2 => char::from_u32(rng.random_range(0x20..0x250)).unwrap(),
            3 => char::from_u32(rng.random_range(0x2000..0x2070)).unwrap(),
            _ => loop {
                if let Some(c) = char::from_u32(rng.random_range(0..0x110000)) {
                    break c;
                }
            },
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let cases = golden_cases();
    ensure(cases.len() >= 50, || format!("only {} golden strings", cases.len()))?;
    for (input, ortho, norm, nd) in &cases {
        for (mode, want) in [
            (NormalizationMode::Orthographic, ortho),
            (NormalizationMode::Normalized, norm),
            (NormalizationMode::NormalizedNoDiacritics, nd),
        ] {
            let got = normalize(input, mode);
            ensure(got.as_bytes() == want.as_bytes(), || format!("{input:?} under {mode}: got {got:?}, want {want:?}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fuzz = 10_000;
    for _ in 0..fuzz {
        let text = random_text(&mut rng);
        for mode in NormalizationMode::ALL {
            let once = normalize(&text, mode);
            ensure(normalize(&once, mode) == once, || format!("{text:?} is not idempotent under {mode}"))?;
            ensure(once.trim() == once && !once.contains("  "), || format!("{text:?} leaves stray whitespace"))?;
        }
    }
    Ok(format!("{} goldens x 3 modes, {fuzz} idempotence strings", cases.len()))
}

// -------------------------------------------------------------------------------------------
// 3. Table arithmetic.

fn criterion_3() -> Outcome {
    let mode = NormalizationMode::Orthographic;
    let report = aggregate([
        ("bench".to_string(), DatasetGroup::Benchmark, mode, ScorePair::new(42.0, 25.7)),
        ("house".to_string(), DatasetGroup::InHouse, mode, ScorePair::new(68.2, 38.9)),
    ])
    .map_err(err)?;
    let overall = report.overall_average[&mode].to_string();
    ensure(overall == "55.1/32.3", || format!("overall {overall}"))?;

    // 750 utterances of 11 words and 65 of 10: 8,900 words in 815 utterances.
    let data: Vec<Utterance> = (0..815)
        .map(|i| Utterance {
            id: format!("u{i}"),
            reference: vec!["كلمة"; if i < 750 { 11 } else { 10 }].join(" "),
            dataset: "d".into(),
            dialect: None,
            frames: Mat::zeros(1, 1),
        })
        .collect();
    let stats = corpus_stats(&data);
    let per_utt = format!("{:.2}", stats.words_per_utterance());
    ensure(stats.words == 8900 && per_utt == "10.92", || format!("{} words, {per_utt} per utterance", stats.words))?;
    Ok(format!("overall {overall}, {per_utt} words/utt"))
}

// -------------------------------------------------------------------------------------------
// 4. Gradients against central differences.

fn toy_model(seed: u64) -> SeqModel {
    let vocab = Vocab::new("abcde".chars());
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        ffn_dim: 16,
        max_target_len: 16,
        max_source_len: 16,
        frame_dim: 3,
    };
    SeqModel::random(cfg, vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn toy_batch(student: &SeqModel, teacher: &SeqModel, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|_| {
            let rows = rng.random_range(2..6);
            let frames = Mat::from_vec(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
            let tokens: Vec<u32> =
                (0..rng.random_range(1..5)).map(|_| rng.random_range(3..student.config.vocab_size as u32)).collect();
            let mut ex = Example { frames, tokens, teacher_log_probs: None };
            ex.teacher_log_probs = Some(teacher.log_probs(&ex.frames, &ex.decoder_input()).unwrap());
            ex
        })
        .collect()
}

fn nudge(model: &mut SeqModel, mut index: usize, delta: f64) {
    for p in model.weights.params_mut() {
        if index < p.data.len() {
            p.data[index] += delta;
            return;
        }
        index -= p.data.len();
    }
}

fn flat_gradient(model: &SeqModel, batch: &[Example], loss: LossDefinition) -> Vec<f64> {
    let (_, g) = model.loss_gradients(batch, loss).unwrap();
    g.params().iter().flat_map(|p| p.data.iter().copied()).collect()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let loss = LossDefinition::Distill { alpha_kl: 0.8, alpha_pl: 1.0 };
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let model = toy_model(10 + seed);
        let teacher = toy_model(20 + seed);
        let batch = toy_batch(&model, &teacher, 30 + seed);
        let analytic = flat_gradient(&model, &batch, loss);
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let mut probe = model.clone();
        for _ in 0..100 {
            let i = rng.random_range(0..analytic.len());
            nudge(&mut probe, i, eps);
            let up = probe.loss(&batch, loss).unwrap().total;
            nudge(&mut probe, i, -2.0 * eps);
            let down = probe.loss(&batch, loss).unwrap().total;
            nudge(&mut probe, i, eps);
            let numeric = (up - down) / (2.0 * eps);
            // The floor keeps near-zero gradients from turning rounding noise into large ratios.
            let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            ensure(rel < 1e-5, || format!("seed {seed} param {i}: analytic {} numeric {numeric}", analytic[i]))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.2?}"))?;
    Ok(format!("300 parameters, worst relative error {worst:.2e}, {elapsed:.2?}"))
}

// -------------------------------------------------------------------------------------------
// 5. Loss identities.

fn random_distribution(rng: &mut ChaCha8Rng, v: usize, sparse: bool) -> Vec<f64> {
    let mut p: Vec<f64> = (0..v)
        .map(|_| if sparse && rng.random_bool(0.3) { 0.0 } else { rng.random_range(1e-3..1.0) })
        .collect();
    if p.iter().all(|&x| x == 0.0) {
        p[0] = 1.0;
    }
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

fn one_position(p: Vec<f64>) -> TokenDistributions {
    TokenDistributions(Mat::from_vec(1, p.len(), p))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs = 10_000;
    for i in 0..pairs {
        let v = rng.random_range(2..40);
        let q = random_distribution(&mut rng, v, true);
        let p = random_distribution(&mut rng, v, false);
        let self_kl = kl_loss(&[one_position(p.clone())], &[one_position(p.clone())]).map_err(err)?;
        let kl = kl_loss(&[one_position(q)], &[one_position(p)]).map_err(err)?;
        ensure(self_kl.abs() <= 1e-9, || format!("pair {i}: KL(p,p) = {self_kl}"))?;
        ensure(kl >= 0.0, || format!("pair {i}: KL = {kl}"))?;
    }

    let (teacher, corpus) = small_setup();
    let segments = pseudo_label(&teacher, &corpus.train);
    let student = init_student_from_teacher(&teacher, 1, 1).map_err(err)?;
    let cfg = DistillConfig { epochs: 3, batch_size: 8, learning_rate: 3e-3, warmup_steps: 4, lambda_threshold: None, ..DistillConfig::default() };
    let inputs = DistillInputs {
        teacher: &teacher,
        teacher_frames: &corpus.train,
        student_frames: &corpus.train,
        segments: &segments,
        dev: &corpus.dev,
    };
    let (_, log) = train_distill(inputs, student, &cfg).map_err(err)?;
    ensure(!log.steps.is_empty(), || "no steps logged".into())?;
    for s in &log.steps {
        let want = 0.8 * s.kl + 1.0 * s.pl;
        ensure((s.kd - want).abs() <= 1e-6 * want.abs().max(f64::MIN_POSITIVE), || {
            format!("step {}: kd {} vs {want}", s.step, s.kd)
        })?;
    }

    let model = toy_model(50);
    let batch = toy_batch(&model, &toy_model(51), 52);
    let both = flat_gradient(&model, &batch, LossDefinition::Distill { alpha_kl: 0.8, alpha_pl: 1.0 });
    let kl_only = flat_gradient(&model, &batch, LossDefinition::Distill { alpha_kl: 1.0, alpha_pl: 0.0 });
    let pl_only = flat_gradient(&model, &batch, LossDefinition::Distill { alpha_kl: 0.0, alpha_pl: 1.0 });
    for (i, ((b, k), p)) in both.iter().zip(&kl_only).zip(&pl_only).enumerate() {
        let want = 0.8 * k + p;
        ensure((b - want).abs() <= 1e-9 * (1.0 + want.abs()), || format!("gradient {i}: {b} vs {want}"))?;
    }
    Ok(format!("{pairs} pairs, {} logged steps, {} gradient entries linear", log.steps.len(), both.len()))
}

/// A briefly trained 2+2 teacher on a small corpus, for checks that need real training logs.
fn small_setup() -> (SeqModel, SynthCorpus) {
    let cfg = PipelineConfig::from_kv(
        &KvMap::parse(
            "corpus.train_size = 64\ncorpus.dev_size = 8\ncorpus.test_size = 2\ncorpus.max_words = 2\n\
             model.d_model = 8\nmodel.ffn_dim = 16\nmodel.encoder_layers = 2\nmodel.decoder_layers = 2\n",
        )
        .unwrap(),
    )
    .unwrap();
    let corpus = synth_corpus(&cfg.corpus).unwrap();
    let init = cfg.model.build(Vocab::new(cfg.corpus.symbols()), cfg.corpus.frame_dim).unwrap();
    let teacher_cfg = kd_core::distill::TeacherConfig { max_epochs: 2, batch_size: 8, ..cfg.teacher };
    let teacher = train_teacher(init, &corpus.train, &corpus.dev, &teacher_cfg).unwrap().model;
    (teacher, corpus)
}

// -------------------------------------------------------------------------------------------
// 6. Layer selection.

fn criterion_6() -> Outcome {
    let a = layer_indices(32, 16);
    ensure(a == [0, 2, 4, 6, 8, 10, 12, 14, 17, 19, 21, 23, 25, 27, 29, 31], || format!("(32,16) -> {a:?}"))?;
    let b = layer_indices(32, 8);
    ensure(b == [0, 4, 9, 13, 18, 22, 27, 31], || format!("(32,8) -> {b:?}"))?;
    for t in 2..=48 {
        for s in 2..=t {
            let idx = layer_indices(t, s);
            ensure(idx.len() == s && idx[0] == 0 && idx[s - 1] == t - 1, || format!("({t},{s}) -> {idx:?}"))?;
            ensure(idx.windows(2).all(|w| w[0] < w[1]), || format!("({t},{s}) not increasing: {idx:?}"))?;
        }
        ensure(layer_indices(t, t) == (0..t).collect::<Vec<_>>(), || format!("({t},{t}) is not the identity"))?;
    }
    let teacher = toy_model(60);
    let copy = init_student_from_teacher(&teacher, 2, 2).map_err(err)?;
    ensure(to_bytes(&copy) == to_bytes(&teacher) && copy == teacher, || "T=S student differs from teacher".into())?;
    Ok("both reference selections, endpoints for T <= 48, bitwise T=S copy".into())
}

// -------------------------------------------------------------------------------------------
// 7. Filtering laws.

fn segment(i: usize, wer: Option<f64>) -> PseudoLabeledSegment {
    PseudoLabeledSegment {
        id: format!("s{i}"),
        reference: "ا".into(),
        hypothesis: "ا".into(),
        wer,
        kept: wer.is_some(),
        diagnostic: None,
    }
}

fn criterion_7() -> Outcome {
    const LAMBDAS: [Option<f64>; 5] = [Some(10.0), Some(20.0), Some(40.0), Some(80.0), None];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let segments: Vec<PseudoLabeledSegment> = (0..10_000)
        .map(|i| {
            let wer = match rng.random_range(0..4) {
                0 => [10.0, 20.0, 40.0, 80.0][rng.random_range(0..4)],
                1 => rng.random_range(0..12) as f64 * 12.5,
                _ => rng.random_range(0.0..250.0),
            };
            segment(i, Some(wer))
        })
        .collect();
    let kept: Vec<Vec<bool>> =
        LAMBDAS.iter().map(|&l| filter_by_wer(&segments, l).segments.iter().map(|s| s.kept).collect()).collect();
    for w in 0..LAMBDAS.len() - 1 {
        let subset = kept[w].iter().zip(&kept[w + 1]).all(|(a, b)| !a || *b);
        ensure(subset, || {
            format!("kept set at {} is not inside {}", format_lambda(LAMBDAS[w]), format_lambda(LAMBDAS[w + 1]))
        })?;
    }
    for (li, l) in LAMBDAS.iter().enumerate() {
        if let Some(l) = l {
            for (s, k) in segments.iter().zip(&kept[li]) {
                ensure(*k == (s.wer.unwrap() <= *l), || format!("{} at lambda {l}", s.id))?;
            }
        }
    }
    let none = filter_by_wer(&segments, None);
    ensure(none.retained_fraction == 1.0, || format!("lambda none keeps {}", none.retained_fraction))?;
    let boundary = segments.iter().filter(|s| [10.0, 20.0, 40.0, 80.0].contains(&s.wer.unwrap())).count();

    let mut with_failures = segments.clone();
    with_failures.push(segment(10_000, None));
    let f = filter_by_wer(&with_failures, None);
    ensure(!f.segments[10_000].kept, || "a failed segment was kept".into())?;
    Ok(format!("10000 segments, {boundary} on a boundary"))
}

// -------------------------------------------------------------------------------------------
// 8 and 9. The desk-scale experiment.

const SEEDS: u64 = 5;

struct Experiment {
    corpus: SynthCorpus,
    config: PipelineConfig,
    teacher: SeqModel,
    teacher_dev_wer: f64,
    teacher_time: Duration,
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let config = PipelineConfig::default();
        let corpus = synth_corpus(&config.corpus).expect("corpus");
        let init = config.model.build(Vocab::new(config.corpus.symbols()), config.corpus.frame_dim).expect("model");
        let outcome = train_teacher(init, &corpus.train, &corpus.dev, &config.teacher).expect("teacher");
        let teacher_dev_wer = corpus_wer(&outcome.model, &corpus.dev).expect("teacher dev WER");
        Experiment { corpus, config, teacher: outcome.model, teacher_dev_wer, teacher_time: start.elapsed() }
    })
}

fn random_student(like: &SeqModel, seed: u64) -> SeqModel {
    SeqModel::random(like.config.clone(), like.vocab.clone(), &mut stream(seed, &[label("random-student")])).unwrap()
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let x = experiment();
    let (train, dev) = (&x.corpus.train, &x.corpus.dev);
    ensure(train.len() == 5000 && dev.len() == 500, || format!("corpus is {}/{}", train.len(), dev.len()))?;
    ensure(x.teacher_dev_wer < 10.0, || format!("teacher dev WER {:.2} is not below 10", x.teacher_dev_wer))?;

    let segments = pseudo_label(&x.teacher, train);
    let filtered = filter_by_wer(&segments, Some(80.0));
    let init = init_student_from_teacher(&x.teacher, x.config.student_encoder_layers, x.config.student_decoder_layers)
        .map_err(err)?;
    let inputs = DistillInputs {
        teacher: &x.teacher,
        teacher_frames: train,
        student_frames: train,
        segments: &filtered.segments,
        dev,
    };
    let mut table = String::from("seed\tkl0_init\tkl0_random\tdev_wer_init\tdev_wer_random\n");
    let (mut bound_ok, mut beats_random, mut lower_kl) = (0, 0, 0);
    for seed in 0..SEEDS {
        let cfg = DistillConfig { seed, lambda_threshold: Some(80.0), ..x.config.distill.clone() };
        let random = random_student(&init, seed);
        let probe: Vec<PseudoLabeledSegment> =
            shuffled_indices(segments.len(), seed).into_iter().take(500).map(|i| segments[i].clone()).collect();
        let kl_init = kl_to_teacher(&x.teacher, &init, train, &probe).map_err(err)?;
        let kl_random = kl_to_teacher(&x.teacher, &random, train, &probe).map_err(err)?;
        let (_, log_init) = train_distill(inputs, init.clone(), &cfg).map_err(err)?;
        let (_, log_random) = train_distill(inputs, random, &cfg).map_err(err)?;
        ensure(log_init.steps.len() == log_random.steps.len(), || "step budgets differ".into())?;
        let (w_init, w_random) = (log_init.final_dev_wer().unwrap(), log_random.final_dev_wer().unwrap());
        bound_ok += usize::from(w_init <= x.teacher_dev_wer + 15.0);
        beats_random += usize::from(w_init < w_random);
        lower_kl += usize::from(kl_init < kl_random);
        writeln!(table, "{seed}\t{kl_init:.4}\t{kl_random:.4}\t{w_init:.2}\t{w_random:.2}").unwrap();
    }
    fs::write(out_dir().join("experiment.tsv"), &table).map_err(err)?;
    print!("{table}");
    let elapsed = start.elapsed() + x.teacher_time;
    ensure(bound_ok == SEEDS as usize, || format!("(a) student within teacher + 15 on {bound_ok}/{SEEDS} seeds"))?;
    ensure(beats_random >= 4, || format!("(b) beats random init on {beats_random}/{SEEDS} seeds"))?;
    ensure(lower_kl >= 4, || format!("(c) lower step-0 KL on {lower_kl}/{SEEDS} seeds"))?;
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("took {elapsed:.0?}"))?;
    Ok(format!(
        "teacher dev WER {:.2}; (a) {bound_ok}/{SEEDS} (b) {beats_random}/{SEEDS} (c) {lower_kl}/{SEEDS}; {:.0?} incl. teacher {:.0?}",
        x.teacher_dev_wer,
        elapsed,
        x.teacher_time
    ))
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let x = experiment();
    let label_noise = 0.6;
    let noisy = teacher_view(&x.corpus.train, label_noise, x.config.corpus.seed);
    let segments = pseudo_label(&x.teacher, &noisy);
    let init = init_student_from_teacher(&x.teacher, x.config.student_encoder_layers, x.config.student_decoder_layers)
        .map_err(err)?;
    let inputs = DistillInputs {
        teacher: &x.teacher,
        teacher_frames: &noisy,
        student_frames: &x.corpus.train,
        segments: &segments,
        dev: &x.corpus.dev,
    };
    let lambdas = [None, Some(80.0), Some(40.0), Some(20.0), Some(10.0)];
    let dev = [EvalSet { name: "dev", group: DatasetGroup::Benchmark, data: &x.corpus.dev }];
    let mut wins = 0;
    let mut summary = Vec::new();
    let mut fractions = Vec::new();
    for seed in 0..SEEDS {
        let cfg = DistillConfig { seed, ..x.config.distill.clone() };
        let rows = threshold_sweep(inputs, &init, &lambdas, &cfg, &dev).map_err(err)?;
        let table = sweep_tsv(&rows);
        fs::write(out_dir().join(format!("sweep-seed{seed}.tsv")), &table).map_err(err)?;
        if seed == 0 {
            print!("{table}");
        }
        let wer_at = |r: &SweepRow| r.report.per_dataset["dev"].scores[&kd_core::distill::FILTER_MODE].wer;
        let none = wer_at(&rows[0]);
        let best_filtered = rows[1..4].iter().map(wer_at).fold(f64::INFINITY, f64::min);
        wins += usize::from(best_filtered < none);
        summary.push(format!("{none:.1}->{best_filtered:.1}"));
        fractions = rows.iter().map(|r| r.retained_fraction).collect();
    }
    ensure(fractions.windows(2).all(|w| w[0] > w[1]), || format!("retained fractions {fractions:?}"))?;
    ensure(wins >= 3, || format!("a filtered setting beats none on {wins}/{SEEDS} seeds ({})", summary.join(", ")))?;
    Ok(format!(
        "retained {:?}; filtered beats none on {wins}/{SEEDS} seeds ({}); {:.0?}",
        fractions.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>(),
        summary.join(", "),
        start.elapsed()
    ))
}

// -------------------------------------------------------------------------------------------
// 10. Error flags.

fn criterion_10() -> Outcome {
    use ErrorCategory::*;
    let params = FlagParams::default();
    let lexicon = Lexicon::from_texts([
        "ذهب الولد الى المدرسة",
        "كتب الولد الدرس",
        "المدرسة الجديدة الكبيرة في هذا ال حي جدا",
        "قفز",
    ]);
    let long = "ب".repeat(100);
    let cases: Vec<(&str, String, String, Option<&Lexicon>, Vec<ErrorCategory>)> = vec![
        ("empty", "ذهب الولد الى المدرسة".into(), "".into(), Some(&lexicon), vec![Empty, HighCer]),
        ("punctuation only", "ذهب الولد".into(), "... ؟".into(), Some(&lexicon), vec![Empty, HighCer]),
        ("repetition", "ذهب الولد الى المدرسة".into(), "ذهب الولد الى الى الى الى".into(), Some(&lexicon), vec![Deterioration]),
        ("gibberish", "كتب الولد الدرس".into(), "كتبب الولدد الدرسس".into(), Some(&lexicon), vec![Deterioration]),
        ("gibberish without lexicon", "كتب الولد الدرس".into(), "كتبب الولدد الدرسس".into(), None, vec![]),
        ("incomplete", "المدرسة الجديدة الكبيرة في هذا ال حي جدا".into(), "المدرسة الجديدة الكبيرة".into(), Some(&lexicon), vec![Incomplete]),
        ("short but wrong", "المدرسة الجديدة الكبيرة في هذا ال حي جدا".into(), "جدا حي هذا".into(), Some(&lexicon), vec![HighCer]),
        ("high CER", "ذهب".into(), "قفز".into(), Some(&lexicon), vec![HighCer]),
        ("multi-flag", "ذهب".into(), "قفز قفز قفز قفز".into(), Some(&lexicon), vec![Deterioration, HighCer]),
        ("CER exactly 75", long.clone(), "ب".repeat(25), None, vec![]),
        ("CER 76", long.clone(), "ب".repeat(24), None, vec![HighCer]),
        ("correct", "ذهب الولد".into(), "ذَهَبَ الوَلَد".into(), Some(&lexicon), vec![]),
    ];
    for (name, reference, hypothesis, lex, want) in &cases {
        let flags = flag_errors(reference, hypothesis, *lex, &params).map_err(err)?;
        let got: Vec<ErrorCategory> = flags.iter().map(|f| f.category).collect();
        ensure(&got == want, || format!("{name}: got {got:?}, want {want:?}"))?;
    }
    ensure(flag_errors("...", "x", None, &params).is_err(), || "empty reference was flagged".into())?;
    Ok(format!("{} fixtures", cases.len()))
}

// -------------------------------------------------------------------------------------------
// 11. Determinism and round-trips.

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;

    let model = toy_model(70);
    let bytes = to_bytes(&model);
    let back = from_bytes(&bytes).map_err(err)?;
    ensure(back == model && to_bytes(&back) == bytes, || "checkpoint bytes round-trip differs".into())?;
    let teacher = &experiment().teacher;
    let path = tmp.path().join("teacher.ckpt");
    save_checkpoint(teacher, &path).map_err(err)?;
    let loaded = load_checkpoint(&path).map_err(err)?;
    ensure(&loaded == teacher && fs::read(&path).map_err(err)? == to_bytes(teacher), || "checkpoint file differs".into())?;

    let cfg = PipelineConfig::from_kv(
        &KvMap::parse(
            "corpus.train_size = 40\ncorpus.dev_size = 8\ncorpus.test_size = 4\ncorpus.max_words = 2\n\
             model.d_model = 8\nmodel.ffn_dim = 12\nmodel.encoder_layers = 2\nmodel.decoder_layers = 2\n\
             teacher.max_epochs = 2\nteacher.batch_size = 8\nteacher.target_dev_wer = 1000\n\
             student.encoder_layers = 1\nstudent.decoder_layers = 1\ndistill.epochs = 2\ndistill.batch_size = 8\n\
             distill.lambda_threshold = none\n",
        )
        .unwrap(),
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run_pipeline(&cfg, &a).map_err(err)?;
    let rb = run_pipeline(&cfg, &b).map_err(err)?;
    ensure(ra.student_log == rb.student_log, || "same-seed loss logs differ".into())?;
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    ensure(sa == sb, || "same-seed pipeline outputs differ".into())?;
    let corpus_a = synth_corpus(&SynthConfig { train_size: 300, ..SynthConfig::default() }).map_err(err)?;
    let corpus_b = synth_corpus(&SynthConfig { train_size: 300, ..SynthConfig::default() }).map_err(err)?;
    ensure(corpus_a == corpus_b, || "same-seed corpora differ".into())?;

    let data = &corpus_a.train[..50];
    let text = manifest_text(data, &FramesStorage::Inline);
    let parsed = parse_manifest(&text, None).map_err(err)?;
    ensure(parsed == data && manifest_text(&parsed, &FramesStorage::Inline) == text, || "inline manifest round-trip".into())?;
    let manifest = tmp.path().join("m.jsonl");
    write_manifest(&manifest, data, &FramesStorage::Sidecar("m.frames".into())).map_err(err)?;
    let reloaded = load_manifest(&manifest).map_err(err)?;
    ensure(reloaded == data, || "sidecar manifest round-trip".into())?;
    Ok(format!("checkpoints bitwise, {} pipeline files identical, manifests stable", sa.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("edit distance vs exhaustive search", criterion_1),
        ("normalization goldens and idempotence", criterion_2),
        ("table arithmetic", criterion_3),
        ("gradient check", criterion_4),
        ("loss identities", criterion_5),
        ("layer selection", criterion_6),
        ("filtering laws", criterion_7),
        ("desk-scale distillation", criterion_8),
        ("threshold sweep", criterion_9),
        ("error flags", criterion_10),
        ("determinism and round-trips", criterion_11),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{:.1?}]", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{:.1?}]", start.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
