//! A small encoder-decoder transformer over continuous feature frames, with exact gradients.
//!
//! Parameters live in `f64` buffers but are kept `f32`-representable at all times (random init
//! and every optimizer update round to `f32`), so checkpoints store them losslessly as 32-bit
//! floats. All forward/backward arithmetic is done in `f64`.

pub mod checkpoint;
pub mod mat;
mod net;
pub mod optim;
pub mod params;
pub mod student;
pub mod vocab;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::mat::Mat;
pub use self::params::Weights;
pub use self::vocab::{Vocab, BOS, EOS, UNK};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what} length {len} exceeds the limit {max}")]
    SequenceTooLong { what: &'static str, len: usize, max: usize },
    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("frame dimension {got} does not match the model input dimension {expected}")]
    FrameDim { got: usize, expected: usize },
    #[error("empty source sequence")]
    EmptySource,
    #[error("incompatible configs: {0}")]
    IncompatibleConfig(String),
    #[error("student wants {student} {stack} layers but the teacher only has {teacher}")]
    StudentLargerThanTeacher { stack: &'static str, student: usize, teacher: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("teacher distributions missing or mis-shaped for a distillation loss")]
    MissingTeacher,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture description. Layer counts are the only thing that differs between a teacher and
/// its students.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Decoder positions including the leading BOS.
    pub max_target_len: usize,
    pub max_source_len: usize,
    /// Width of one input feature frame.
    pub frame_dim: usize,
}

impl ModelConfig {
    /// Upper bound on any single dimension accepted from untrusted input.
    const MAX_DIM: usize = 1 << 16;

    /// Default desk-scale shape: d_model 64, 4 heads, ffn 128, 225 target positions.
    pub fn toy(vocab_size: usize, frame_dim: usize, encoder_layers: usize, decoder_layers: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            encoder_layers,
            decoder_layers,
            ffn_dim: 128,
            max_target_len: 225,
            max_source_len: 1024,
            frame_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder_layers and decoder_layers must be at least 1");
        }
        if self.max_target_len == 0 || self.max_source_len == 0 {
            return bad("max_target_len and max_source_len must be at least 1");
        }
        if self.vocab_size <= vocab::N_SPECIAL || self.ffn_dim == 0 || self.frame_dim == 0 {
            return bad("vocab_size, ffn_dim and frame_dim must be positive");
        }
        let dims = [
            self.vocab_size,
            self.d_model,
            self.ffn_dim,
            self.frame_dim,
            self.encoder_layers,
            self.decoder_layers,
            self.max_target_len,
            self.max_source_len,
        ];
        if dims.iter().any(|&d| d > Self::MAX_DIM) {
            return bad("dimension too large");
        }
        Ok(())
    }

    /// Number of scalars a model with this config holds.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let lin = |i: usize, o: usize| i * o + o;
        let ln = 2 * d;
        let attn = 4 * lin(d, d);
        let ffn = lin(d, self.ffn_dim) + lin(self.ffn_dim, d);
        let enc_layer = 2 * ln + attn + ffn;
        let dec_layer = 3 * ln + 2 * attn + ffn;
        lin(self.frame_dim, d)
            + self.encoder_layers * enc_layer
            + ln
            + self.vocab_size * d
            + self.decoder_layers * dec_layer
            + ln
            + lin(d, self.vocab_size)
    }
}

/// Per-position next-token probabilities, one row per decoder position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistributions(pub Mat);

impl TokenDistributions {
    pub fn len(&self) -> usize {
        self.0.rows
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows == 0
    }

    pub fn position(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn vocab_size(&self) -> usize {
        self.0.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub weights: Weights,
}

/// One training example: source frames, transcript token ids (no BOS/EOS), and optionally the
/// teacher's log-probabilities for every decoder position (`len + 1` rows).
#[derive(Debug, Clone)]
pub struct Example {
    pub frames: Mat,
    pub tokens: Vec<u32>,
    pub teacher_log_probs: Option<Mat>,
}

impl Example {
    pub fn decoder_input(&self) -> Vec<u32> {
        std::iter::once(BOS).chain(self.tokens.iter().copied()).collect()
    }

    pub fn targets(&self) -> Vec<u32> {
        self.tokens.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossDefinition {
    /// Negative log-likelihood of the target tokens.
    CrossEntropy,
    /// `alpha_kl * KL(teacher || student) + alpha_pl * NLL(targets)`.
    Distill { alpha_kl: f64, alpha_pl: f64 },
}

/// Batch-mean loss and its components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub kl: f64,
    pub pl: f64,
}

/// Fixed chunking keeps the gradient summation order independent of the thread count.
const GRAD_CHUNK: usize = 8;

impl SeqModel {
    pub fn random<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary has {} entries but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let weights = Weights::random(&config, rng);
        Ok(Self { config, vocab, weights })
    }

    /// Verifies every tensor shape against the config and that all values are finite.
    pub fn audit(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let expected = Weights::zeros(&self.config);
        let want = expected.params();
        let got = self.weights.params();
        if want.len() != got.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for (w, g) in want.iter().zip(&got) {
            if w.name != g.name || w.dims != g.dims || g.data.len() != w.data.len() {
                return Err(ModelError::InvalidConfig(format!("tensor {} has shape {:?}", g.name, g.dims)));
            }
            if g.data.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::InvalidConfig(format!("tensor {} holds non-finite values", g.name)));
            }
        }
        Ok(())
    }

    fn check_source(&self, frames: &Mat) -> Result<(), ModelError> {
        if frames.rows == 0 {
            return Err(ModelError::EmptySource);
        }
        if frames.cols != self.config.frame_dim {
            return Err(ModelError::FrameDim { got: frames.cols, expected: self.config.frame_dim });
        }
        if frames.rows > self.config.max_source_len {
            return Err(ModelError::SequenceTooLong { what: "source", len: frames.rows, max: self.config.max_source_len });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_target_len {
            return Err(ModelError::SequenceTooLong { what: "target", len: tokens.len(), max: self.config.max_target_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Teacher-forced next-token distributions for every position of `decoder_input`
    /// (which normally starts with BOS).
    pub fn forward(&self, frames: &Mat, decoder_input: &[u32]) -> Result<TokenDistributions, ModelError> {
        let mut lp = self.log_probs(frames, decoder_input)?;
        for x in &mut lp.data {
            *x = x.exp();
        }
        Ok(TokenDistributions(lp))
    }

    /// Like [`SeqModel::forward`] but returns natural-log probabilities.
    pub fn log_probs(&self, frames: &Mat, decoder_input: &[u32]) -> Result<Mat, ModelError> {
        self.check_source(frames)?;
        self.check_tokens(decoder_input)?;
        Ok(net::log_probs(&self.weights, &self.config, frames, decoder_input))
    }

    /// Greedy decoding from BOS until EOS or `max_target_len` decoder positions. Ties go to the
    /// lowest token id. BOS/EOS are not part of the result.
    pub fn greedy_decode(&self, frames: &Mat) -> Result<Vec<u32>, ModelError> {
        self.check_source(frames)?;
        let mut state = net::DecodeState::new(&self.weights, &self.config, frames);
        let mut out = Vec::new();
        let mut token = BOS;
        let limit = self.config.max_target_len - 1;
        while out.len() < limit {
            let lp = state.step(&self.weights, &self.config, token);
            let next = argmax(&lp) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            token = next;
        }
        Ok(out)
    }

    pub fn transcribe(&self, frames: &Mat) -> Result<String, ModelError> {
        Ok(self.vocab.decode(&self.greedy_decode(frames)?))
    }

    /// Batch-mean loss and its gradient with respect to every parameter.
    pub fn loss_gradients(&self, batch: &[Example], loss: LossDefinition) -> Result<(LossValue, Weights), ModelError> {
        loss_gradients(&self.weights, &self.config, batch, loss)
    }

    /// Batch-mean loss only.
    pub fn loss(&self, batch: &[Example], loss: LossDefinition) -> Result<LossValue, ModelError> {
        batch_loss(&self.weights, &self.config, batch, loss)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn validate_example(cfg: &ModelConfig, ex: &Example, loss: LossDefinition) -> Result<(), ModelError> {
    if ex.frames.rows == 0 {
        return Err(ModelError::EmptySource);
    }
    if ex.frames.cols != cfg.frame_dim {
        return Err(ModelError::FrameDim { got: ex.frames.cols, expected: cfg.frame_dim });
    }
    if ex.frames.rows > cfg.max_source_len {
        return Err(ModelError::SequenceTooLong { what: "source", len: ex.frames.rows, max: cfg.max_source_len });
    }
    if ex.tokens.len() + 1 > cfg.max_target_len {
        return Err(ModelError::SequenceTooLong { what: "target", len: ex.tokens.len() + 1, max: cfg.max_target_len });
    }
    if let Some(&t) = ex.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
    }
    if let LossDefinition::Distill { alpha_kl, .. } = loss {
        if alpha_kl != 0.0 {
            match &ex.teacher_log_probs {
                Some(t) if t.rows == ex.tokens.len() + 1 && t.cols == cfg.vocab_size => {}
                _ => return Err(ModelError::MissingTeacher),
            }
        }
    }
    Ok(())
}

/// Per-example loss terms and `dL/dlogits` (unscaled by batch size).
fn example_loss(logits: &Mat, ex: &Example, loss: LossDefinition, want_grad: bool) -> (f64, f64, Option<Mat>) {
    let (alpha_kl, alpha_pl) = match loss {
        LossDefinition::CrossEntropy => (0.0, 1.0),
        LossDefinition::Distill { alpha_kl, alpha_pl } => (alpha_kl, alpha_pl),
    };
    let targets = ex.targets();
    let mut lp = logits.clone();
    let mut kl = 0.0;
    let mut pl = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = lp.row_mut(t);
        mat::log_softmax_in_place(row);
        pl -= row[y as usize];
        if alpha_kl != 0.0 {
            let teacher = ex.teacher_log_probs.as_ref().expect("validated").row(t);
            for (lq, lps) in teacher.iter().zip(row.iter()) {
                let q = lq.exp();
                if q > 0.0 {
                    kl += q * (lq - lps);
                }
            }
        }
    }
    let grad = want_grad.then(|| {
        let mut g = Mat::zeros(lp.rows, lp.cols);
        for (t, &y) in targets.iter().enumerate() {
            let lrow = lp.row(t);
            let grow = g.row_mut(t);
            for (v, (gv, lv)) in grow.iter_mut().zip(lrow).enumerate() {
                let p = lv.exp();
                let mut d = 0.0;
                if alpha_pl != 0.0 {
                    d += alpha_pl * (p - if v == y as usize { 1.0 } else { 0.0 });
                }
                if alpha_kl != 0.0 {
                    let q = ex.teacher_log_probs.as_ref().expect("validated").at(t, v).exp();
                    d += alpha_kl * (p - q);
                }
                *gv = d;
            }
        }
        g
    });
    (kl, pl, grad)
}

fn combine(loss: LossDefinition, kl: f64, pl: f64) -> LossValue {
    match loss {
        LossDefinition::CrossEntropy => LossValue { total: pl, kl: 0.0, pl },
        LossDefinition::Distill { alpha_kl, alpha_pl } => LossValue { total: alpha_kl * kl + alpha_pl * pl, kl, pl },
    }
}

pub(crate) fn loss_gradients(
    w: &Weights,
    cfg: &ModelConfig,
    batch: &[Example],
    loss: LossDefinition,
) -> Result<(LossValue, Weights), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for ex in batch {
        validate_example(cfg, ex, loss)?;
    }
    let inv_b = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, f64, Weights)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Weights::zeros(cfg);
            let (mut kl_sum, mut pl_sum) = (0.0, 0.0);
            for ex in chunk {
                let input = ex.decoder_input();
                let (logits, cache) = net::forward_train(w, cfg, &ex.frames, &input);
                let (kl, pl, dlogits) = example_loss(&logits, ex, loss, true);
                kl_sum += kl;
                pl_sum += pl;
                let mut dlogits = dlogits.expect("requested");
                dlogits.scale(inv_b);
                net::backward(w, cfg, &cache, &dlogits, &mut g);
            }
            (kl_sum, pl_sum, g)
        })
        .collect();
    let mut grads = Weights::zeros(cfg);
    let (mut kl, mut pl) = (0.0, 0.0);
    for (k, p, g) in &partials {
        kl += k;
        pl += p;
        grads.add_assign(g);
    }
    let value = combine(loss, kl * inv_b, pl * inv_b);
    if !value.total.is_finite() || !grads.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok((value, grads))
}

pub(crate) fn batch_loss(w: &Weights, cfg: &ModelConfig, batch: &[Example], loss: LossDefinition) -> Result<LossValue, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for ex in batch {
        validate_example(cfg, ex, loss)?;
    }
    let partials: Vec<(f64, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            chunk.iter().fold((0.0, 0.0), |(ks, ps), ex| {
                let input = ex.decoder_input();
                let (logits, _) = net::forward_train(w, cfg, &ex.frames, &input);
                let (kl, pl, _) = example_loss(&logits, ex, loss, false);
                (ks + kl, ps + pl)
            })
        })
        .collect();
    let inv_b = 1.0 / batch.len() as f64;
    let (kl, pl) = partials.iter().fold((0.0, 0.0), |(a, b), (k, p)| (a + k, b + p));
    let value = combine(loss, kl * inv_b, pl * inv_b);
    if !value.total.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok(value)
}
