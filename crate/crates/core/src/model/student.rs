//! Student initialization from maximally spaced teacher layers.

use super::params::Weights;
use super::{ModelConfig, ModelError, SeqModel};

/// Teacher layer indices copied into an `student`-layer stack taken from a `teacher`-layer one.
///
/// Layer `k` maps to `round(k * (teacher - 1) / (student - 1))` with halves rounded up, so the
/// first and last teacher layers are always kept. A single-layer student takes layer 0.
pub fn layer_indices(teacher: usize, student: usize) -> Vec<usize> {
    assert!(student >= 1 && student <= teacher, "need 1 <= student <= teacher");
    if student == 1 {
        return vec![0];
    }
    let span = teacher - 1;
    let steps = student - 1;
    (0..student)
        .map(|k| (2 * k * span + steps) / (2 * steps))
        .collect()
}

/// Builds a student with `encoder_layers` / `decoder_layers` layers from `teacher`.
///
/// Embeddings, the input projection, final layer norms and the output projection are copied
/// verbatim. The teacher is not modified.
pub fn init_student_from_teacher(
    teacher: &SeqModel,
    encoder_layers: usize,
    decoder_layers: usize,
) -> Result<SeqModel, ModelError> {
    let tc = &teacher.config;
    for (stack, student, t) in [
        ("encoder", encoder_layers, tc.encoder_layers),
        ("decoder", decoder_layers, tc.decoder_layers),
    ] {
        if student == 0 {
            return Err(ModelError::InvalidConfig(format!("{stack} needs at least one layer")));
        }
        if student > t {
            return Err(ModelError::StudentLargerThanTeacher { stack, student, teacher: t });
        }
    }
    Ok(with_layers(
        teacher,
        &layer_indices(tc.encoder_layers, encoder_layers),
        &layer_indices(tc.decoder_layers, decoder_layers),
    ))
}

/// Copy of `model` keeping only the listed encoder and decoder layers, in the given order.
pub(crate) fn with_layers(model: &SeqModel, encoder: &[usize], decoder: &[usize]) -> SeqModel {
    let config = ModelConfig { encoder_layers: encoder.len(), decoder_layers: decoder.len(), ..model.config.clone() };
    let w = &model.weights;
    let weights = Weights {
        input_proj: w.input_proj.clone(),
        encoder: encoder.iter().map(|&i| w.encoder[i].clone()).collect(),
        encoder_ln: w.encoder_ln.clone(),
        embed: w.embed.clone(),
        decoder: decoder.iter().map(|&i| w.decoder[i].clone()).collect(),
        decoder_ln: w.decoder_ln.clone(),
        output: w.output.clone(),
    };
    SeqModel { config, vocab: model.vocab.clone(), weights }
}

/// Inverse of [`with_layers`] for gradients: places `sub`'s layers at their original indices
/// in a zero gradient shaped like `full`.
pub(crate) fn scatter_layers(full: &ModelConfig, sub: Weights, encoder: &[usize], decoder: &[usize]) -> Weights {
    let mut out = Weights::zeros(full);
    for (layer, &i) in sub.encoder.into_iter().zip(encoder) {
        out.encoder[i] = layer;
    }
    for (layer, &i) in sub.decoder.into_iter().zip(decoder) {
        out.decoder[i] = layer;
    }
    out.input_proj = sub.input_proj;
    out.encoder_ln = sub.encoder_ln;
    out.embed = sub.embed;
    out.decoder_ln = sub.decoder_ln;
    out.output = sub.output;
    out
}

/// Checks that a separately built student template shares every non-layer dimension with the
/// teacher.
pub fn check_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<(), ModelError> {
    let strip = |c: &ModelConfig| ModelConfig { encoder_layers: 1, decoder_layers: 1, ..c.clone() };
    if strip(teacher) != strip(student) {
        return Err(ModelError::IncompatibleConfig(format!(
            "teacher {teacher:?} and student {student:?} differ outside the layer counts"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the spacing rule in floating point.
    fn float_rule(t: usize, s: usize) -> Vec<usize> {
        (0..s)
            .map(|k| {
                let x = k as f64 * (t - 1) as f64 / (s - 1) as f64;
                (x + 0.5).floor() as usize
            })
            .collect()
    }

    #[test]
    fn known_selections() {
        assert_eq!(layer_indices(32, 16), vec![0, 2, 4, 6, 8, 10, 12, 14, 17, 19, 21, 23, 25, 27, 29, 31]);
        assert_eq!(layer_indices(32, 8), vec![0, 4, 9, 13, 18, 22, 27, 31]);
        assert_eq!(layer_indices(4, 2), vec![0, 3]);
        assert_eq!(layer_indices(5, 1), vec![0]);
    }

    #[test]
    fn matches_float_rule_and_keeps_endpoints() {
        for t in 1..=40 {
            for s in 2..=t {
                let idx = layer_indices(t, s);
                assert_eq!(idx, float_rule(t, s), "t={t} s={s}");
                assert_eq!(idx[0], 0);
                assert_eq!(*idx.last().unwrap(), t - 1);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
            assert_eq!(layer_indices(t, t), (0..t).collect::<Vec<_>>());
        }
    }
}
