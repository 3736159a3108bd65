//! Parameter containers. The same structs hold weights and their gradients.

use rand::Rng;

use super::mat::Mat;
use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn_ln: LayerNorm,
    pub self_attn: Attention,
    pub ffn_ln: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn_ln: LayerNorm,
    pub self_attn: Attention,
    pub cross_attn_ln: LayerNorm,
    pub cross_attn: Attention,
    pub ffn_ln: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub input_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_ln: LayerNorm,
    /// `vocab x d_model`
    pub embed: Mat,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_ln: LayerNorm,
    pub output: Linear,
}

/// A named view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [f64],
}

/// How fresh weights are drawn.
enum Fill<'r, R: Rng + ?Sized> {
    Zero,
    Random(&'r std::cell::RefCell<&'r mut R>),
}

impl<R: Rng + ?Sized> Clone for Fill<'_, R> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<R: Rng + ?Sized> Copy for Fill<'_, R> {}

impl Linear {
    fn build<R: Rng + ?Sized>(inp: usize, out: usize, fill: Fill<'_, R>) -> Self {
        let w = match fill {
            Fill::Zero => Mat::zeros(inp, out),
            Fill::Random(rng) => Mat::randn(inp, out, (1.0 / inp as f64).sqrt(), &mut **rng.borrow_mut()),
        };
        Self { w, b: vec![0.0; out] }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef { name: format!("{prefix}.weight"), dims: vec![self.w.rows, self.w.cols], data: &self.w.data });
        out.push(ParamRef { name: format!("{prefix}.bias"), dims: vec![self.b.len()], data: &self.b });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let dims = vec![self.w.rows, self.w.cols];
        out.push(ParamMut { name: format!("{prefix}.weight"), dims, data: &mut self.w.data });
        let dims = vec![self.b.len()];
        out.push(ParamMut { name: format!("{prefix}.bias"), dims, data: &mut self.b });
    }
}

impl LayerNorm {
    fn build(dim: usize, zero: bool) -> Self {
        Self { gamma: vec![if zero { 0.0 } else { 1.0 }; dim], beta: vec![0.0; dim] }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef { name: format!("{prefix}.gamma"), dims: vec![self.gamma.len()], data: &self.gamma });
        out.push(ParamRef { name: format!("{prefix}.beta"), dims: vec![self.beta.len()], data: &self.beta });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        let n = self.gamma.len();
        out.push(ParamMut { name: format!("{prefix}.gamma"), dims: vec![n], data: &mut self.gamma });
        out.push(ParamMut { name: format!("{prefix}.beta"), dims: vec![n], data: &mut self.beta });
    }
}

impl Attention {
    fn build<R: Rng + ?Sized>(d: usize, fill: Fill<'_, R>) -> Self {
        Self {
            q: Linear::build(d, d, fill),
            k: Linear::build(d, d, fill),
            v: Linear::build(d, d, fill),
            o: Linear::build(d, d, fill),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.q.collect(&format!("{prefix}.q"), out);
        self.k.collect(&format!("{prefix}.k"), out);
        self.v.collect(&format!("{prefix}.v"), out);
        self.o.collect(&format!("{prefix}.o"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.q.collect_mut(&format!("{prefix}.q"), out);
        self.k.collect_mut(&format!("{prefix}.k"), out);
        self.v.collect_mut(&format!("{prefix}.v"), out);
        self.o.collect_mut(&format!("{prefix}.o"), out);
    }
}

impl FeedForward {
    fn build<R: Rng + ?Sized>(d: usize, hidden: usize, fill: Fill<'_, R>) -> Self {
        Self { up: Linear::build(d, hidden, fill), down: Linear::build(hidden, d, fill) }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.up.collect(&format!("{prefix}.up"), out);
        self.down.collect(&format!("{prefix}.down"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.up.collect_mut(&format!("{prefix}.up"), out);
        self.down.collect_mut(&format!("{prefix}.down"), out);
    }
}

impl EncoderLayer {
    fn build<R: Rng + ?Sized>(cfg: &ModelConfig, fill: Fill<'_, R>) -> Self {
        let d = cfg.d_model;
        let zero = matches!(fill, Fill::Zero);
        Self {
            self_attn_ln: LayerNorm::build(d, zero),
            self_attn: Attention::build(d, fill),
            ffn_ln: LayerNorm::build(d, zero),
            ffn: FeedForward::build(d, cfg.ffn_dim, fill),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.self_attn_ln.collect(&format!("{prefix}.self_attn_ln"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.ffn_ln.collect(&format!("{prefix}.ffn_ln"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.self_attn_ln.collect_mut(&format!("{prefix}.self_attn_ln"), out);
        self.self_attn.collect_mut(&format!("{prefix}.self_attn"), out);
        self.ffn_ln.collect_mut(&format!("{prefix}.ffn_ln"), out);
        self.ffn.collect_mut(&format!("{prefix}.ffn"), out);
    }
}

impl DecoderLayer {
    fn build<R: Rng + ?Sized>(cfg: &ModelConfig, fill: Fill<'_, R>) -> Self {
        let d = cfg.d_model;
        let zero = matches!(fill, Fill::Zero);
        Self {
            self_attn_ln: LayerNorm::build(d, zero),
            self_attn: Attention::build(d, fill),
            cross_attn_ln: LayerNorm::build(d, zero),
            cross_attn: Attention::build(d, fill),
            ffn_ln: LayerNorm::build(d, zero),
            ffn: FeedForward::build(d, cfg.ffn_dim, fill),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.self_attn_ln.collect(&format!("{prefix}.self_attn_ln"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.cross_attn_ln.collect(&format!("{prefix}.cross_attn_ln"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.ffn_ln.collect(&format!("{prefix}.ffn_ln"), out);
        self.ffn.collect(&format!("{prefix}.ffn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.self_attn_ln.collect_mut(&format!("{prefix}.self_attn_ln"), out);
        self.self_attn.collect_mut(&format!("{prefix}.self_attn"), out);
        self.cross_attn_ln.collect_mut(&format!("{prefix}.cross_attn_ln"), out);
        self.cross_attn.collect_mut(&format!("{prefix}.cross_attn"), out);
        self.ffn_ln.collect_mut(&format!("{prefix}.ffn_ln"), out);
        self.ffn.collect_mut(&format!("{prefix}.ffn"), out);
    }
}

impl Weights {
    fn build<R: Rng + ?Sized>(cfg: &ModelConfig, fill: Fill<'_, R>) -> Self {
        let d = cfg.d_model;
        let zero = matches!(fill, Fill::Zero);
        let embed = match fill {
            Fill::Zero => Mat::zeros(cfg.vocab_size, d),
            Fill::Random(rng) => Mat::randn(cfg.vocab_size, d, 1.0, &mut **rng.borrow_mut()),
        };
        Self {
            input_proj: Linear::build(cfg.frame_dim, d, fill),
            encoder: (0..cfg.encoder_layers).map(|_| EncoderLayer::build(cfg, fill)).collect(),
            encoder_ln: LayerNorm::build(d, zero),
            embed,
            decoder: (0..cfg.decoder_layers).map(|_| DecoderLayer::build(cfg, fill)).collect(),
            decoder_ln: LayerNorm::build(d, zero),
            output: Linear::build(d, cfg.vocab_size, fill),
        }
    }

    /// All-zero tensors shaped for `cfg` (layer-norm gains included). Used for gradients.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build::<rand::rngs::ThreadRng>(cfg, Fill::Zero)
    }

    /// Fresh random initialization: `N(0, 1/fan_in)` linear weights, `N(0, 1)` embeddings,
    /// zero biases, unit layer-norm gains. All values rounded to `f32`.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let cell = std::cell::RefCell::new(rng);
        Self::build(cfg, Fill::Random(&cell))
    }

    /// Every tensor with its canonical name, in construction order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.input_proj.collect("encoder.input_proj", &mut out);
        for (i, l) in self.encoder.iter().enumerate() {
            l.collect(&format!("encoder.layers.{i}"), &mut out);
        }
        self.encoder_ln.collect("encoder.final_ln", &mut out);
        out.push(ParamRef { name: "decoder.embed".into(), dims: vec![self.embed.rows, self.embed.cols], data: &self.embed.data });
        for (i, l) in self.decoder.iter().enumerate() {
            l.collect(&format!("decoder.layers.{i}"), &mut out);
        }
        self.decoder_ln.collect("decoder.final_ln", &mut out);
        self.output.collect("output", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.input_proj.collect_mut("encoder.input_proj", &mut out);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.collect_mut(&format!("encoder.layers.{i}"), &mut out);
        }
        self.encoder_ln.collect_mut("encoder.final_ln", &mut out);
        let dims = vec![self.embed.rows, self.embed.cols];
        out.push(ParamMut { name: "decoder.embed".into(), dims, data: &mut self.embed.data });
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.collect_mut(&format!("decoder.layers.{i}"), &mut out);
        }
        self.decoder_ln.collect_mut("decoder.final_ln", &mut out);
        self.output.collect_mut("output", &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// `self += other` elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.params_mut() {
            for x in p.data.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.params().iter().flat_map(|p| p.data.iter()).map(|x| x * x).sum()
    }
}
