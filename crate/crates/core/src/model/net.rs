//! Pre-LN encoder-decoder transformer: forward pass with activation caches and the matching
//! hand-written backward pass. Everything here runs in `f64`.

use super::mat::{dot, log_softmax_in_place, sinusoidal_positions, softmax_in_place, Mat};
use super::params::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, Weights};
use super::ModelConfig;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Linear {
    pub(crate) fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.matmul(&self.w);
        y.add_row_vec(&self.b);
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    fn backward(&self, x: &Mat, dy: &Mat, g: &mut Linear) -> Mat {
        x.t_matmul_into(dy, &mut g.w);
        dy.col_sums_into(&mut g.b);
        dy.matmul_t(&self.w)
    }
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.cols;
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
            }
            let yr = &mut y.data[r * d..(r + 1) * d];
            for j in 0..d {
                yr[j] = self.gamma[j] * xhat.data[r * d + j] + self.beta[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub(crate) fn apply(&self, x: &Mat) -> Mat {
        self.forward(x).0
    }

    fn backward(&self, cache: &LnCache, dy: &Mat, g: &mut LayerNorm) -> Mat {
        let d = dy.cols;
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![0.0; d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..d {
                g.gamma[j] += dyr[j] * xh[j];
                g.beta[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gamma[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xh[j];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            let is = cache.inv_std[r];
            let out = dx.row_mut(r);
            for j in 0..d {
                out[j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head, `Tq x Tk` attention weights.
    probs: Vec<Mat>,
    ctx: Mat,
}

impl Attention {
    fn forward(&self, xq: &Mat, xkv: &Mat, n_heads: usize, causal: bool) -> (Mat, AttnCache) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let (ctx, probs) = attend(&q, &k, &v, n_heads, causal, 0);
        let out = self.o.forward(&ctx);
        let cache = AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, probs, ctx };
        (out, cache)
    }

    /// Returns `(dxq, dxkv)`.
    fn backward(&self, c: &AttnCache, dout: &Mat, n_heads: usize, g: &mut Attention) -> (Mat, Mat) {
        let dctx = self.o.backward(&c.ctx, dout, &mut g.o);
        let d = c.q.cols;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(c.q.rows, d);
        let mut dk = Mat::zeros(c.k.rows, d);
        let mut dv = Mat::zeros(c.v.rows, d);
        for h in 0..n_heads {
            let qh = c.q.cols_slice(h * dh, dh);
            let kh = c.k.cols_slice(h * dh, dh);
            let vh = c.v.cols_slice(h * dh, dh);
            let p = &c.probs[h];
            let dch = dctx.cols_slice(h * dh, dh);
            let dp = dch.matmul_t(&vh);
            let mut dvh = Mat::zeros(vh.rows, dh);
            p.t_matmul_into(&dch, &mut dvh);
            let mut ds = Mat::zeros(p.rows, p.cols);
            for i in 0..p.rows {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                let dsr = ds.row_mut(i);
                for j in 0..pr.len() {
                    dsr[j] = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            let dqh = ds.matmul(&kh);
            let mut dkh = Mat::zeros(kh.rows, dh);
            ds.t_matmul_into(&qh, &mut dkh);
            dq.set_cols(h * dh, &dqh);
            dk.set_cols(h * dh, &dkh);
            dv.set_cols(h * dh, &dvh);
        }
        let dxq = self.q.backward(&c.xq, &dq, &mut g.q);
        let mut dxkv = self.k.backward(&c.xkv, &dk, &mut g.k);
        dxkv.add_assign(&self.v.backward(&c.xkv, &dv, &mut g.v));
        (dxq, dxkv)
    }
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`.
///
/// With `causal`, query row `i` sees key rows `0..=i + offset`.
pub(crate) fn attend(q: &Mat, k: &Mat, v: &Mat, n_heads: usize, causal: bool, offset: usize) -> (Mat, Vec<Mat>) {
    let d = q.cols;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Mat::zeros(q.rows, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut s = Mat::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            let qi = &q.row(i)[cols.clone()];
            let row = s.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                *x = if causal && j > i + offset { f64::NEG_INFINITY } else { dot(qi, &k.row(j)[cols.clone()]) * scale };
            }
            softmax_in_place(row);
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for (j, &p) in s.row(i).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (o, &vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += p * vj;
                }
            }
        }
        probs.push(s);
    }
    (ctx, probs)
}

struct FfnCache {
    x: Mat,
    h: Mat,
    a: Mat,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl FeedForward {
    fn forward(&self, x: &Mat) -> (Mat, FfnCache) {
        let h = self.up.forward(x);
        let a = Mat::from_vec(h.rows, h.cols, h.data.iter().map(|&v| gelu(v)).collect());
        let y = self.down.forward(&a);
        (y, FfnCache { x: x.clone(), h, a })
    }

    fn backward(&self, c: &FfnCache, dy: &Mat, g: &mut FeedForward) -> Mat {
        let mut da = self.down.backward(&c.a, dy, &mut g.down);
        for (d, &h) in da.data.iter_mut().zip(&c.h.data) {
            *d *= gelu_grad(h);
        }
        self.up.backward(&c.x, &da, &mut g.up)
    }
}

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ffn: FfnCache,
}

impl EncoderLayer {
    fn forward(&self, x: &Mat, n_heads: usize) -> (Mat, EncLayerCache) {
        let (a_in, ln1) = self.self_attn_ln.forward(x);
        let (a_out, attn) = self.self_attn.forward(&a_in, &a_in, n_heads, false);
        let mut x1 = x.clone();
        x1.add_assign(&a_out);
        let (f_in, ln2) = self.ffn_ln.forward(&x1);
        let (f_out, ffn) = self.ffn.forward(&f_in);
        x1.add_assign(&f_out);
        (x1, EncLayerCache { ln1, attn, ln2, ffn })
    }

    fn backward(&self, c: &EncLayerCache, dy: &Mat, n_heads: usize, g: &mut EncoderLayer) -> Mat {
        let df_in = self.ffn.backward(&c.ffn, dy, &mut g.ffn);
        let mut dx1 = self.ffn_ln.backward(&c.ln2, &df_in, &mut g.ffn_ln);
        dx1.add_assign(dy);
        let (dq, dkv) = self.self_attn.backward(&c.attn, &dx1, n_heads, &mut g.self_attn);
        let mut da_in = dq;
        da_in.add_assign(&dkv);
        let mut dx = self.self_attn_ln.backward(&c.ln1, &da_in, &mut g.self_attn_ln);
        dx.add_assign(&dx1);
        dx
    }
}

struct DecLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    ln2: LnCache,
    cross_attn: AttnCache,
    ln3: LnCache,
    ffn: FfnCache,
}

impl DecoderLayer {
    fn forward(&self, x: &Mat, enc: &Mat, n_heads: usize) -> (Mat, DecLayerCache) {
        let (s_in, ln1) = self.self_attn_ln.forward(x);
        let (s_out, self_attn) = self.self_attn.forward(&s_in, &s_in, n_heads, true);
        let mut x1 = x.clone();
        x1.add_assign(&s_out);
        let (c_in, ln2) = self.cross_attn_ln.forward(&x1);
        let (c_out, cross_attn) = self.cross_attn.forward(&c_in, enc, n_heads, false);
        x1.add_assign(&c_out);
        let (f_in, ln3) = self.ffn_ln.forward(&x1);
        let (f_out, ffn) = self.ffn.forward(&f_in);
        x1.add_assign(&f_out);
        (x1, DecLayerCache { ln1, self_attn, ln2, cross_attn, ln3, ffn })
    }

    /// Returns `dx` and accumulates the encoder-output gradient into `denc`.
    fn backward(&self, c: &DecLayerCache, dy: &Mat, n_heads: usize, g: &mut DecoderLayer, denc: &mut Mat) -> Mat {
        let df_in = self.ffn.backward(&c.ffn, dy, &mut g.ffn);
        let mut dx2 = self.ffn_ln.backward(&c.ln3, &df_in, &mut g.ffn_ln);
        dx2.add_assign(dy);
        let (dc_in, de) = self.cross_attn.backward(&c.cross_attn, &dx2, n_heads, &mut g.cross_attn);
        denc.add_assign(&de);
        let mut dx1 = self.cross_attn_ln.backward(&c.ln2, &dc_in, &mut g.cross_attn_ln);
        dx1.add_assign(&dx2);
        let (dq, dkv) = self.self_attn.backward(&c.self_attn, &dx1, n_heads, &mut g.self_attn);
        let mut ds_in = dq;
        ds_in.add_assign(&dkv);
        let mut dx = self.self_attn_ln.backward(&c.ln1, &ds_in, &mut g.self_attn_ln);
        dx.add_assign(&dx1);
        dx
    }
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardCache {
    enc_layers: Vec<EncLayerCache>,
    enc_ln: LnCache,
    enc_out: Mat,
    frames: Mat,
    tokens: Vec<u32>,
    dec_layers: Vec<DecLayerCache>,
    dec_ln: LnCache,
    dec_final: Mat,
}

pub(crate) fn encode(w: &Weights, cfg: &ModelConfig, frames: &Mat) -> Mat {
    let mut x = w.input_proj.forward(frames);
    x.add_assign(&sinusoidal_positions(frames.rows, cfg.d_model));
    for layer in &w.encoder {
        x = layer.forward(&x, cfg.n_heads).0;
    }
    w.encoder_ln.apply(&x)
}

pub(crate) fn embed_tokens(w: &Weights, cfg: &ModelConfig, tokens: &[u32], first_pos: usize) -> Mat {
    let d = cfg.d_model;
    let pe = sinusoidal_positions(first_pos + tokens.len(), d);
    let mut x = Mat::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        let e = w.embed.row(t as usize);
        let p = pe.row(first_pos + i);
        for j in 0..d {
            row[j] = e[j] + p[j];
        }
    }
    x
}

/// Teacher-forced logits, one row per decoder input position.
pub(crate) fn forward_train(w: &Weights, cfg: &ModelConfig, frames: &Mat, tokens: &[u32]) -> (Mat, ForwardCache) {
    let mut x = w.input_proj.forward(frames);
    x.add_assign(&sinusoidal_positions(frames.rows, cfg.d_model));
    let mut enc_layers = Vec::with_capacity(w.encoder.len());
    for layer in &w.encoder {
        let (y, c) = layer.forward(&x, cfg.n_heads);
        enc_layers.push(c);
        x = y;
    }
    let (enc_out, enc_ln) = w.encoder_ln.forward(&x);

    let mut y = embed_tokens(w, cfg, tokens, 0);
    let mut dec_layers = Vec::with_capacity(w.decoder.len());
    for layer in &w.decoder {
        let (z, c) = layer.forward(&y, &enc_out, cfg.n_heads);
        dec_layers.push(c);
        y = z;
    }
    let (dec_final, dec_ln) = w.decoder_ln.forward(&y);
    let logits = w.output.forward(&dec_final);
    let cache = ForwardCache {
        enc_layers,
        enc_ln,
        enc_out,
        frames: frames.clone(),
        tokens: tokens.to_vec(),
        dec_layers,
        dec_ln,
        dec_final,
    };
    (logits, cache)
}

/// Backpropagates `dlogits` through the cached forward pass, accumulating into `g`.
pub(crate) fn backward(w: &Weights, cfg: &ModelConfig, c: &ForwardCache, dlogits: &Mat, g: &mut Weights) {
    let dfinal = w.output.backward(&c.dec_final, dlogits, &mut g.output);
    let mut dy = w.decoder_ln.backward(&c.dec_ln, &dfinal, &mut g.decoder_ln);
    let mut denc = Mat::zeros(c.enc_out.rows, c.enc_out.cols);
    for (i, layer) in w.decoder.iter().enumerate().rev() {
        dy = layer.backward(&c.dec_layers[i], &dy, cfg.n_heads, &mut g.decoder[i], &mut denc);
    }
    for (pos, &t) in c.tokens.iter().enumerate() {
        let grow = g.embed.row_mut(t as usize);
        for (a, b) in grow.iter_mut().zip(dy.row(pos)) {
            *a += b;
        }
    }
    let mut dx = w.encoder_ln.backward(&c.enc_ln, &denc, &mut g.encoder_ln);
    for (i, layer) in w.encoder.iter().enumerate().rev() {
        dx = layer.backward(&c.enc_layers[i], &dx, cfg.n_heads, &mut g.encoder[i]);
    }
    w.input_proj.backward(&c.frames, &dx, &mut g.input_proj);
}

/// Teacher-forced log-probabilities without keeping activations.
pub(crate) fn log_probs(w: &Weights, cfg: &ModelConfig, frames: &Mat, tokens: &[u32]) -> Mat {
    let enc = encode(w, cfg, frames);
    let mut y = embed_tokens(w, cfg, tokens, 0);
    for layer in &w.decoder {
        y = layer.forward(&y, &enc, cfg.n_heads).0;
    }
    let mut logits = w.output.forward(&w.decoder_ln.apply(&y));
    for r in 0..logits.rows {
        log_softmax_in_place(logits.row_mut(r));
    }
    logits
}

/// Key/value cache for incremental greedy decoding.
pub(crate) struct DecodeState {
    cross_kv: Vec<(Mat, Mat)>,
    self_kv: Vec<(Mat, Mat)>,
    pos: usize,
}

impl DecodeState {
    pub(crate) fn new(w: &Weights, cfg: &ModelConfig, frames: &Mat) -> Self {
        let enc = encode(w, cfg, frames);
        let cross_kv = w
            .decoder
            .iter()
            .map(|l| (l.cross_attn.k.forward(&enc), l.cross_attn.v.forward(&enc)))
            .collect();
        let d = cfg.d_model;
        let self_kv = w.decoder.iter().map(|_| (Mat::zeros(0, d), Mat::zeros(0, d))).collect();
        Self { cross_kv, self_kv, pos: 0 }
    }

    /// Feeds one token and returns the log-probabilities for the next one.
    pub(crate) fn step(&mut self, w: &Weights, cfg: &ModelConfig, token: u32) -> Vec<f64> {
        let mut x = embed_tokens(w, cfg, &[token], self.pos);
        for (i, layer) in w.decoder.iter().enumerate() {
            let a_in = layer.self_attn_ln.apply(&x);
            let q = layer.self_attn.q.forward(&a_in);
            let (kc, vc) = &mut self.self_kv[i];
            kc.data.extend_from_slice(&layer.self_attn.k.forward(&a_in).data);
            kc.rows += 1;
            vc.data.extend_from_slice(&layer.self_attn.v.forward(&a_in).data);
            vc.rows += 1;
            let (ctx, _) = attend(&q, kc, vc, cfg.n_heads, false, 0);
            x.add_assign(&layer.self_attn.o.forward(&ctx));

            let c_in = layer.cross_attn_ln.apply(&x);
            let q = layer.cross_attn.q.forward(&c_in);
            let (ck, cv) = &self.cross_kv[i];
            let (ctx, _) = attend(&q, ck, cv, cfg.n_heads, false, 0);
            x.add_assign(&layer.cross_attn.o.forward(&ctx));

            let f_in = layer.ffn_ln.apply(&x);
            x.add_assign(&layer.ffn.forward(&f_in).0);
        }
        let mut logits = w.output.forward(&w.decoder_ln.apply(&x));
        self.pos += 1;
        log_softmax_in_place(&mut logits.data);
        logits.data
    }
}
