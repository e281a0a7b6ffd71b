//! Pre-norm decoder-only transformer with an explicit backward pass.
//!
//! All parameters live in one flat buffer described by [`Layout`], which
//! keeps the optimizer and gradient checks trivial. Training batches are
//! packed without padding: every sequence occupies a contiguous block of
//! rows, the dense layers run over all rows at once and attention runs per
//! sequence and head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Scalar, View};
use super::vocab::TokenId;
use super::LmError;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: super::Vocab::default().len(),
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            context_len: 256,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::InvalidConfig(m.to_string()));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_model == 0 || self.d_ff == 0 || self.context_len == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A contiguous slice of the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub off: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpans {
    pub ln1_g: Span,
    pub ln1_b: Span,
    pub w_qkv: Span,
    pub b_qkv: Span,
    pub w_o: Span,
    pub b_o: Span,
    pub ln2_g: Span,
    pub ln2_b: Span,
    pub w_1: Span,
    pub b_1: Span,
    pub w_2: Span,
    pub b_2: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Span,
    pub pos_emb: Span,
    pub layers: Vec<LayerSpans>,
    pub lnf_g: Span,
    pub lnf_b: Span,
    pub head_w: Span,
    pub head_b: Span,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Layout {
        let mut off = 0;
        let mut take = |len: usize| {
            let s = Span { off, len };
            off += len;
            s
        };
        let d = c.d_model;
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.context_len * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerSpans {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_1: take(d * c.d_ff),
                b_1: take(c.d_ff),
                w_2: take(c.d_ff * d),
                b_2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(d * c.vocab_size);
        let head_b = take(c.vocab_size);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, head_w, head_b, total: off }
    }

    /// Spans holding layer-norm gains (initialised to one).
    fn gains(&self) -> Vec<Span> {
        let mut v: Vec<Span> = self.layers.iter().flat_map(|l| [l.ln1_g, l.ln2_g]).collect();
        v.push(self.lnf_g);
        v
    }

    fn matrices(&self) -> Vec<Span> {
        let mut v = vec![self.tok_emb, self.pos_emb, self.head_w];
        v.extend(self.layers.iter().flat_map(|l| [l.w_qkv, l.w_o, l.w_1, l.w_2]));
        v
    }

    /// Output projections of residual branches get a depth-scaled init.
    fn residual_outputs(&self) -> Vec<Span> {
        self.layers.iter().flat_map(|l| [l.w_o, l.w_2]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

/// Saved activations of one layer for the backward pass.
struct LayerTape<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    drop1: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    h: Vec<T>,
    g: Vec<T>,
    drop2: Option<Vec<T>>,
}

/// Everything `backward` needs from a forward pass.
pub struct Tape<T> {
    ids: Vec<TokenId>,
    /// `(first_row, len)` of each packed sequence.
    seqs: Vec<(usize, usize)>,
    /// Offset of each sequence's attention probabilities inside `probs`.
    prob_offsets: Vec<usize>,
    layers: Vec<LayerTape<T>>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    f: Vec<T>,
}

impl<T> Tape<T> {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn seqs(&self) -> &[(usize, usize)] {
        &self.seqs
    }
}

/// Per-sequence key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize, out: &mut [T], xhat: &mut [T], rstd: &mut [T]) {
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let base = r * d;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[base + j] = xh;
            out[base + j] = xh * g[j] + b[j];
        }
    }
}

/// Accumulates parameter grads into `dg`/`db` and adds the input grad into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    d: usize,
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..rstd.len() {
        let base = r * d;
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            let dyj = dy[base + j];
            dg[j] += dyj * xhat[base + j];
            db[j] += dyj;
            let dxh = dyj * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[base + j];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        for j in 0..d {
            let dxh = dy[base + j] * g[j];
            dx[base + j] += rstd[r] * (dxh - mean_dxh - xhat[base + j] * mean_dxh_xh);
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Scalar>(dout: &[T], db: &mut [T]) {
    for row in dout.chunks_exact(db.len()) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// `out (rows × n) = x (rows × k) · w (k × n)`.
fn linear<T: Scalar>(x: &[T], w: &[T], rows: usize, k: usize, n: usize, out: &mut [T]) {
    gemm(T::one(), View::new(x, rows, k), View::new(w, k, n), T::zero(), out, n);
}

fn dropout_mask<T: Scalar, R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect()
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded Gaussian initialisation.
    pub fn new(config: ModelConfig) -> Result<Model<T>, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = crate::rng::stream(config.seed, &[crate::rng::domain::MODEL_INIT]);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let resid = layout.residual_outputs();
        for span in layout.matrices() {
            let s = if resid.contains(&span) { resid_std } else { std };
            let normal = Normal::new(0.0, s).unwrap();
            for p in &mut params[span.range()] {
                *p = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        for span in layout.gains() {
            params[span.range()].fill(T::one());
        }
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Model<T>, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(LmError::InvalidConfig(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Model { config, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    fn p(&self, s: Span) -> &[T] {
        &self.params[s.range()]
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
        }
    }

    /// Runs the packed sequences and returns logits (`rows × vocab`) and the tape.
    ///
    /// Dropout is applied only when `dropout_rng` is given and the configured
    /// rate is positive.
    pub fn forward<R: Rng>(
        &self,
        seqs: &[&[TokenId]],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Vec<T>, Tape<T>), LmError> {
        let c = &self.config;
        let (d, nh, dh, ff, v) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff, c.vocab_size);
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        let mut prob_offsets = Vec::with_capacity(seqs.len());
        let mut prob_total = 0;
        for s in seqs {
            if s.len() > c.context_len {
                return Err(LmError::ContextOverflow { len: s.len(), max: c.context_len });
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= v) {
                return Err(LmError::InvalidToken(bad));
            }
            spans.push((ids.len(), s.len()));
            prob_offsets.push(prob_total);
            prob_total += nh * s.len() * s.len();
            ids.extend_from_slice(s);
        }
        let m = ids.len();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let drop_p = c.dropout;

        let tok = self.p(self.layout.tok_emb);
        let pos = self.p(self.layout.pos_emb);
        let mut x = vec![T::zero(); m * d];
        for &(start, len) in &spans {
            for t in 0..len {
                let row = start + t;
                let id = ids[row] as usize;
                for j in 0..d {
                    x[row * d + j] = tok[id * d + j] + pos[t * d + j];
                }
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for l in &self.layout.layers {
            let mut a = vec![T::zero(); m * d];
            let mut xhat1 = vec![T::zero(); m * d];
            let mut rstd1 = vec![T::zero(); m];
            layer_norm(&x, self.p(l.ln1_g), self.p(l.ln1_b), d, &mut a, &mut xhat1, &mut rstd1);

            let mut qkv = vec![T::zero(); m * 3 * d];
            linear(&a, self.p(l.w_qkv), m, d, 3 * d, &mut qkv);
            add_bias(&mut qkv, self.p(l.b_qkv));

            let mut probs = vec![T::zero(); prob_total];
            let mut att = vec![T::zero(); m * d];
            for (si, &(start, len)) in spans.iter().enumerate() {
                if len == 0 {
                    continue;
                }
                for h in 0..nh {
                    let p_off = prob_offsets[si] + h * len * len;
                    let pbuf = &mut probs[p_off..p_off + len * len];
                    let q = View::strided(&qkv[start * 3 * d + h * dh..], len, dh, 3 * d);
                    let k = View::strided(&qkv[start * 3 * d + d + h * dh..], len, dh, 3 * d);
                    gemm(scale, q, k.t(), T::zero(), pbuf, len);
                    for i in 0..len {
                        let row = &mut pbuf[i * len..(i + 1) * len];
                        let mx = row[..=i].iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for val in row[..=i].iter_mut() {
                            *val = (*val - mx).exp();
                            sum += *val;
                        }
                        for val in row[..=i].iter_mut() {
                            *val /= sum;
                        }
                        row[i + 1..].fill(T::zero());
                    }
                    let vv = View::strided(&qkv[start * 3 * d + 2 * d + h * dh..], len, dh, 3 * d);
                    gemm(
                        T::one(),
                        View::new(pbuf, len, len),
                        vv,
                        T::zero(),
                        &mut att[start * d + h * dh..],
                        d,
                    );
                }
            }

            let mut y = vec![T::zero(); m * d];
            linear(&att, self.p(l.w_o), m, d, d, &mut y);
            add_bias(&mut y, self.p(l.b_o));
            let drop1 = match dropout_rng.as_deref_mut() {
                Some(r) if drop_p > 0.0 => Some(dropout_mask::<T, R>(m * d, drop_p, r)),
                _ => None,
            };
            if let Some(mask) = &drop1 {
                y.iter_mut().zip(mask).for_each(|(v, &k)| *v *= k);
            }
            x.iter_mut().zip(&y).for_each(|(xv, &yv)| *xv += yv);

            let mut b = vec![T::zero(); m * d];
            let mut xhat2 = vec![T::zero(); m * d];
            let mut rstd2 = vec![T::zero(); m];
            layer_norm(&x, self.p(l.ln2_g), self.p(l.ln2_b), d, &mut b, &mut xhat2, &mut rstd2);
            let mut h = vec![T::zero(); m * ff];
            linear(&b, self.p(l.w_1), m, d, ff, &mut h);
            add_bias(&mut h, self.p(l.b_1));
            let g: Vec<T> = h.iter().map(|&v| gelu(v)).collect();
            let mut z = vec![T::zero(); m * d];
            linear(&g, self.p(l.w_2), m, ff, d, &mut z);
            add_bias(&mut z, self.p(l.b_2));
            let drop2 = match dropout_rng.as_deref_mut() {
                Some(r) if drop_p > 0.0 => Some(dropout_mask::<T, R>(m * d, drop_p, r)),
                _ => None,
            };
            if let Some(mask) = &drop2 {
                z.iter_mut().zip(mask).for_each(|(v, &k)| *v *= k);
            }
            x.iter_mut().zip(&z).for_each(|(xv, &zv)| *xv += zv);

            layers.push(LayerTape { xhat1, rstd1, a, qkv, probs, att, drop1, xhat2, rstd2, b, h, g, drop2 });
        }

        let mut f = vec![T::zero(); m * d];
        let mut xhatf = vec![T::zero(); m * d];
        let mut rstdf = vec![T::zero(); m];
        layer_norm(&x, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b), d, &mut f, &mut xhatf, &mut rstdf);
        let mut logits = vec![T::zero(); m * v];
        linear(&f, self.p(self.layout.head_w), m, d, v, &mut logits);
        add_bias(&mut logits, self.p(self.layout.head_b));

        let tape = Tape { ids, seqs: spans, prob_offsets, layers, xhatf, rstdf, f };
        Ok((logits, tape))
    }

    /// Gradients of all parameters given `dlogits` (same shape as the logits).
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[T]) -> Vec<T> {
        let c = &self.config;
        let (d, nh, dh, ff, v) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff, c.vocab_size);
        let m = tape.rows();
        assert_eq!(dlogits.len(), m * v);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let lay = &self.layout;
        let mut grads = vec![T::zero(); lay.total];

        // head
        {
            let gw = &mut grads[lay.head_w.range()];
            gemm(T::one(), View::new(&tape.f, m, d).t(), View::new(dlogits, m, v), T::one(), gw, v);
        }
        bias_grad(dlogits, &mut grads[lay.head_b.range()]);
        let mut df = vec![T::zero(); m * d];
        gemm(T::one(), View::new(dlogits, m, v), View::new(self.p(lay.head_w), d, v).t(), T::zero(), &mut df, d);
        let mut dx = vec![T::zero(); m * d];
        {
            let (gg, gb) = split_two(&mut grads, lay.lnf_g, lay.lnf_b);
            layer_norm_backward(&df, &tape.xhatf, &tape.rstdf, self.p(lay.lnf_g), d, gg, gb, &mut dx);
        }

        for (l, t) in lay.layers.iter().zip(&tape.layers).rev() {
            // MLP branch
            let mut dz = dx.clone();
            if let Some(mask) = &t.drop2 {
                dz.iter_mut().zip(mask).for_each(|(g, &k)| *g *= k);
            }
            gemm(T::one(), View::new(&t.g, m, ff).t(), View::new(&dz, m, d), T::one(), &mut grads[l.w_2.range()], d);
            bias_grad(&dz, &mut grads[l.b_2.range()]);
            let mut dh_buf = vec![T::zero(); m * ff];
            gemm(T::one(), View::new(&dz, m, d), View::new(self.p(l.w_2), ff, d).t(), T::zero(), &mut dh_buf, ff);
            for (g, &hv) in dh_buf.iter_mut().zip(&t.h) {
                *g *= gelu_grad(hv);
            }
            gemm(T::one(), View::new(&t.b, m, d).t(), View::new(&dh_buf, m, ff), T::one(), &mut grads[l.w_1.range()], ff);
            bias_grad(&dh_buf, &mut grads[l.b_1.range()]);
            let mut db = vec![T::zero(); m * d];
            gemm(T::one(), View::new(&dh_buf, m, ff), View::new(self.p(l.w_1), d, ff).t(), T::zero(), &mut db, d);
            {
                let (gg, gb) = split_two(&mut grads, l.ln2_g, l.ln2_b);
                layer_norm_backward(&db, &t.xhat2, &t.rstd2, self.p(l.ln2_g), d, gg, gb, &mut dx);
            }

            // attention branch
            let mut dy = dx.clone();
            if let Some(mask) = &t.drop1 {
                dy.iter_mut().zip(mask).for_each(|(g, &k)| *g *= k);
            }
            gemm(T::one(), View::new(&t.att, m, d).t(), View::new(&dy, m, d), T::one(), &mut grads[l.w_o.range()], d);
            bias_grad(&dy, &mut grads[l.b_o.range()]);
            let mut datt = vec![T::zero(); m * d];
            gemm(T::one(), View::new(&dy, m, d), View::new(self.p(l.w_o), d, d).t(), T::zero(), &mut datt, d);

            let mut dqkv = vec![T::zero(); m * 3 * d];
            for (si, &(start, len)) in tape.seqs.iter().enumerate() {
                if len == 0 {
                    continue;
                }
                let mut dp = vec![T::zero(); len * len];
                for h in 0..nh {
                    let p_off = tape.prob_offsets[si] + h * len * len;
                    let probs = &t.probs[p_off..p_off + len * len];
                    let base = start * 3 * d;
                    let d_o = View::strided(&datt[start * d + h * dh..], len, dh, d);
                    let vv = View::strided(&t.qkv[base + 2 * d + h * dh..], len, dh, 3 * d);
                    gemm(T::one(), d_o, vv.t(), T::zero(), &mut dp, len);
                    // dV = P^T dO
                    gemm(T::one(), View::new(probs, len, len).t(), d_o, T::zero(), &mut dqkv[base + 2 * d + h * dh..], 3 * d);
                    // dS = P * (dP - rowsum(P * dP)), scaled
                    for i in 0..len {
                        let prow = &probs[i * len..(i + 1) * len];
                        let drow = &mut dp[i * len..(i + 1) * len];
                        let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(&p, &g)| p * g).sum();
                        for j in 0..=i {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                        drow[i + 1..].fill(T::zero());
                    }
                    let q = View::strided(&t.qkv[base + h * dh..], len, dh, 3 * d);
                    let k = View::strided(&t.qkv[base + d + h * dh..], len, dh, 3 * d);
                    gemm(T::one(), View::new(&dp, len, len), k, T::zero(), &mut dqkv[base + h * dh..], 3 * d);
                    gemm(T::one(), View::new(&dp, len, len).t(), q, T::zero(), &mut dqkv[base + d + h * dh..], 3 * d);
                }
            }
            gemm(T::one(), View::new(&t.a, m, d).t(), View::new(&dqkv, m, 3 * d), T::one(), &mut grads[l.w_qkv.range()], 3 * d);
            bias_grad(&dqkv, &mut grads[l.b_qkv.range()]);
            let mut da = vec![T::zero(); m * d];
            gemm(T::one(), View::new(&dqkv, m, 3 * d), View::new(self.p(l.w_qkv), d, 3 * d).t(), T::zero(), &mut da, d);
            {
                let (gg, gb) = split_two(&mut grads, l.ln1_g, l.ln1_b);
                layer_norm_backward(&da, &t.xhat1, &t.rstd1, self.p(l.ln1_g), d, gg, gb, &mut dx);
            }
        }

        // embeddings
        for &(start, len) in &tape.seqs {
            for pos in 0..len {
                let row = start + pos;
                let id = tape.ids[row] as usize;
                let src = &dx[row * d..(row + 1) * d];
                let te = lay.tok_emb.off + id * d;
                let pe = lay.pos_emb.off + pos * d;
                for j in 0..d {
                    grads[te + j] += src[j];
                    grads[pe + j] += src[j];
                }
            }
        }
        grads
    }

    /// Log-probability rows for a single sequence.
    pub fn forward_logprobs(&self, ids: &[TokenId]) -> Result<Vec<Vec<T>>, LmError> {
        let (logits, _) = self.forward::<crate::rng::Rng>(&[ids], None)?;
        let lp = log_softmax_rows(&logits, self.config.vocab_size);
        Ok(lp.chunks_exact(self.config.vocab_size).map(<[T]>::to_vec).collect())
    }

    pub fn new_cache(&self) -> KvCache<T> {
        let n = self.config.n_layers;
        KvCache { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds one token per cache and returns the next-token logits (`rows × vocab`).
    pub fn step(&self, caches: &mut [KvCache<T>], tokens: &[TokenId]) -> Result<Vec<T>, LmError> {
        let c = &self.config;
        let (d, nh, dh, ff, v) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff, c.vocab_size);
        assert_eq!(caches.len(), tokens.len());
        let r = tokens.len();
        for (cache, &t) in caches.iter().zip(tokens) {
            if cache.len >= c.context_len {
                return Err(LmError::ContextOverflow { len: cache.len + 1, max: c.context_len });
            }
            if t as usize >= v {
                return Err(LmError::InvalidToken(t));
            }
        }
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let tok = self.p(self.layout.tok_emb);
        let pos = self.p(self.layout.pos_emb);
        let mut x = vec![T::zero(); r * d];
        for (i, (cache, &t)) in caches.iter().zip(tokens).enumerate() {
            for j in 0..d {
                x[i * d + j] = tok[t as usize * d + j] + pos[cache.len * d + j];
            }
        }
        let mut a = vec![T::zero(); r * d];
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        let mut qkv = vec![T::zero(); r * 3 * d];
        let mut att = vec![T::zero(); r * d];
        let mut y = vec![T::zero(); r * d];
        let mut hbuf = vec![T::zero(); r * ff];
        for (li, l) in self.layout.layers.iter().enumerate() {
            layer_norm(&x, self.p(l.ln1_g), self.p(l.ln1_b), d, &mut a, &mut xhat, &mut rstd);
            linear(&a, self.p(l.w_qkv), r, d, 3 * d, &mut qkv);
            add_bias(&mut qkv, self.p(l.b_qkv));
            for (i, cache) in caches.iter_mut().enumerate() {
                let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
                cache.keys[li].extend_from_slice(&row[d..2 * d]);
                cache.values[li].extend_from_slice(&row[2 * d..]);
                let n = cache.len + 1;
                let keys = &cache.keys[li];
                let vals = &cache.values[li];
                let mut scores = vec![T::zero(); n];
                for h in 0..nh {
                    let q = &row[h * dh..(h + 1) * dh];
                    let mut mx = T::neg_infinity();
                    for (p, s) in scores.iter_mut().enumerate() {
                        let kk = &keys[p * d + h * dh..p * d + (h + 1) * dh];
                        *s = q.iter().zip(kk).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        mx = mx.max(*s);
                    }
                    let mut sum = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let out = &mut att[i * d + h * dh..i * d + (h + 1) * dh];
                    out.fill(T::zero());
                    for (p, &s) in scores.iter().enumerate() {
                        let w = s / sum;
                        let vv = &vals[p * d + h * dh..p * d + (h + 1) * dh];
                        for (o, &val) in out.iter_mut().zip(vv) {
                            *o += w * val;
                        }
                    }
                }
            }
            linear(&att, self.p(l.w_o), r, d, d, &mut y);
            add_bias(&mut y, self.p(l.b_o));
            x.iter_mut().zip(&y).for_each(|(xv, &yv)| *xv += yv);
            layer_norm(&x, self.p(l.ln2_g), self.p(l.ln2_b), d, &mut a, &mut xhat, &mut rstd);
            linear(&a, self.p(l.w_1), r, d, ff, &mut hbuf);
            add_bias(&mut hbuf, self.p(l.b_1));
            hbuf.iter_mut().for_each(|h| *h = gelu(*h));
            linear(&hbuf, self.p(l.w_2), r, ff, d, &mut y);
            add_bias(&mut y, self.p(l.b_2));
            x.iter_mut().zip(&y).for_each(|(xv, &yv)| *xv += yv);
        }
        for cache in caches.iter_mut() {
            cache.len += 1;
        }
        layer_norm(&x, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b), d, &mut a, &mut xhat, &mut rstd);
        let mut logits = vec![T::zero(); r * v];
        linear(&a, self.p(self.layout.head_w), r, d, v, &mut logits);
        add_bias(&mut logits, self.p(self.layout.head_b));
        Ok(logits)
    }

    /// Runs `ids` through a fresh cache; returns it with the last logits row.
    pub fn prefill(&self, ids: &[TokenId]) -> Result<(KvCache<T>, Vec<T>), LmError> {
        assert!(!ids.is_empty(), "prefill needs at least one token");
        let mut cache = self.new_cache();
        let mut logits = Vec::new();
        for &t in ids {
            logits = self.step(std::slice::from_mut(&mut cache), &[t])?;
        }
        Ok((cache, logits))
    }
}

fn split_two<T>(grads: &mut [T], a: Span, b: Span) -> (&mut [T], &mut [T]) {
    assert!(a.off + a.len <= b.off, "spans must be ordered");
    let (lo, hi) = grads.split_at_mut(b.off);
    (&mut lo[a.range()], &mut hi[..b.len])
}
