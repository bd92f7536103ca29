//! Transformer denoiser `f(z_t)` with categorical reparameterization, output prior and
//! self-conditioning.
//!
//! Inputs for a batch live on a [`Graph`] as stacked `(B*L, d)` matrices. Per-sequence
//! scalars (the log noise level `gamma_b`) are `(B, 1)` columns that get repeated across
//! the rows of their sequence.

use rand::Rng;

use crate::autograd::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Mat;

/// Steps over which the output prior is linearly annealed in.
pub const PRIOR_ANNEAL_STEPS: u64 = 5000;
/// Probability of unrolling self-conditioning to two passes during training.
pub const TWO_PASS_PROB: f64 = 0.25;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    pub schedule_hidden: usize,
    /// Add the closed-form Gaussian log-density to the logits.
    pub output_prior: bool,
    pub self_condition: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            vocab: 259,
            embed_dim: crate::embedding::DEFAULT_EMBED_DIM,
            width: 128,
            depth: 16,
            heads: 4,
            max_len: 256,
            mlp_ratio: 4,
            time_dim: 64,
            schedule_hidden: 8,
            output_prior: true,
            self_condition: true,
        }
    }
}

impl DenoiserConfig {
    /// A few-hundred-parameter model for tests and gradient checks.
    pub fn tiny(vocab: usize, max_len: usize) -> Self {
        Self {
            vocab,
            embed_dim: 4,
            width: 8,
            depth: 1,
            heads: 2,
            max_len,
            mlp_ratio: 2,
            time_dim: 4,
            schedule_hidden: 3,
            output_prior: true,
            self_condition: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("embed_dim", self.embed_dim),
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("max_len", self.max_len),
            ("mlp_ratio", self.mlp_ratio),
            ("schedule_hidden", self.schedule_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim must be positive and even, got {}", self.time_dim)));
        }
        Ok(())
    }

    /// Transformer-block, final-norm and time-projection parameters.
    pub fn non_embedding_params(&self) -> usize {
        let w = self.width;
        let hidden = self.mlp_ratio * w;
        let block = 2 * w + 4 * w * w + w * hidden + hidden + hidden * w + w;
        self.depth * block + w + self.time_dim * w + w
    }
}

/// Output-prior coefficient `min(1, step / 5000)`.
pub fn anneal_coefficient(step: u64) -> f64 {
    (step as f64 / PRIOR_ANNEAL_STEPS as f64).min(1.0)
}

/// Sinusoidal features of `t` (frequencies geometric between 1 and 1/10000, on `1000 t`).
pub fn time_encoding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Batch geometry shared by every pass over the same latents.
#[derive(Clone, Debug)]
pub struct BatchShape {
    pub batch: usize,
    pub seq: usize,
    /// Diffusion time of each sequence.
    pub t: Vec<f64>,
    /// Valid prefix length of each sequence.
    pub lengths: Vec<usize>,
}

impl BatchShape {
    pub fn full(t: Vec<f64>, seq: usize) -> Self {
        let batch = t.len();
        Self { batch, seq, t, lengths: vec![seq; batch] }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// `(B*L, 1)` column with 1 on valid positions and 0 on truncated ones.
    pub fn mask(&self) -> Mat {
        let mut m = Mat::zeros(self.rows(), 1);
        for (b, &len) in self.lengths.iter().enumerate() {
            for i in 0..len.min(self.seq) {
                m.data[b * self.seq + i] = 1.0;
            }
        }
        m
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            batch: idx.len(),
            seq: self.seq,
            t: idx.iter().map(|&b| self.t[b]).collect(),
            lengths: idx.iter().map(|&b| self.lengths[b]).collect(),
        }
    }
}

/// Logits and the reparameterized estimate for one batch.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserOutput {
    /// `(B*L, V)`.
    pub logits: Var,
    /// `(B*L, d)`.
    pub x_hat: Var,
    /// Network invocations spent producing this output.
    pub passes: usize,
}

/// How the self-conditioning input is formed.
#[derive(Clone, Copy, Debug)]
pub enum SelfCond<'a> {
    /// One pass from the zero estimate.
    Zeros,
    /// One pass conditioned on a given `(B*L, d)` estimate (sampling chains).
    Given(&'a Mat),
    /// Per-sequence choice between one pass and two passes with a severed inner pass.
    Unroll(&'a [bool]),
    /// Always two passes (held-out evaluation).
    TwoPass,
}

/// Self-conditioning regime requested by callers that do not pre-draw their choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelfCondMode {
    Train,
    Eval,
    Sample,
}

/// Bernoulli(0.25) two-pass flags for a training batch.
pub fn draw_two_pass<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<bool> {
    (0..batch).map(|_| rng.random::<f64>() < TWO_PASS_PROB).collect()
}

/// `x_hat[i] = sum_v softmax(logits[i])_v * table[v]`.
pub fn logits_to_xhat(logits: &Mat, table: &Mat) -> Result<Mat> {
    if logits.cols != table.rows {
        return Err(Error::Shape(format!("logits width {} vs vocab {}", logits.cols, table.rows)));
    }
    let mut probs = logits.clone();
    for r in 0..probs.rows {
        crate::autograd::softmax_in_place(probs.row_mut(r));
    }
    Ok(probs.matmul(table))
}

/// The denoiser's per-pass network, bound to one model.
pub struct Denoiser<'m> {
    model: &'m Model,
}

impl<'m> Denoiser<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// One network pass. `z` is `(B*L, d)`, `gamma` is `(B, 1)` log noise levels and
    /// `y` is the self-conditioning estimate. `anneal` scales the output prior.
    pub fn pass(&self, g: &mut Graph<'m>, z: Var, gamma: Var, y: Var, shape: &BatchShape, anneal: f64) -> Result<(Var, Var)> {
        let cfg = &self.model.config;
        let ids = &self.model.ids;
        let (zr, zc) = g.value(z).shape();
        if zc != cfg.embed_dim || zr != shape.rows() {
            return Err(Error::Shape(format!("latent is {zr}x{zc}, expected {}x{}", shape.rows(), cfg.embed_dim)));
        }
        if shape.seq > cfg.max_len {
            return Err(Error::Shape(format!("sequence length {} exceeds max_len {}", shape.seq, cfg.max_len)));
        }
        let (b, l) = (shape.batch, shape.seq);

        // z / sqrt(1 + sigma^2)
        let s2 = g.exp(gamma);
        let one_plus = g.add_scalar(s2, 1.0);
        let root = g.unary(Unary::Sqrt, one_plus);
        let inv = g.unary(Unary::Recip, root);
        let inv_rows = g.repeat_rows(inv, l);
        let z_in = g.mul(z, inv_rows);
        let x = g.concat_cols(z_in, y);

        let in_w = g.param(ids.in_w);
        let in_b = g.param(ids.in_b);
        let h = g.matmul(x, in_w);
        let mut h = g.add(h, in_b);

        let mut enc = Mat::zeros(b, cfg.time_dim);
        for (i, &t) in shape.t.iter().enumerate() {
            enc.row_mut(i).copy_from_slice(&time_encoding(t, cfg.time_dim));
        }
        let enc = g.constant(enc);
        let tw = g.param(ids.time_w);
        let tb = g.param(ids.time_b);
        let te = g.matmul(enc, tw);
        let te = g.add(te, tb);
        let te = g.repeat_rows(te, l);
        h = g.add(h, te);
        let pos = g.param(ids.pos);
        let pos = g.tile_rows(pos, l, b);
        h = g.add(h, pos);

        for blk in &ids.blocks {
            let n = g.rms_norm(h, NORM_EPS);
            let gain = g.param(blk.norm1);
            let n = g.mul(n, gain);
            let (wq, wk, wv, wo) = (g.param(blk.wq), g.param(blk.wk), g.param(blk.wv), g.param(blk.wo));
            let q = g.matmul(n, wq);
            let k = g.matmul(n, wk);
            let v = g.matmul(n, wv);
            let a = g.attention(q, k, v, b, l, cfg.heads, &shape.lengths);
            let a = g.matmul(a, wo);
            h = g.add(h, a);

            let n = g.rms_norm(h, NORM_EPS);
            let gain = g.param(blk.norm2);
            let n = g.mul(n, gain);
            let (w1, b1, w2, b2) = (g.param(blk.w1), g.param(blk.b1), g.param(blk.w2), g.param(blk.b2));
            let m = g.matmul(n, w1);
            let m = g.add(m, b1);
            let m = g.unary(Unary::Gelu, m);
            let m = g.matmul(m, w2);
            let m = g.add(m, b2);
            h = g.add(h, m);
        }
        let n = g.rms_norm(h, NORM_EPS);
        let gain = g.param(ids.final_norm);
        let n = g.mul(n, gain);
        let ow = g.param(ids.out_w);
        let ob = g.param(ids.out_b);
        let logits = g.matmul(n, ow);
        let mut logits = g.add(logits, ob);

        let table = g.param(ids.embed);
        if cfg.output_prior && anneal > 0.0 {
            // -|z - e_v|^2 / (2 sigma^2) up to a per-row constant: (z.e_v - |e_v|^2/2) / sigma^2
            let ze = g.matmul_t(z, table, false, true);
            let sq = g.unary(Unary::Square, table);
            let ones = g.constant(Mat::filled(1, cfg.embed_dim, 0.5));
            let half_norms = g.matmul_t(ones, sq, false, true);
            let centered = g.sub(ze, half_norms);
            let neg_gamma = g.scale(gamma, -1.0);
            let inv_s2 = g.exp(neg_gamma);
            let coef = g.scale(inv_s2, anneal);
            let coef = g.repeat_rows(coef, l);
            let prior = g.mul(centered, coef);
            logits = g.add(logits, prior);
        }
        let probs = g.softmax(logits);
        let x_hat = g.matmul(probs, table);
        Ok((logits, x_hat))
    }

    /// A pass on a throwaway tape with nothing differentiable; returns `(logits, x_hat)`.
    pub fn detached_pass(&self, z: &Mat, gamma: &[f64], y: &Mat, shape: &BatchShape, anneal: f64) -> Result<(Mat, Mat)> {
        let mut g = Graph::new(&self.model.params, false);
        let zv = g.constant(z.clone());
        let gv = g.constant(Mat::column(gamma.to_vec()));
        let yv = g.constant(y.clone());
        let (logits, x_hat) = self.pass(&mut g, zv, gv, yv, shape, anneal)?;
        let out = (g.value(logits).clone(), g.value(x_hat).clone());
        Ok(out)
    }

    /// Self-conditioned estimate `x_hat(z)` according to `mode`.
    pub fn forward(
        &self,
        g: &mut Graph<'m>,
        z: Var,
        gamma: Var,
        shape: &BatchShape,
        anneal: f64,
        mode: SelfCond<'_>,
    ) -> Result<DenoiserOutput> {
        let d = self.model.config.embed_dim;
        let rows = shape.rows();
        let mode = if self.model.config.self_condition { mode } else { SelfCond::Zeros };
        let (y, passes) = match mode {
            SelfCond::Zeros => (Mat::zeros(rows, d), 1),
            SelfCond::Given(prev) => {
                if prev.shape() != (rows, d) {
                    return Err(Error::Shape(format!("self-conditioning input {:?}, expected ({rows}, {d})", prev.shape())));
                }
                (prev.clone(), 1)
            }
            SelfCond::TwoPass => {
                let gam = g.value(gamma).data.clone();
                let (_, y1) = self.detached_pass(g.value(z), &gam, &Mat::zeros(rows, d), shape, anneal)?;
                (y1, 2)
            }
            SelfCond::Unroll(flags) => {
                if flags.len() != shape.batch {
                    return Err(Error::Shape(format!("{} unroll flags for batch {}", flags.len(), shape.batch)));
                }
                let idx: Vec<usize> = (0..shape.batch).filter(|&b| flags[b]).collect();
                let mut y = Mat::zeros(rows, d);
                if idx.is_empty() {
                    (y, 1)
                } else {
                    let zval = g.value(z);
                    let gam = g.value(gamma);
                    let sub = shape.subset(&idx);
                    let mut zs = Mat::zeros(sub.rows(), d);
                    for (j, &b) in idx.iter().enumerate() {
                        let src = &zval.data[b * shape.seq * d..(b + 1) * shape.seq * d];
                        zs.data[j * shape.seq * d..(j + 1) * shape.seq * d].copy_from_slice(src);
                    }
                    let gs: Vec<f64> = idx.iter().map(|&b| gam.data[b]).collect();
                    let (_, y1) = self.detached_pass(&zs, &gs, &Mat::zeros(sub.rows(), d), &sub, anneal)?;
                    for (j, &b) in idx.iter().enumerate() {
                        let src = &y1.data[j * shape.seq * d..(j + 1) * shape.seq * d];
                        y.data[b * shape.seq * d..(b + 1) * shape.seq * d].copy_from_slice(src);
                    }
                    (y, 2)
                }
            }
        };
        let yv = g.constant(y);
        let (logits, x_hat) = self.pass(g, z, gamma, yv, shape, anneal)?;
        Ok(DenoiserOutput { logits, x_hat, passes })
    }

    /// Mode-driven wrapper: draws training unroll choices from `rng`; sampling requires
    /// the previous step's estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn self_cond_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'m>,
        z: Var,
        gamma: Var,
        shape: &BatchShape,
        anneal: f64,
        mode: SelfCondMode,
        prev: Option<&Mat>,
        rng: &mut R,
    ) -> Result<DenoiserOutput> {
        match mode {
            SelfCondMode::Train => {
                let flags = draw_two_pass(shape.batch, rng);
                self.forward(g, z, gamma, shape, anneal, SelfCond::Unroll(&flags))
            }
            SelfCondMode::Eval => self.forward(g, z, gamma, shape, anneal, SelfCond::TwoPass),
            SelfCondMode::Sample => {
                let prev = prev.ok_or_else(|| Error::Argument("sample mode needs the previous estimate".into()))?;
                self.forward(g, z, gamma, shape, anneal, SelfCond::Given(prev))
            }
        }
    }

    /// Convenience: logits for plain matrices with no gradient tracking.
    pub fn denoise_logits(&self, z: &Mat, gamma: &[f64], y: &Mat, shape: &BatchShape, anneal: f64) -> Result<Mat> {
        Ok(self.detached_pass(z, gamma, y, shape, anneal)?.0)
    }
}
