//! Ancestral sampling with score temperature, self-conditioning chaining and token
//! guidance.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{log_sum_exp, softmax_in_place, Graph, ParamStore, Unary, Var};
use crate::denoiser::{BatchShape, Denoiser, SelfCond};
use crate::diffusion::posterior_from_sigma2;
use crate::embedding::TokenId;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Mat;

/// Probability clamp used before logs and complements.
pub const GUIDANCE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Number of ancestral steps `T`.
    pub steps: usize,
    /// Score temperature in `(0, 1]`.
    pub tau: f64,
    pub seq_len: usize,
    pub seed: u64,
    pub guidance_weight: f64,
    pub num_samples: usize,
    /// Chains per forward batch.
    pub chunk: usize,
    /// Output-prior coefficient of the model being sampled.
    pub anneal: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 4096, tau: 0.9, seq_len: 64, seed: 0, guidance_weight: 0.0, num_samples: 1, chunk: 64, anneal: 1.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Domain(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            return Err(Error::Domain(format!("guidance weight must be finite and >= 0, got {}", self.guidance_weight)));
        }
        if self.seq_len == 0 || self.num_samples == 0 || self.chunk == 0 {
            return Err(Error::Config("seq_len, num_samples and chunk must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TermKind {
    /// Tokens `tokens` at positions `start..end`.
    Span { start: usize, end: usize, tokens: Vec<TokenId> },
    /// Unigram constraint on one token.
    Lexical { token: TokenId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTerm {
    pub kind: TermKind,
    pub weight: f64,
    /// Use the complement probability `1 - p`.
    pub negated: bool,
}

impl GuidanceTerm {
    pub fn span(start: usize, tokens: Vec<TokenId>) -> Self {
        let end = start + tokens.len();
        Self { kind: TermKind::Span { start, end, tokens }, weight: 1.0, negated: false }
    }

    pub fn lexical(token: TokenId) -> Self {
        Self { kind: TermKind::Lexical { token }, weight: 1.0, negated: false }
    }

    pub fn weighted(self, weight: f64) -> Self {
        Self { weight, ..self }
    }

    pub fn negate(self) -> Self {
        Self { negated: !self.negated, ..self }
    }
}

/// A set of weighted guidance terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuidanceSpec {
    pub terms: Vec<GuidanceTerm>,
}

impl GuidanceSpec {
    pub fn new(terms: Vec<GuidanceTerm>) -> Self {
        Self { terms }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn validate(&self, seq_len: usize, vocab: usize) -> Result<()> {
        let mut covered = vec![false; seq_len];
        for term in &self.terms {
            if !term.weight.is_finite() {
                return Err(Error::Spec(format!("non-finite weight {}", term.weight)));
            }
            match &term.kind {
                TermKind::Span { start, end, tokens } => {
                    if start >= end || *end > seq_len {
                        return Err(Error::Spec(format!("span {start}:{end} outside [0, {seq_len})")));
                    }
                    if tokens.len() != end - start {
                        return Err(Error::Spec(format!("span {start}:{end} holds {} tokens", tokens.len())));
                    }
                    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
                        return Err(Error::Spec(format!("token {t} outside vocabulary of {vocab}")));
                    }
                    for c in &mut covered[*start..*end] {
                        if *c {
                            return Err(Error::Spec(format!("span {start}:{end} overlaps another span")));
                        }
                        *c = true;
                    }
                }
                TermKind::Lexical { token } => {
                    if *token as usize >= vocab {
                        return Err(Error::Spec(format!("token {token} outside vocabulary of {vocab}")));
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for GuidanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "none");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, ";")?;
            }
            if t.negated {
                write!(f, "not ")?;
            }
            match &t.kind {
                TermKind::Span { start, end, tokens } => {
                    let ids: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                    write!(f, "span {start}:{end} [{}]", ids.join(","))?;
                }
                TermKind::Lexical { token } => write!(f, "lexical {token}")?,
            }
            write!(f, " w={}", t.weight)?;
        }
        Ok(())
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(GUIDANCE_EPS, 1.0 - GUIDANCE_EPS)
}

/// Weighted guidance log-probability for one sequence's `(L, V)` logits.
///
/// Spans are scored in log space as `sum_i log softmax(logits[i])[token_i]`, capped at
/// `log(1 - eps)`; lexical and complement probabilities are clamped to `[eps, 1 - eps]`.
pub fn guidance_logprob(spec: &GuidanceSpec, logits: &Mat) -> Result<f64> {
    spec.validate(logits.rows, logits.cols)?;
    let mut total = 0.0;
    for term in &spec.terms {
        let log_p = match &term.kind {
            TermKind::Span { start, tokens, .. } => tokens
                .iter()
                .enumerate()
                .map(|(k, &tok)| {
                    let row = logits.row(start + k);
                    row[tok as usize] - log_sum_exp(row)
                })
                .sum::<f64>(),
            TermKind::Lexical { token } => {
                let mut p = 0.0;
                for r in 0..logits.rows {
                    let mut row = logits.row(r).to_vec();
                    softmax_in_place(&mut row);
                    p += row[*token as usize];
                }
                clamp_p(p / logits.rows as f64).ln()
            }
        };
        let value = if term.negated { (1.0 - clamp_p(log_p.exp())).ln() } else { log_p.min((1.0 - GUIDANCE_EPS).ln()) };
        total += term.weight * value;
    }
    Ok(total)
}

/// `guidance_logprob` of one `(L, V)` logit matrix and its gradient with respect to the logits.
pub fn guidance_logprob_grad(spec: &GuidanceSpec, logits: &Mat) -> Result<(f64, Mat)> {
    spec.validate(logits.rows, logits.cols)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let x = g.input(logits.clone());
    let out = guidance_graph(&mut g, spec, x, 1, logits.rows);
    let value = g.value(out).data[0];
    let grads = g.backward(out);
    let grad = grads.wrt(x).cloned().unwrap_or_else(|| Mat::zeros(logits.rows, logits.cols));
    Ok((value, grad))
}

/// Batched guidance log-probability on a graph: `logits` is `(n*L, V)`, result `(n, 1)`.
fn guidance_graph(g: &mut Graph<'_>, spec: &GuidanceSpec, logits: Var, n: usize, seq: usize) -> Var {
    let lsm = g.log_softmax(logits);
    let mut acc: Option<Var> = None;
    for term in &spec.terms {
        let log_p = match &term.kind {
            TermKind::Span { start, end, tokens } => {
                let len = end - start;
                let rows: Vec<usize> = (0..n).flat_map(|c| (*start..*end).map(move |i| c * seq + i)).collect();
                let cols: Vec<usize> = (0..n).flat_map(|_| tokens.iter().map(|&t| t as usize)).collect();
                let picked = g.gather_rows(lsm, rows);
                let picked = g.gather_cols(picked, cols);
                g.sum_groups(picked, len)
            }
            TermKind::Lexical { token } => {
                let probs = g.softmax(logits);
                let col = g.gather_cols(probs, vec![*token as usize; n * seq]);
                let sum = g.sum_groups(col, seq);
                let mean = g.scale(sum, 1.0 / seq as f64);
                let p = g.clamp(mean, GUIDANCE_EPS, 1.0 - GUIDANCE_EPS);
                g.unary(Unary::Log, p)
            }
        };
        let value = if term.negated {
            let p = g.exp(log_p);
            let p = g.clamp(p, GUIDANCE_EPS, 1.0 - GUIDANCE_EPS);
            let q = g.scale(p, -1.0);
            let q = g.add_scalar(q, 1.0);
            g.unary(Unary::Log, q)
        } else {
            g.clamp(log_p, f64::NEG_INFINITY, (1.0 - GUIDANCE_EPS).ln())
        };
        let weighted = g.scale(value, term.weight);
        acc = Some(match acc {
            Some(a) => g.add(a, weighted),
            None => weighted,
        });
    }
    acc.unwrap_or_else(|| g.constant(Mat::zeros(n, 1)))
}

/// `x_hat + ((1 - tau) / tau) (x_hat - z)`.
pub fn apply_score_temperature(x_hat: &Mat, z: &Mat, tau: f64) -> Result<Mat> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!("tau must be in (0, 1], got {tau}")));
    }
    if x_hat.shape() != z.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x_hat.shape(), z.shape())));
    }
    if tau == 1.0 {
        return Ok(x_hat.clone());
    }
    let c = (1.0 - tau) / tau;
    let data = x_hat.data.iter().zip(&z.data).map(|(x, z)| x + c * (x - z)).collect();
    Ok(Mat::from_vec(x_hat.rows, x_hat.cols, data))
}

/// Denoiser estimate at `z` together with `grad_z` of the guidance log-probability.
#[derive(Clone, Debug)]
pub struct GuidedEstimate {
    pub x_hat: Mat,
    pub logits: Mat,
    pub grad: Mat,
}

/// Runs one self-conditioned pass at `z` and differentiates the guidance terms through
/// the full logits computation.
pub fn guidance_gradient(
    model: &Model,
    z: &Mat,
    prev: &Mat,
    shape: &BatchShape,
    gammas: &[f64],
    anneal: f64,
    spec: &GuidanceSpec,
) -> Result<GuidedEstimate> {
    spec.validate(shape.seq, model.config.vocab)?;
    let mut g = Graph::new(&model.params, false);
    let zv = g.input(z.clone());
    let gv = g.constant(Mat::column(gammas.to_vec()));
    let out = Denoiser::new(model).forward(&mut g, zv, gv, shape, anneal, SelfCond::Given(prev))?;
    let lp = guidance_graph(&mut g, spec, out.logits, shape.batch, shape.seq);
    let total = g.sum_all(lp);
    let grads = g.backward(total);
    let grad = grads.wrt(zv).cloned().unwrap_or_else(|| Mat::zeros(z.rows, z.cols));
    Ok(GuidedEstimate { x_hat: g.value(out.x_hat).clone(), logits: g.value(out.logits).clone(), grad })
}

/// `x_hat + weight * sigma^2(t) * grad`; exact identity at weight 0.
pub fn guided_xhat(x_hat: &Mat, grad: &Mat, sigma2_t: f64, weight: f64, t: f64) -> Result<Mat> {
    if !(weight >= 0.0) {
        return Err(Error::Domain(format!("guidance weight must be >= 0, got {weight}")));
    }
    if weight == 0.0 {
        return Ok(x_hat.clone());
    }
    if !grad.is_finite() {
        return Err(Error::Guidance(t));
    }
    let c = weight * sigma2_t;
    let data = x_hat.data.iter().zip(&grad.data).map(|(x, g)| x + c * g).collect();
    Ok(Mat::from_vec(x_hat.rows, x_hat.cols, data))
}

/// Generated sequences and call accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub sequences: Vec<Vec<TokenId>>,
    /// Denoiser invocations per chain (`T` steps plus the final decode).
    pub network_calls: usize,
    /// Posterior draws per chain.
    pub posterior_draws: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws `cfg.num_samples` sequences. Chain `c` uses its own generator seeded with
/// `seed + c`, so results do not depend on `chunk`.
pub fn sample(model: &Model, cfg: &SamplerConfig, spec: Option<&GuidanceSpec>) -> Result<SampleOutput> {
    cfg.validate()?;
    if cfg.seq_len > model.config.max_len {
        return Err(Error::Config(format!("seq_len {} exceeds model max_len {}", cfg.seq_len, model.config.max_len)));
    }
    if let Some(s) = spec {
        s.validate(cfg.seq_len, model.config.vocab)?;
    }
    let guided = spec.filter(|s| !s.is_empty() && cfg.guidance_weight > 0.0);
    let mut sequences = Vec::with_capacity(cfg.num_samples);
    let mut calls = 0;
    for start in (0..cfg.num_samples).step_by(cfg.chunk) {
        let n = cfg.chunk.min(cfg.num_samples - start);
        let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|c| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((start + c) as u64))).collect();
        let (out, c) = sample_chunk(model, cfg, guided, &mut rngs)?;
        calls = c;
        sequences.extend(out);
    }
    Ok(SampleOutput { sequences, network_calls: calls, posterior_draws: cfg.steps })
}

fn sample_chunk(
    model: &Model,
    cfg: &SamplerConfig,
    spec: Option<&GuidanceSpec>,
    rngs: &mut [ChaCha8Rng],
) -> Result<(Vec<Vec<TokenId>>, usize)> {
    let (n, l, d) = (rngs.len(), cfg.seq_len, model.config.embed_dim);
    let sched = model.schedule();
    let den = Denoiser::new(model);
    let block = l * d;
    let noise = |rngs: &mut [ChaCha8Rng], scale: f64| {
        let mut m = Mat::zeros(n * l, d);
        for (c, rng) in rngs.iter_mut().enumerate() {
            for v in &mut m.data[c * block..(c + 1) * block] {
                let e: f64 = StandardNormal.sample(rng);
                *v = scale * e;
            }
        }
        m
    };
    let mut z = noise(rngs, sched.sigma2(1.0)?.sqrt());
    let mut prev = Mat::zeros(n * l, d);
    let tf = cfg.steps as f64;
    let mut calls = 0;
    for i in (1..=cfg.steps).rev() {
        let (t, s) = (i as f64 / tf, (i - 1) as f64 / tf);
        let gamma = sched.gamma(t)?;
        let (s2t, s2s) = (gamma.exp(), sched.sigma2(s)?);
        let shape = BatchShape::full(vec![t; n], l);
        let (raw, grad) = match spec {
            Some(sp) => {
                let est = guidance_gradient(model, &z, &prev, &shape, &vec![gamma; n], cfg.anneal, sp)?;
                (est.x_hat, Some(est.grad))
            }
            None => (den.detached_pass(&z, &vec![gamma; n], &prev, &shape, cfg.anneal)?.1, None),
        };
        calls += 1;
        let mut xh = apply_score_temperature(&raw, &z, cfg.tau)?;
        if let Some(g) = grad {
            xh = guided_xhat(&xh, &g, s2t, cfg.guidance_weight, t)?;
        }
        prev = raw;
        let (mean, var) = posterior_from_sigma2(&z, &xh, s2s, s2t)?;
        let eps = noise(rngs, var.sqrt());
        z = mean;
        z.add_assign(&eps);
    }
    let shape = BatchShape::full(vec![0.0; n], l);
    let logits = den.denoise_logits(&z, &vec![sched.gamma(0.0)?; n], &prev, &shape, cfg.anneal)?;
    calls += 1;
    let seqs = (0..n).map(|c| (0..l).map(|i| argmax(logits.row(c * l + i)) as TokenId).collect()).collect();
    Ok((seqs, calls))
}

/// Sidecar record written next to sample files.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub steps: usize,
    pub tau: f64,
    pub guidance_weight: f64,
    pub spec: String,
    pub num_samples: usize,
    pub wallclock: f64,
}

impl SampleRecord {
    pub fn to_record(&self) -> String {
        format!(
            "seed={} T={} tau={} guidance_weight={} num_samples={} wallclock={:.3} spec={}",
            self.seed, self.steps, self.tau, self.guidance_weight, self.num_samples, self.wallclock, self.spec
        )
    }
}

/// [`sample`] plus its sidecar record.
pub fn sample_with_record(model: &Model, cfg: &SamplerConfig, spec: Option<&GuidanceSpec>) -> Result<(SampleOutput, SampleRecord)> {
    let start = Instant::now();
    let out = sample(model, cfg, spec)?;
    let record = SampleRecord {
        seed: cfg.seed,
        steps: cfg.steps,
        tau: cfg.tau,
        guidance_weight: cfg.guidance_weight,
        spec: spec.map_or_else(|| "none".to_string(), |s| s.to_string()),
        num_samples: cfg.num_samples,
        wallclock: start.elapsed().as_secs_f64(),
    };
    Ok((out, record))
}

/// Fraction of sequences containing `token` (the lexical-constraint satisfaction rate).
pub fn lexical_rate(sequences: &[Vec<TokenId>], token: TokenId, negated: bool) -> f64 {
    if sequences.is_empty() {
        return 0.0;
    }
    let hit = sequences.iter().filter(|s| s.contains(&token) != negated).count();
    hit as f64 / sequences.len() as f64
}
