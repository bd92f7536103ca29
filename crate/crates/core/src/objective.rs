//! Variational lower bound: prior KL, learned reconstruction term and the
//! continuous-time diffusion term, with the minibatch split, the schedule variance
//! loss and held-out evaluation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{log_sum_exp, Graph, Unary, Var};
use crate::denoiser::{BatchShape, Denoiser, SelfCond};
use crate::diffusion::{InteriorMap, NoiseSchedule};
use crate::embedding::TokenId;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Mat;

pub const MOMENT_DECAY: f64 = 0.99;
pub const MOMENT_WARMUP: u64 = 100;

/// `-1/2 SNR'(t) |x - x_hat|^2`, in nats.
pub fn diffusion_loss(x_embed: &Mat, x_hat: &Mat, t: f64, schedule: &NoiseSchedule) -> Result<f64> {
    if x_embed.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x_embed.shape(), x_hat.shape())));
    }
    let sq: f64 = x_embed.data.iter().zip(&x_hat.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * schedule.snr_prime(t)? * sq)
}

/// `sum_i -log softmax(logits[i])[tokens[i]]`.
pub fn reconstruction_loss(logits: &Mat, tokens: &[TokenId]) -> Result<f64> {
    if logits.rows != tokens.len() {
        return Err(Error::Shape(format!("{} logit rows for {} tokens", logits.rows, tokens.len())));
    }
    let mut total = 0.0;
    for (i, &tok) in tokens.iter().enumerate() {
        let id = tok as usize;
        if id >= logits.cols {
            return Err(Error::TokenRange { id, vocab: logits.cols });
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[id];
    }
    Ok(total)
}

/// Splits `batch` examples between the diffusion and reconstruction terms in
/// proportion to the square roots of their variances.
pub fn allocate_split(var_diff: f64, var_recon: f64, batch: usize) -> Result<(usize, usize)> {
    if batch < 2 {
        return Err(Error::Size(format!("batch of {batch} cannot be split")));
    }
    if !(var_diff >= 0.0 && var_recon >= 0.0) {
        return Err(Error::Domain(format!("variances must be nonnegative, got {var_diff}, {var_recon}")));
    }
    let (sd, sr) = (var_diff.sqrt(), var_recon.sqrt());
    let frac = if sd + sr > 0.0 { sd / (sd + sr) } else { 0.5 };
    let n_diff = ((batch as f64 * frac).round() as usize).clamp(1, batch - 1);
    Ok((n_diff, batch - n_diff))
}

/// Exponential moving moments of the per-example diffusion and reconstruction terms.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTracker {
    pub decay: f64,
    pub warmup: u64,
    pub updates: u64,
    /// Per term: number of EMA updates, first moment, second moment.
    pub counts: [u64; 2],
    pub m1: [f64; 2],
    pub m2: [f64; 2],
}

impl Default for MomentTracker {
    fn default() -> Self {
        Self::new(MOMENT_DECAY, MOMENT_WARMUP)
    }
}

impl MomentTracker {
    pub fn new(decay: f64, warmup: u64) -> Self {
        Self { decay, warmup, updates: 0, counts: [0; 2], m1: [0.0; 2], m2: [0.0; 2] }
    }

    pub fn update(&mut self, diffusion: &[f64], recon: &[f64]) {
        for (k, xs) in [diffusion, recon].into_iter().enumerate() {
            if xs.is_empty() {
                continue;
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sq = xs.iter().map(|x| x * x).sum::<f64>() / n;
            self.m1[k] = self.decay * self.m1[k] + (1.0 - self.decay) * mean;
            self.m2[k] = self.decay * self.m2[k] + (1.0 - self.decay) * sq;
            self.counts[k] += 1;
        }
        self.updates += 1;
    }

    /// Bias-corrected variance estimates `(diffusion, recon)`, clamped at zero.
    pub fn variances(&self) -> (f64, f64) {
        let var = |k: usize| {
            if self.counts[k] == 0 {
                return 0.0;
            }
            let corr = 1.0 - self.decay.powi(self.counts[k] as i32);
            let (m1, m2) = (self.m1[k] / corr, self.m2[k] / corr);
            (m2 - m1 * m1).max(0.0)
        };
        (var(0), var(1))
    }

    /// Split for the next batch: equal until the warm-up is over.
    pub fn split(&self, batch: usize) -> Result<(usize, usize)> {
        if self.updates < self.warmup {
            return allocate_split(1.0, 1.0, batch);
        }
        let (vd, vr) = self.variances();
        allocate_split(vd, vr, batch)
    }
}

/// Mean of squared per-example diffusion losses; minimizing it over the interior of the
/// schedule minimizes the estimator's variance.
pub fn schedule_interior_loss(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Size(format!("need at least 2 samples, got {}", samples.len())));
    }
    Ok(samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64)
}

/// Per-sequence bound decomposition, in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VlbEstimate {
    pub prior_kl: f64,
    pub recon: f64,
    pub diffusion: f64,
    pub total: f64,
    pub n_diff: usize,
    pub n_recon: usize,
}

/// Where the schedule comes from: the model's trainable parameters or a fixed schedule.
#[derive(Clone, Copy, Debug)]
pub enum ScheduleSource<'a> {
    Model,
    Fixed(&'a NoiseSchedule),
}

/// `batch` token sequences of common padded length `seq`, flattened row-major.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Vec<TokenId>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(sequences: &[Vec<TokenId>]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::Input("empty sequences".into()));
        }
        let mut tokens = Vec::with_capacity(seq * sequences.len());
        for s in sequences {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(0, seq - s.len()));
        }
        let lengths = sequences.iter().map(Vec::len).collect();
        Ok(Self { tokens, batch: sequences.len(), seq, lengths })
    }

    /// Full-length batch from flat tokens.
    pub fn from_flat(tokens: Vec<TokenId>, seq: usize) -> Result<Self> {
        if seq == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq) {
            return Err(Error::Shape(format!("{} tokens do not form rows of {seq}", tokens.len())));
        }
        let batch = tokens.len() / seq;
        Ok(Self { tokens, batch, seq, lengths: vec![seq; batch] })
    }

    pub fn sequence(&self, b: usize) -> &[TokenId] {
        &self.tokens[b * self.seq..b * self.seq + self.lengths[b]]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(idx.len() * self.seq);
        for &b in idx {
            tokens.extend_from_slice(&self.tokens[b * self.seq..(b + 1) * self.seq]);
        }
        Self { tokens, batch: idx.len(), seq: self.seq, lengths: idx.iter().map(|&b| self.lengths[b]).collect() }
    }

    pub fn valid_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// All randomness of one bound estimate. The first `n_diff` examples form the diffusion
/// sub-batch; the rest are reconstruction examples at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct VlbDraws {
    pub n_diff: usize,
    /// Diffusion time per example (0 for reconstruction examples).
    pub t: Vec<f64>,
    /// `(B*L, d)` standard normal noise.
    pub eps: Mat,
    /// Per-example two-pass self-conditioning choices.
    pub two_pass: Vec<bool>,
}

/// Uniform draw on the open interval `(0, 1)`.
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn randn_mat<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

impl VlbDraws {
    pub fn sample<R: Rng + ?Sized>(batch: usize, seq: usize, dim: usize, n_diff: usize, rng: &mut R) -> Self {
        let t = (0..batch).map(|b| if b < n_diff { open_unit(rng) } else { 0.0 }).collect();
        let eps = randn_mat(batch * seq, dim, rng);
        let two_pass = crate::denoiser::draw_two_pass(batch, rng);
        Self { n_diff, t, eps, two_pass }
    }
}

/// Result of one bound evaluation, with gradients when requested.
#[derive(Clone, Debug)]
pub struct VlbOutcome {
    pub estimate: VlbEstimate,
    /// Per-sequence diffusion terms of the diffusion sub-batch.
    pub diffusion_samples: Vec<f64>,
    /// Per-sequence reconstruction terms of the reconstruction sub-batch.
    pub recon_samples: Vec<f64>,
    /// Per-sequence prior KL of every example.
    pub prior_samples: Vec<f64>,
    /// Training objective: `total / seq`, nats per token.
    pub loss: f64,
    /// Variance loss of the schedule interior on per-token diffusion terms.
    pub interior_loss: f64,
    /// Network invocations.
    pub passes: usize,
    /// One gradient per stored parameter: VLB gradient everywhere except the schedule
    /// interior, which receives the gradient of `interior_loss`.
    pub grads: Option<Vec<Mat>>,
}

struct ScheduleVars {
    gamma: Var,
    gamma_prime: Var,
    gamma1: Var,
    f_leaf: Option<(Var, Var)>,
}

fn schedule_vars(g: &mut Graph<'_>, model: &Model, source: ScheduleSource<'_>, t: &[f64], n_diff: usize, grad: bool) -> ScheduleVars {
    let sched = match source {
        ScheduleSource::Model => model.schedule(),
        ScheduleSource::Fixed(s) => s.clone(),
    };
    let mut f = vec![0.0; t.len()];
    let mut fp = vec![0.0; t.len()];
    for b in 0..n_diff {
        let (v, d) = sched.interior.eval(t[b]);
        f[b] = v;
        fp[b] = d;
    }
    match source {
        ScheduleSource::Model => {
            let (i0, i1) = model.gamma_ids();
            let g0 = g.param(i0);
            let g1 = g.param(i1);
            let span = g.sub(g1, g0);
            let (fv, fpv) = if grad {
                (g.input(Mat::column(f)), g.input(Mat::column(fp)))
            } else {
                (g.constant(Mat::column(f)), g.constant(Mat::column(fp)))
            };
            let scaled = g.mul(span, fv);
            let gamma = g.add(g0, scaled);
            let gamma_prime = g.mul(span, fpv);
            ScheduleVars { gamma, gamma_prime, gamma1: g1, f_leaf: grad.then_some((fv, fpv)) }
        }
        ScheduleSource::Fixed(s) => {
            let span = s.gamma1 - s.gamma0;
            let gamma = g.constant(Mat::column(f.iter().map(|v| s.gamma0 + span * v).collect()));
            let gamma_prime = g.constant(Mat::column(fp.iter().map(|v| span * v).collect()));
            let gamma1 = g.constant(Mat::scalar(s.gamma1));
            ScheduleVars { gamma, gamma_prime, gamma1, f_leaf: None }
        }
    }
}

/// Evaluates the bound on `batch` with fixed draws. With `grad`, also returns the
/// masked gradients described on [`VlbOutcome::grads`].
pub fn vlb_terms(
    model: &Model,
    source: ScheduleSource<'_>,
    batch: &TokenBatch,
    draws: &VlbDraws,
    self_cond: SelfCond<'_>,
    anneal: f64,
    grad: bool,
) -> Result<VlbOutcome> {
    let (b, l, d) = (batch.batch, batch.seq, model.config.embed_dim);
    if draws.t.len() != b || draws.eps.shape() != (b * l, d) || draws.n_diff > b {
        return Err(Error::Shape("draws do not match the batch".into()));
    }
    let vocab = model.config.vocab;
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenRange { id: bad as usize, vocab });
    }
    for b in 0..draws.n_diff {
        crate::diffusion::DiffusionTime::new(draws.t[b])?;
    }
    let n_diff = draws.n_diff;
    let n_recon = b - n_diff;
    let shape = BatchShape { batch: b, seq: l, t: draws.t.clone(), lengths: batch.lengths.clone() };

    let mut g = Graph::new(&model.params, grad);
    let table = g.param(model.embed_id());
    let x = g.gather_rows(table, batch.tokens.iter().map(|&t| t as usize).collect());
    let mask = g.constant(shape.mask());
    let sv = schedule_vars(&mut g, model, source, &draws.t, n_diff, grad);

    let half = g.scale(sv.gamma, 0.5);
    let sigma = g.exp(half);
    let sigma = g.repeat_rows(sigma, l);
    let eps = g.constant(draws.eps.clone());
    let noise = g.mul(eps, sigma);
    let z = g.add(x, noise);

    let out = Denoiser::new(model).forward(&mut g, z, sv.gamma, &shape, anneal, self_cond)?;

    let per_example = |g: &mut Graph<'_>, rows: Var| {
        let masked = g.mul(rows, mask);
        g.sum_groups(masked, l)
    };
    let select = |g: &mut Graph<'_>, values: Var, range: std::ops::Range<usize>, scale: f64| {
        let mut w = Mat::zeros(b, 1);
        for i in range {
            w.data[i] = scale;
        }
        let w = g.constant(w);
        let prod = g.mul(values, w);
        g.sum_all(prod)
    };

    // prior: |x|^2 exp(-gamma1) / 2
    let xsq = g.unary(Unary::Square, x);
    let xsq = g.sum_rows(xsq);
    let xsq = per_example(&mut g, xsq);
    let neg_g1 = g.scale(sv.gamma1, -1.0);
    let inv_s2_1 = g.exp(neg_g1);
    let prior = g.mul(xsq, inv_s2_1);
    let prior = g.scale(prior, 0.5);
    let prior_mean = select(&mut g, prior, 0..b, 1.0 / b as f64);

    // diffusion: gamma' exp(-gamma) |x - x_hat|^2 / 2
    let resid = g.sub(x, out.x_hat);
    let rsq = g.unary(Unary::Square, resid);
    let rsq = g.sum_rows(rsq);
    let rsq = per_example(&mut g, rsq);
    let neg_g = g.scale(sv.gamma, -1.0);
    let inv_s2 = g.exp(neg_g);
    let weight = g.mul(sv.gamma_prime, inv_s2);
    let diff = g.mul(weight, rsq);
    let diff = g.scale(diff, 0.5);
    let diff_mean = select(&mut g, diff, 0..n_diff, if n_diff > 0 { 1.0 / n_diff as f64 } else { 0.0 });

    // reconstruction: -log softmax(f(z_0))[x]
    let logp = g.log_softmax(out.logits);
    let picked = g.gather_cols(logp, batch.tokens.iter().map(|&t| t as usize).collect());
    let picked = per_example(&mut g, picked);
    let recon_mean = select(&mut g, picked, n_diff..b, if n_recon > 0 { -1.0 / n_recon as f64 } else { 0.0 });

    let total = g.add(prior_mean, diff_mean);
    let total = g.add(total, recon_mean);
    let loss = g.scale(total, 1.0 / l as f64);

    let diffusion_samples: Vec<f64> = g.value(diff).data[..n_diff].to_vec();
    let recon_samples: Vec<f64> = g.value(picked).data[n_diff..].iter().map(|v| -v).collect();
    let prior_samples = g.value(prior).data.clone();
    let estimate = VlbEstimate {
        prior_kl: g.value(prior_mean).item(),
        recon: g.value(recon_mean).item(),
        diffusion: g.value(diff_mean).item(),
        total: g.value(total).item(),
        n_diff,
        n_recon,
    };
    let per_token: Vec<f64> = diffusion_samples.iter().map(|v| v / l as f64).collect();
    let interior_loss = if per_token.len() >= 2 { schedule_interior_loss(&per_token)? } else { 0.0 };
    let loss_value = g.value(loss).item();

    let grads = if grad {
        let grads = g.backward(loss);
        let mut all = grads.param_grads(&model.params);
        if let Some((fv, fpv)) = sv.f_leaf {
            let interior = model.interior_id();
            all[interior.0] = match model.schedule().interior {
                InteriorMap::Learned(net) if n_diff >= 2 => {
                    let zero = Mat::zeros(b, 1);
                    let gf = grads.wrt(fv).unwrap_or(&zero);
                    let gfp = grads.wrt(fpv).unwrap_or(&zero);
                    // d/dF_b of mean_b (L_b/l)^2 = 2 (L_b/l) * dloss/dF_b, since F_b only
                    // reaches the loss through example b's diffusion term
                    let seed_f: Vec<f64> = (0..n_diff).map(|i| 2.0 * per_token[i] * gf.data[i]).collect();
                    let seed_fp: Vec<f64> = (0..n_diff).map(|i| 2.0 * per_token[i] * gfp.data[i]).collect();
                    let v = net.vjp(&draws.t[..n_diff], &seed_f, &seed_fp);
                    Mat::from_vec(1, v.len(), v)
                }
                _ => Mat::zeros(1, model.params.get(interior).cols),
            };
        }
        Some(all)
    } else {
        None
    };
    Ok(VlbOutcome { estimate, diffusion_samples, recon_samples, prior_samples, loss: loss_value, interior_loss, passes: out.passes, grads })
}

/// One stochastic bound estimate with the tracker-driven split; updates the tracker.
pub fn vlb_estimate<R: Rng + ?Sized>(
    model: &Model,
    batch: &TokenBatch,
    tracker: &mut MomentTracker,
    rng: &mut R,
    anneal_step: u64,
) -> Result<VlbEstimate> {
    let (n_diff, _) = tracker.split(batch.batch)?;
    let draws = VlbDraws::sample(batch.batch, batch.seq, model.config.embed_dim, n_diff, rng);
    let anneal = crate::denoiser::anneal_coefficient(anneal_step);
    let out = vlb_terms(model, ScheduleSource::Model, batch, &draws, SelfCond::Unroll(&draws.two_pass), anneal, false)?;
    tracker.update(&out.diffusion_samples, &out.recon_samples);
    Ok(out.estimate)
}

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_err: (var / n.max(1) as f64).sqrt(), draws: n }
    }
}

/// Shared randomness for comparing discrete and continuous bounds on one sequence:
/// a uniform time variable and a noise tensor per draw.
#[derive(Clone, Debug)]
pub struct OracleDraws {
    pub u: Vec<f64>,
    pub eps: Vec<Mat>,
}

impl OracleDraws {
    pub fn sample<R: Rng + ?Sized>(n: usize, seq: usize, dim: usize, rng: &mut R) -> Self {
        let u = (0..n).map(|_| open_unit(rng)).collect();
        let eps = (0..n).map(|_| randn_mat(seq, dim, rng)).collect();
        Self { u, eps }
    }
}

/// Bound on one sequence, terms in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBound {
    pub prior_kl: f64,
    pub recon: McEstimate,
    pub diffusion: McEstimate,
    pub total: f64,
    /// Diffusion term of each draw, in draw order.
    pub diffusion_draws: Vec<f64>,
}

/// `|x - x_hat(z_t)|^2` per draw with `z_t = x + sigma(t) eps`, two-pass self-conditioning.
fn residuals(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &[TokenId],
    times: &[f64],
    eps: &[Mat],
    anneal: f64,
    want_recon: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    const CHUNK: usize = 256;
    let l = tokens.len();
    let x = model.table().embed(tokens)?;
    let den = Denoiser::new(model);
    let d = model.config.embed_dim;
    let (mut sq, mut rec) = (Vec::with_capacity(times.len()), Vec::new());
    for start in (0..times.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(times.len());
        let n = end - start;
        let shape = BatchShape::full(times[start..end].to_vec(), l);
        let gammas: Vec<f64> = shape.t.iter().map(|&t| schedule.gamma(t)).collect::<Result<_>>()?;
        let mut z = Mat::zeros(n * l, d);
        for j in 0..n {
            let sigma = (gammas[j] / 2.0).exp();
            let e = &eps[start + j];
            for (k, v) in z.data[j * l * d..(j + 1) * l * d].iter_mut().enumerate() {
                *v = x.data[k] + sigma * e.data[k];
            }
        }
        let mut g = Graph::new(&model.params, false);
        let zv = g.constant(z);
        let gv = g.constant(Mat::column(gammas));
        let out = den.forward(&mut g, zv, gv, &shape, anneal, SelfCond::TwoPass)?;
        let xh = g.value(out.x_hat);
        let logits = g.value(out.logits);
        for j in 0..n {
            let r: f64 = xh.data[j * l * d..(j + 1) * l * d].iter().zip(&x.data).map(|(a, b)| (a - b).powi(2)).sum();
            sq.push(r);
            if want_recon {
                let rows = Mat::from_vec(l, logits.cols, logits.data[j * l * logits.cols..(j + 1) * l * logits.cols].to_vec());
                rec.push(reconstruction_loss(&rows, tokens)?);
            }
        }
    }
    Ok((sq, rec))
}

fn sequence_bound(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &[TokenId],
    draws: &OracleDraws,
    anneal: f64,
    diffusion: impl Fn(f64) -> Result<(f64, f64)>,
) -> Result<SequenceBound> {
    if draws.u.is_empty() || draws.u.len() != draws.eps.len() {
        return Err(Error::Argument("need a nonempty, consistent draw set".into()));
    }
    let x = model.table().embed(tokens)?;
    let prior = crate::diffusion::prior_kl(&x, schedule);
    let mut times = Vec::with_capacity(draws.u.len());
    let mut weights = Vec::with_capacity(draws.u.len());
    for &u in &draws.u {
        let (t, w) = diffusion(u)?;
        times.push(t);
        weights.push(w);
    }
    let (sq, _) = residuals(model, schedule, tokens, &times, &draws.eps, anneal, false)?;
    let diff: Vec<f64> = sq.iter().zip(&weights).map(|(r, w)| r * w).collect();
    let zeros = vec![0.0; draws.u.len()];
    let (_, rec) = residuals(model, schedule, tokens, &zeros, &draws.eps, anneal, true)?;
    let recon = McEstimate::from_samples(&rec);
    let diffusion = McEstimate::from_samples(&diff);
    Ok(SequenceBound { prior_kl: prior, recon, diffusion, total: prior + recon.mean + diffusion.mean, diffusion_draws: diff })
}

/// Bound with the finite-`T` diffusion term `sum_i KL(q(z_s|z_t,x) || q(z_s|z_t,x_hat))`.
///
/// Each draw picks the step `i = ceil(u T)` and contributes
/// `T (1/sigma^2(s) - 1/sigma^2(t)) |x - x_hat(z_t)|^2 / 2`.
pub fn discrete_vlb(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &[TokenId],
    steps: usize,
    draws: &OracleDraws,
    anneal: f64,
) -> Result<SequenceBound> {
    if steps == 0 {
        return Err(Error::Argument("T must be at least 1".into()));
    }
    let tf = steps as f64;
    sequence_bound(model, schedule, tokens, draws, anneal, |u| {
        let i = ((u * tf).ceil() as usize).clamp(1, steps);
        let (s, t) = ((i - 1) as f64 / tf, i as f64 / tf);
        let w = 0.5 * tf * (1.0 / schedule.sigma2(s)? - 1.0 / schedule.sigma2(t)?);
        Ok((t, w))
    })
}

/// The continuous-time bound on the same draws, with `t = u`.
pub fn continuous_vlb(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &[TokenId],
    draws: &OracleDraws,
    anneal: f64,
) -> Result<SequenceBound> {
    sequence_bound(model, schedule, tokens, draws, anneal, |u| Ok((u, -0.5 * schedule.snr_prime(u)?)))
}

/// Held-out evaluation settings.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub dataset: String,
    pub mc_draws: usize,
    pub seed: u64,
    pub anneal: f64,
    /// Sequences per forward batch.
    pub chunk: usize,
    /// Characters represented by the evaluated tokens; defaults to the token count.
    pub chars: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { dataset: "validation".into(), mc_draws: 1, seed: 0, anneal: 1.0, chunk: 16, chars: None }
    }
}

/// Structured evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub sequences: usize,
    pub tokens: usize,
    pub chars: usize,
    pub nats_per_token: f64,
    /// Standard error of `nats_per_token` over sequence-draws.
    pub std_err: f64,
    pub bpc: f64,
    pub ppl: f64,
    pub mc_draws: usize,
    pub seed: u64,
    pub prior_kl: f64,
    pub recon: f64,
    pub diffusion: f64,
}

impl EvalReport {
    pub fn to_record(&self) -> String {
        format!(
            "dataset={} sequences={} tokens={} chars={} nats_per_token={:.6} std_err={:.6} bpc={:.6} ppl={:.6} mc_draws={} seed={} prior_kl={:.6} recon={:.6} diffusion={:.6}",
            self.dataset,
            self.sequences,
            self.tokens,
            self.chars,
            self.nats_per_token,
            self.std_err,
            self.bpc,
            self.ppl,
            self.mc_draws,
            self.seed,
            self.prior_kl,
            self.recon,
            self.diffusion
        )
    }
}

pub fn bits_per_char(nats_per_char: f64) -> f64 {
    nats_per_char / std::f64::consts::LN_2
}

pub fn perplexity(nats_per_token: f64) -> f64 {
    nats_per_token.exp()
}

/// Monte-Carlo bound over a dataset. Each draw estimates every term on every sequence,
/// with stratified-jittered diffusion times and two-pass self-conditioning.
pub fn eval_nll(model: &Model, sequences: &[Vec<TokenId>], opts: &EvalOptions) -> Result<EvalReport> {
    if sequences.is_empty() || sequences.iter().all(Vec::is_empty) {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    if opts.mc_draws == 0 || opts.chunk == 0 {
        return Err(Error::Argument("mc_draws and chunk must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let k = opts.mc_draws;
    let d = model.config.embed_dim;
    let mut per_draw = Vec::with_capacity(sequences.len() * k);
    let (mut sum_prior, mut sum_recon, mut sum_diff) = (0.0, 0.0, 0.0);
    let tokens: usize = sequences.iter().map(Vec::len).sum();
    for chunk in sequences.chunks(opts.chunk) {
        let n = chunk.len();
        let mut doubled: Vec<Vec<TokenId>> = chunk.to_vec();
        doubled.extend_from_slice(chunk);
        let batch = TokenBatch::new(&doubled)?;
        let mut totals = vec![vec![0.0; k]; n];
        for draw in 0..k {
            let mut t = vec![0.0; 2 * n];
            for tb in t.iter_mut().take(n) {
                *tb = ((draw as f64 + open_unit(&mut rng)) / k as f64).min(1.0 - f64::EPSILON);
            }
            let eps = randn_mat(2 * n * batch.seq, d, &mut rng);
            let draws = VlbDraws { n_diff: n, t, eps, two_pass: vec![true; 2 * n] };
            let out = vlb_terms(model, ScheduleSource::Model, &batch, &draws, SelfCond::TwoPass, opts.anneal, false)?;
            for i in 0..n {
                let v = out.prior_samples[i] + out.diffusion_samples[i] + out.recon_samples[i];
                totals[i][draw] = v;
                sum_prior += out.prior_samples[i];
                sum_diff += out.diffusion_samples[i];
                sum_recon += out.recon_samples[i];
            }
        }
        for (i, seq) in chunk.iter().enumerate() {
            for &v in &totals[i] {
                per_draw.push(v / seq.len().max(1) as f64);
            }
        }
    }
    let draws_total = (k * sequences.len()) as f64;
    let total_nats = (sum_prior + sum_recon + sum_diff) / k as f64;
    let nats_per_token = total_nats / tokens as f64;
    let chars = opts.chars.unwrap_or(tokens);
    Ok(EvalReport {
        dataset: opts.dataset.clone(),
        sequences: sequences.len(),
        tokens,
        chars,
        nats_per_token,
        std_err: McEstimate::from_samples(&per_draw).std_err,
        bpc: bits_per_char(total_nats / chars as f64),
        ppl: perplexity(nats_per_token),
        mc_draws: k,
        seed: opts.seed,
        prior_kl: sum_prior / draws_total,
        recon: sum_recon / draws_total,
        diffusion: sum_diff / draws_total,
    })
}
