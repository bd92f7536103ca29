//! Optimization loop: learning-rate and weight-decay ramps, sequence-length truncation,
//! AdamW with gradient clipping, and resumable training state.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{anneal_coefficient, SelfCond};
use crate::embedding::TokenId;
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};
use crate::objective::{vlb_terms, MomentTracker, ScheduleSource, TokenBatch, VlbDraws};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub truncate_frac: f64,
    pub seed: u64,
    pub wd_coeff: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.4e-3,
            warmup_steps: 2500,
            total_steps: 20_000,
            batch_size: 16,
            seq_len: 64,
            truncate_frac: 0.03,
            seed: 0,
            wd_coeff: 4e-5,
            clip_norm: Some(1.0),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps)));
        }
        if !(0.0..=1.0).contains(&self.truncate_frac) {
            return Err(Error::Config(format!("truncate_frac {} outside [0, 1]", self.truncate_frac)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.wd_coeff >= 0.0) {
            return Err(Error::Config("base_lr and wd_coeff must be nonnegative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier in `[0, 1]`: linear warmup, then linear decay to zero.
pub fn ramp(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::StepRange { step, total: cfg.total_steps });
    }
    let (s, w, n) = (step as f64, cfg.warmup_steps as f64, cfg.total_steps as f64);
    Ok(if step < cfg.warmup_steps {
        s / w
    } else if cfg.total_steps == cfg.warmup_steps {
        if step == cfg.total_steps && cfg.total_steps > 0 {
            0.0
        } else {
            1.0
        }
    } else {
        (n - s) / (n - w)
    })
}

/// `(lr, wd)` at `step`. Both share the ramp; `wd = ramp * wd_coeff / base_lr`, so that
/// `lr * wd = wd_coeff` at the peak, and `wd = 0` whenever `lr = 0`.
pub fn lr_wd_schedule(step: u64, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let r = ramp(step, cfg)?;
    let lr = cfg.base_lr * r;
    let wd = if lr == 0.0 { 0.0 } else { r * cfg.wd_coeff / cfg.base_lr };
    Ok((lr, wd))
}

/// Independently truncates each sequence with probability `frac` to a length uniform on
/// `[1, L]`.
pub fn truncate_batch<R: Rng + ?Sized>(batch: &TokenBatch, frac: f64, rng: &mut R) -> Result<TokenBatch> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Domain(format!("truncation fraction {frac} outside [0, 1]")));
    }
    let mut out = batch.clone();
    for (len, cut) in out.lengths.iter_mut().zip(truncation_draws(batch.batch, batch.seq, frac, rng)) {
        if let Some(c) = cut {
            *len = c.min(*len);
        }
    }
    Ok(out)
}

/// Per-example truncated length, `None` for examples that are not selected.
pub fn truncation_draws<R: Rng + ?Sized>(batch: usize, seq: usize, frac: f64, rng: &mut R) -> Vec<Option<usize>> {
    (0..batch).map(|_| (frac > 0.0 && rng.random::<f64>() < frac).then(|| rng.random_range(1..=seq))).collect()
}

/// Uniformly drawn training sequences from a flat token stream cut into rows of `seq`.
pub fn draw_batch<R: Rng + ?Sized>(tokens: &[TokenId], seq: usize, batch: usize, rng: &mut R) -> Result<TokenBatch> {
    let rows = tokens.len() / seq.max(1);
    if rows == 0 {
        return Err(Error::Input(format!("{} tokens cannot fill a sequence of {seq}", tokens.len())));
    }
    let mut flat = Vec::with_capacity(batch * seq);
    for _ in 0..batch {
        let r = rng.random_range(0..rows);
        flat.extend_from_slice(&tokens[r * seq..(r + 1) * seq]);
    }
    TokenBatch::from_flat(flat, seq)
}

/// First and second moments of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Mat> = model.params.iter().map(|(_, _, p)| Mat::zeros(p.rows, p.cols)).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// Generator position, restorable exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub adam: AdamState,
    pub tracker: MomentTracker,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let adam = AdamState::new(&model);
        Self { step: 0, model, adam, tracker: MomentTracker::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Output-prior anneal position; the global step.
    pub fn anneal_step(&self) -> u64 {
        self.step
    }
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.model == other.model
            && self.adam == other.adam
            && self.tracker == other.tracker
            && RngState::capture(&self.rng) == RngState::capture(&other.rng)
    }
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub prior_kl: f64,
    pub diffusion: f64,
    pub recon: f64,
    pub loss: f64,
    pub interior_loss: f64,
    pub n_diff: usize,
    pub n_recon: usize,
    pub lr: f64,
    pub wd: f64,
    pub grad_norm: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub truncated: usize,
    /// Seconds spent in this step; excluded from equality.
    pub wallclock: f64,
}

impl StepMetrics {
    /// Copy with wall-clock time zeroed, for determinism comparisons.
    pub fn timeless(&self) -> Self {
        Self { wallclock: 0.0, ..self.clone() }
    }

    pub fn to_record(&self) -> String {
        format!(
            "step={} total={:.6} prior_kl={:.6} diffusion={:.6} recon={:.6} n_diff={} n_recon={} lr={:.6e} wd={:.6e} grad_norm={:.6} gamma0={:.4} gamma1={:.4} truncated={} wallclock={:.3}",
            self.step,
            self.total,
            self.prior_kl,
            self.diffusion,
            self.recon,
            self.n_diff,
            self.n_recon,
            self.lr,
            self.wd,
            self.grad_norm,
            self.gamma0,
            self.gamma1,
            self.truncated,
            self.wallclock
        )
    }
}

fn norm(grads: &[Mat], keep: impl Fn(usize) -> bool) -> f64 {
    grads.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}

/// One optimizer update on `batch` (before truncation).
///
/// Gradients of the schedule interior come from the variance loss and are clipped
/// separately from the rest. Weight decay applies to denoiser weights only.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &TokenBatch) -> Result<StepMetrics> {
    let start = Instant::now();
    let step = state.step;
    let (lr, wd) = lr_wd_schedule(step, cfg)?;
    let model = &state.model;
    let batch = truncate_batch(batch, cfg.truncate_frac, &mut state.rng)?;
    let truncated = batch.lengths.iter().filter(|&&l| l < batch.seq).count();
    let (n_diff, _) = state.tracker.split(batch.batch)?;
    let draws = VlbDraws::sample(batch.batch, batch.seq, model.config.embed_dim, n_diff, &mut state.rng);
    let anneal = anneal_coefficient(state.anneal_step());
    let out = vlb_terms(model, ScheduleSource::Model, &batch, &draws, SelfCond::Unroll(&draws.two_pass), anneal, true)?;
    let e = out.estimate;
    if !(e.total.is_finite() && out.interior_loss.is_finite()) {
        return Err(Error::NonFiniteLoss { step, prior_kl: e.prior_kl, recon: e.recon, diffusion: e.diffusion });
    }
    let mut grads = out.grads.expect("gradients requested");
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step, prior_kl: e.prior_kl, recon: e.recon, diffusion: e.diffusion });
    }
    state.tracker.update(&out.diffusion_samples, &out.recon_samples);

    let interior = model.interior_id().0;
    let grad_norm = norm(&grads, |i| i != interior);
    if let Some(c) = cfg.clip_norm {
        let interior_norm = norm(&grads, |i| i == interior);
        for (i, g) in grads.iter_mut().enumerate() {
            let n = if i == interior { interior_norm } else { grad_norm };
            if n > c {
                g.scale_assign(c / n);
            }
        }
    }

    let groups: Vec<ParamGroup> = model.params.ids().map(|id| model.group(id)).collect();
    let adam = &mut state.adam;
    adam.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(adam.t as i32);
    let c2 = 1.0 - b2.powi(adam.t as i32);
    let ids: Vec<_> = state.model.params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = state.model.params.get_mut(id);
        let decay = if groups[i] == ParamGroup::Denoiser { lr * wd } else { 0.0 };
        let (m, v, g) = (&mut adam.m[i].data, &mut adam.v[i].data, &grads[i].data);
        for k in 0..p.data.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            if lr > 0.0 {
                let upd = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
                p.data[k] -= lr * upd + decay * p.data[k];
            }
        }
    }
    state.step += 1;
    let sched = state.model.schedule();
    Ok(StepMetrics {
        step,
        total: e.total,
        prior_kl: e.prior_kl,
        diffusion: e.diffusion,
        recon: e.recon,
        loss: out.loss,
        interior_loss: out.interior_loss,
        n_diff: e.n_diff,
        n_recon: e.n_recon,
        lr,
        wd,
        grad_norm,
        gamma0: sched.gamma0,
        gamma1: sched.gamma1,
        truncated,
        wallclock: start.elapsed().as_secs_f64(),
    })
}

/// Runs `steps` updates on batches drawn from `tokens`, calling `on_step` after each.
pub fn train_loop<F>(state: &mut TrainState, cfg: &TrainConfig, tokens: &[TokenId], steps: u64, mut on_step: F) -> Result<()>
where
    F: FnMut(&TrainState, &StepMetrics) -> Result<bool>,
{
    for _ in 0..steps {
        if state.step >= cfg.total_steps {
            break;
        }
        let batch = draw_batch(tokens, cfg.seq_len, cfg.batch_size, &mut state.rng)?;
        let metrics = train_step(state, cfg, &batch)?;
        if !on_step(state, &metrics)? {
            break;
        }
    }
    Ok(())
}
