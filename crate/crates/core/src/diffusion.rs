//! Variance-exploding Gaussian forward process and the learned noise schedule.
//!
//! The schedule is `gamma(t) = log sigma^2(t) = gamma0 + (gamma1 - gamma0) * F(t)` where
//! `F` is a monotone map of `[0, 1]` onto itself. Endpoints and interior are trained by
//! different objectives, so they are kept as separate parameters.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::softplus;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// A point of diffusion time, always within `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DiffusionTime(f64);

impl DiffusionTime {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::TimeDomain(t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn check_time(t: f64) -> Result<f64> {
    DiffusionTime::new(t).map(DiffusionTime::get)
}

/// Strictly increasing map `F: [0,1] -> [0,1]` with `F(0) = 0` and `F(1) = 1`.
///
/// `G(t) = sum_k softplus(a_k) sigmoid(softplus(w_k) t + b_k) + softplus(c) t` has
/// positive weights throughout, and `F(t) = (G(t) - G(0)) / (G(1) - G(0))`.
///
/// Raw parameters are laid out flat as `[a (K), w (K), b (K), c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneNet {
    pub raw: Vec<f64>,
}

struct Unit {
    a: f64,
    w: f64,
    b: f64,
}

impl MonotoneNet {
    /// Parameters whose map is close to the identity.
    pub fn near_identity(hidden: usize) -> Self {
        let mut raw = Vec::with_capacity(3 * hidden + 1);
        raw.extend(std::iter::repeat_n(-4.0, hidden));
        raw.extend(std::iter::repeat_n(1.0, hidden));
        raw.extend((0..hidden).map(|k| -4.0 + 8.0 * (k as f64 + 0.5) / hidden as f64));
        raw.push((1f64.exp() - 1.0).ln());
        Self { raw }
    }

    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.len() % 3 != 1 {
            return Err(Error::Shape(format!("monotone map needs 3K+1 parameters, got {}", raw.len())));
        }
        Ok(Self { raw })
    }

    pub fn hidden(&self) -> usize {
        self.raw.len() / 3
    }

    fn unit(&self, k: usize) -> Unit {
        let h = self.hidden();
        Unit { a: softplus(self.raw[k]), w: softplus(self.raw[h + k]), b: self.raw[2 * h + k] }
    }

    fn linear(&self) -> f64 {
        softplus(self.raw[3 * self.hidden()])
    }

    fn g_and_slope(&self, t: f64) -> (f64, f64) {
        let mut g = self.linear() * t;
        let mut slope = self.linear();
        for k in 0..self.hidden() {
            let u = self.unit(k);
            let s = crate::autograd::sigmoid(u.w * t + u.b);
            g += u.a * s;
            slope += u.a * u.w * s * (1.0 - s);
        }
        (g, slope)
    }

    /// `(F(t), F'(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let (g0, _) = self.g_and_slope(0.0);
        let (g1, _) = self.g_and_slope(1.0);
        let (gt, slope) = self.g_and_slope(t);
        let d = g1 - g0;
        ((gt - g0) / d, slope / d)
    }

    /// Vector-Jacobian product: gradient of `sum_i gf[i] F(ts[i]) + gfp[i] F'(ts[i])`
    /// with respect to the raw parameters.
    pub fn vjp(&self, ts: &[f64], gf: &[f64], gfp: &[f64]) -> Vec<f64> {
        let h = self.hidden();
        let n = self.raw.len();
        // d/d(a, w, b, c) of G(t), in the unconstrained (post-softplus) coordinates
        let dg = |t: f64| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for k in 0..h {
                let u = self.unit(k);
                let s = crate::autograd::sigmoid(u.w * t + u.b);
                let ds = s * (1.0 - s);
                out[k] = s;
                out[h + k] = u.a * ds * t;
                out[2 * h + k] = u.a * ds;
            }
            out[3 * h] = t;
            out
        };
        let dslope = |t: f64| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for k in 0..h {
                let u = self.unit(k);
                let s = crate::autograd::sigmoid(u.w * t + u.b);
                let ds = s * (1.0 - s);
                let dds = ds * (1.0 - 2.0 * s);
                out[k] = u.w * ds;
                out[h + k] = u.a * ds + u.a * u.w * dds * t;
                out[2 * h + k] = u.a * u.w * dds;
            }
            out[3 * h] = 1.0;
            out
        };
        let (g0, _) = self.g_and_slope(0.0);
        let (g1, _) = self.g_and_slope(1.0);
        let d = g1 - g0;
        let (dg0, dg1) = (dg(0.0), dg(1.0));
        let dd: Vec<f64> = dg1.iter().zip(&dg0).map(|(a, b)| a - b).collect();
        let mut grad = vec![0.0; n];
        for ((&t, &gfi), &gpi) in ts.iter().zip(gf).zip(gfp) {
            let (f, fp) = self.eval(t);
            let dgt = dg(t);
            let dsl = dslope(t);
            for j in 0..n {
                let df = (dgt[j] - dg0[j] - f * dd[j]) / d;
                let dfp = (dsl[j] - fp * dd[j]) / d;
                grad[j] += gfi * df + gpi * dfp;
            }
        }
        // chain through the softplus reparameterization of a, w and c
        for k in 0..h {
            grad[k] *= crate::autograd::sigmoid(self.raw[k]);
            grad[h + k] *= crate::autograd::sigmoid(self.raw[h + k]);
        }
        grad[3 * h] *= crate::autograd::sigmoid(self.raw[3 * h]);
        grad
    }
}

/// Shape of the normalized interior `F` of the schedule.
#[derive(Clone, Debug, PartialEq)]
pub enum InteriorMap {
    /// `F(t) = t`: log-linear schedule.
    Identity,
    /// `F(t) = t^p`, `p > 0`.
    Power(f64),
    /// Trainable monotone map.
    Learned(MonotoneNet),
}

impl InteriorMap {
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            InteriorMap::Identity => (t, 1.0),
            InteriorMap::Power(p) => (t.powf(*p), if t == 0.0 && *p < 1.0 { f64::INFINITY } else { p * t.powf(p - 1.0) }),
            InteriorMap::Learned(net) => net.eval(t),
        }
    }
}

/// Learned noise schedule `sigma^2(t) = exp(gamma(t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub gamma0: f64,
    pub gamma1: f64,
    pub interior: InteriorMap,
}

impl NoiseSchedule {
    pub fn new(gamma0: f64, gamma1: f64, interior: InteriorMap) -> Self {
        Self { gamma0, gamma1, interior }
    }

    /// Log-linear schedule between `sigma2_0` and `sigma2_1`.
    pub fn log_linear(sigma2_0: f64, sigma2_1: f64) -> Self {
        Self::new(sigma2_0.ln(), sigma2_1.ln(), InteriorMap::Identity)
    }

    /// `gamma(t) = log sigma^2(t)`, unchecked.
    pub fn gamma_unchecked(&self, t: f64) -> f64 {
        let (f, _) = self.interior.eval(t);
        self.gamma0 + (self.gamma1 - self.gamma0) * f
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        Ok(self.gamma_unchecked(check_time(t)?))
    }

    /// `d gamma / dt`.
    pub fn gamma_prime(&self, t: f64) -> Result<f64> {
        let (_, fp) = self.interior.eval(check_time(t)?);
        Ok((self.gamma1 - self.gamma0) * fp)
    }

    pub fn sigma2(&self, t: f64) -> Result<f64> {
        self.gamma(t).map(f64::exp)
    }

    pub fn sigma2_unchecked(&self, t: f64) -> f64 {
        self.gamma_unchecked(t).exp()
    }

    /// `d/dt (1 / sigma^2(t)) = -gamma'(t) exp(-gamma(t))`.
    pub fn snr_prime(&self, t: f64) -> Result<f64> {
        let g = self.gamma(t)?;
        let gp = self.gamma_prime(t)?;
        if gp == 0.0 {
            return Ok(0.0);
        }
        Ok(-gp * (-g).exp())
    }
}

/// Noisy latent `z_t` for one sequence, shape `(L, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub z: Mat,
    pub t: DiffusionTime,
}

/// Draws `z_t = x + sigma(t) * eps` with `eps ~ N(0, I)`.
pub fn sample_latent<R: Rng + ?Sized>(x_embed: &Mat, t: f64, schedule: &NoiseSchedule, rng: &mut R) -> Result<Latent> {
    let eps = Mat::from_vec(x_embed.rows, x_embed.cols, (0..x_embed.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    latent_from_noise(x_embed, t, schedule, &eps)
}

/// `z_t = x + sigma(t) * eps` for a given noise tensor.
pub fn latent_from_noise(x_embed: &Mat, t: f64, schedule: &NoiseSchedule, eps: &Mat) -> Result<Latent> {
    if eps.shape() != x_embed.shape() {
        return Err(Error::Shape(format!("noise {:?} vs embedding {:?}", eps.shape(), x_embed.shape())));
    }
    let sigma = schedule.sigma2(t)?.sqrt();
    let data = x_embed.data.iter().zip(&eps.data).map(|(x, e)| x + sigma * e).collect();
    Ok(Latent { z: Mat::from_vec(x_embed.rows, x_embed.cols, data), t: DiffusionTime::new(t)? })
}

/// Mean and (isotropic) variance of `q(z_s | z_t, x = x_hat)` for `s < t`.
pub fn posterior_params(z_t: &Mat, x_hat: &Mat, s: f64, t: f64, schedule: &NoiseSchedule) -> Result<(Mat, f64)> {
    let (s, t) = (check_time(s)?, check_time(t)?);
    if s >= t {
        return Err(Error::TimeOrder { s, t });
    }
    posterior_from_sigma2(z_t, x_hat, schedule.sigma2_unchecked(s), schedule.sigma2_unchecked(t))
}

/// Posterior of the variance-exploding bridge given the two noise levels directly.
///
/// Requires `0 <= sigma2_s <= sigma2_t`; equality gives the degenerate bridge.
pub fn posterior_from_sigma2(z_t: &Mat, x_hat: &Mat, sigma2_s: f64, sigma2_t: f64) -> Result<(Mat, f64)> {
    if z_t.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("latent {:?} vs estimate {:?}", z_t.shape(), x_hat.shape())));
    }
    if !(sigma2_s >= 0.0 && sigma2_s <= sigma2_t && sigma2_t > 0.0) {
        return Err(Error::Domain(format!("need 0 <= sigma2_s <= sigma2_t, got {sigma2_s}, {sigma2_t}")));
    }
    let ratio = sigma2_s / sigma2_t;
    let data = z_t.data.iter().zip(&x_hat.data).map(|(z, x)| x + ratio * (z - x)).collect();
    let var = sigma2_s * (1.0 - ratio);
    Ok((Mat::from_vec(z_t.rows, z_t.cols, data), var.max(0.0)))
}

/// `KL(q(z_1 | x) || N(0, sigma^2(1) I)) = |x|^2 / (2 sigma^2(1))`, in nats.
pub fn prior_kl(x_embed: &Mat, schedule: &NoiseSchedule) -> f64 {
    x_embed.sq_norm() / (2.0 * schedule.sigma2_unchecked(1.0))
}
