use plaid_core::autograd::Graph;
use plaid_core::denoiser::{BatchShape, Denoiser};
use plaid_core::diffusion::{posterior_params, prior_kl, InteriorMap, NoiseSchedule};
use plaid_core::objective::{continuous_vlb, discrete_vlb, OracleDraws};
use plaid_core::{Mat, SelfCond};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::support::{mean_se, rng, tiny_model, var_se, Checks, Outcome};

fn normal<R: Rng>(r: &mut R) -> f64 {
    r.sample(StandardNormal)
}

/// Gaussian log-density ratio `log N(z; a, v) - log N(z; b, v)` summed over coordinates.
fn log_ratio(z: &[f64], a: &[f64], b: &[f64], v: f64) -> f64 {
    z.iter().zip(a).zip(b).map(|((z, a), b)| ((z - b).powi(2) - (z - a).powi(2)) / (2.0 * v)).sum()
}

pub fn gaussian_oracles() -> Outcome {
    let mut c = Checks::default();
    let sched = NoiseSchedule::new(-3.0, 1.0, InteriorMap::Power(1.5));
    let mut r = rng(11);

    // prior KL against E_q[log q(z1|x) - log p(z1)] with p = N(0, sigma^2(1) I)
    let x = Mat::randn(4, 3, 0.7, &mut r);
    let s1 = sched.sigma2(1.0).unwrap();
    let zeros = vec![0.0; x.len()];
    let draws: Vec<f64> = (0..200_000)
        .map(|_| {
            let z: Vec<f64> = x.data.iter().map(|m| m + s1.sqrt() * normal(&mut r)).collect();
            log_ratio(&z, &x.data, &zeros, s1)
        })
        .collect();
    let (m, se) = mean_se(&draws);
    let kl = prior_kl(&x, &sched);
    c.check((m - kl).abs() <= 3.0 * se, format!("prior_kl {kl:.5} vs MC {m:.5}±{se:.5}"));

    // posterior: regress z_s on z_t from the joint forward process
    let (s, t, x0) = (0.3, 0.7, 0.8);
    let (vs, vt) = (sched.sigma2(s).unwrap(), sched.sigma2(t).unwrap());
    let n = 400_000;
    let mut zs = Vec::with_capacity(n);
    let mut zt = Vec::with_capacity(n);
    for _ in 0..n {
        let a = x0 + vs.sqrt() * normal(&mut r);
        zs.push(a);
        zt.push(a + (vt - vs).sqrt() * normal(&mut r));
    }
    let nf = n as f64;
    let (mx, my) = (zt.iter().sum::<f64>() / nf, zs.iter().sum::<f64>() / nf);
    let sxx: f64 = zt.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = zt.iter().zip(&zs).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = zt.iter().zip(&zs).map(|(a, b)| b - intercept - slope * a).collect();
    let (rv, rv_se) = var_se(&resid);
    let slope_se = (rv / sxx).sqrt();
    let xhat = Mat::scalar(x0);
    let (m0, var) = posterior_params(&Mat::scalar(0.0), &xhat, s, t, &sched).unwrap();
    let (m1, _) = posterior_params(&Mat::scalar(1.0), &xhat, s, t, &sched).unwrap();
    let lib_slope = m1.data[0] - m0.data[0];
    let at_mean = m0.data[0] + lib_slope * mx;
    let pred_se = (rv / nf).sqrt();
    c.check((lib_slope - slope).abs() <= 3.0 * slope_se, format!("posterior slope {lib_slope:.5} vs MC {slope:.5}±{slope_se:.5}"));
    c.check(
        (at_mean - (intercept + slope * mx)).abs() <= 3.0 * pred_se,
        format!("posterior mean at E[z_t] {at_mean:.5} vs MC {:.5}±{pred_se:.5}", intercept + slope * mx),
    );
    c.check((var - rv).abs() <= 3.0 * rv_se, format!("posterior variance {var:.5} vs MC {rv:.5}±{rv_se:.5}"));

    // per-step KL of the discrete bound
    let model = tiny_model(5, 3, 21);
    let msched = model.schedule();
    let tokens = [1u32, 4, 2];
    let steps = 8;
    let draws = OracleDraws::sample(1, 3, model.config.embed_dim, &mut r);
    let bound = discrete_vlb(&model, &msched, &tokens, steps, &draws, 1.0).unwrap();
    let i = ((draws.u[0] * steps as f64).ceil() as usize).clamp(1, steps);
    let (s, t) = ((i - 1) as f64 / steps as f64, i as f64 / steps as f64);
    let x = model.table().embed(&tokens).unwrap();
    let gamma = msched.gamma(t).unwrap();
    let mut z = x.clone();
    for (zv, e) in z.data.iter_mut().zip(&draws.eps[0].data) {
        *zv += (gamma / 2.0).exp() * e;
    }
    let den = Denoiser::new(&model);
    let mut g = Graph::new(&model.params, false);
    let zv = g.constant(z.clone());
    let gv = g.constant(Mat::scalar(gamma));
    let out = den.forward(&mut g, zv, gv, &BatchShape::full(vec![t], 3), 1.0, SelfCond::TwoPass).unwrap();
    let xh = g.value(out.x_hat).clone();
    let (mu_x, v) = posterior_params(&z, &x, s, t, &msched).unwrap();
    let (mu_h, _) = posterior_params(&z, &xh, s, t, &msched).unwrap();
    let sq: f64 = x.data.iter().zip(&xh.data).map(|(a, b)| (a - b).powi(2)).sum();
    let closed = 0.5 * (1.0 / msched.sigma2(s).unwrap() - 1.0 / msched.sigma2(t).unwrap()) * sq;
    let per_step = bound.diffusion.mean / steps as f64;
    c.check(
        (per_step - closed).abs() <= 1e-9 * closed.max(1e-12),
        format!("discrete step {i}/{steps}: bound/T {per_step:.6e} = closed form {closed:.6e}"),
    );
    let kl_draws: Vec<f64> = (0..200_000)
        .map(|_| {
            let zz: Vec<f64> = mu_x.data.iter().map(|m| m + v.sqrt() * normal(&mut r)).collect();
            log_ratio(&zz, &mu_x.data, &mu_h.data, v)
        })
        .collect();
    let (km, kse) = mean_se(&kl_draws);
    c.check((km - closed).abs() <= 3.0 * kse, format!("step KL {closed:.5} vs MC {km:.5}±{kse:.5}"));
    c.outcome()
}

pub fn continuous_discrete_consistency() -> Outcome {
    let mut c = Checks::default();
    let model = tiny_model(2, 2, 5);
    let sched = model.schedule();
    let tokens = [0u32, 1];
    let draws = OracleDraws::sample(20_000, 2, model.config.embed_dim, &mut rng(6));
    let cont = continuous_vlb(&model, &sched, &tokens, &draws, 1.0).unwrap();
    let ts = [16usize, 64, 256, 1024, 4096];
    let bounds: Vec<_> = ts.iter().map(|&t| discrete_vlb(&model, &sched, &tokens, t, &draws, 1.0).unwrap()).collect();
    let summary: Vec<String> = ts.iter().zip(&bounds).map(|(t, b)| format!("L{t}={:.5}", b.total)).collect();
    c.note(format!("{} continuous={:.5}±{:.5}", summary.join(" "), cont.total, cont.diffusion.std_err));
    for k in 0..ts.len() - 1 {
        let diffs: Vec<f64> = bounds[k].diffusion_draws.iter().zip(&bounds[k + 1].diffusion_draws).map(|(a, b)| a - b).collect();
        let (m, se) = mean_se(&diffs);
        c.check(m >= -3.0 * se, format!("L{} - L{} = {m:.2e}±{se:.1e} >= 0", ts[k], ts[k + 1]));
    }
    let gaps: Vec<f64> = bounds.iter().map(|b| (b.total - cont.total).abs()).collect();
    c.check(gaps[gaps.len() - 1] <= gaps[0], format!("gap shrinks {:.2e} -> {:.2e}", gaps[0], gaps[gaps.len() - 1]));
    let last = &bounds[bounds.len() - 1];
    let combined = (last.diffusion.std_err.powi(2) + cont.diffusion.std_err.powi(2)).sqrt();
    c.check(gaps[gaps.len() - 1] <= 3.0 * combined, format!("|L4096 - continuous| {:.2e} <= 3x{combined:.2e}", gaps[gaps.len() - 1]));
    c.outcome()
}
