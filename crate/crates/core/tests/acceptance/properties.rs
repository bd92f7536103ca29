use plaid_core::denoiser::anneal_coefficient;
use plaid_core::diffusion::{posterior_params, InteriorMap, MonotoneNet, NoiseSchedule};
use plaid_core::objective::{continuous_vlb, OracleDraws};
use plaid_core::{
    eval_nll, sample, DenoiserConfig, EvalOptions, GuidanceSpec, GuidanceTerm, Mat, Model, SamplerConfig, TokenId, TrainConfig, TrainState,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::support::{mean_se, rng, tiny_model, var_se, Checks, Outcome};

/// Trains from scratch on a stream made of `seqs` repeated, rows aligned to sequences.
fn fit(cfg: DenoiserConfig, seqs: &[Vec<TokenId>], tc: &TrainConfig, seed: u64, mut at: impl FnMut(&TrainState)) -> TrainState {
    let stream: Vec<TokenId> = seqs.iter().cycle().take(seqs.len() * 16).flatten().copied().collect();
    let mut state = TrainState::new(Model::new(cfg, &mut rng(seed)).unwrap(), seed + 1);
    at(&state);
    plaid_core::train_loop(&mut state, tc, &stream, tc.total_steps, |s, _| {
        at(s);
        Ok(true)
    })
    .unwrap();
    state
}

fn gauss<R: Rng>(r: &mut R) -> f64 {
    r.sample(StandardNormal)
}

pub fn posterior_marginals() -> Outcome {
    let mut c = Checks::default();
    let sched = NoiseSchedule::new(-4.0, 2.0, InteriorMap::Power(0.8));
    let mut r = rng(71);
    let n = 100_000;
    for (x0, s, t) in [(0.6, 0.2, 0.5), (-1.3, 0.45, 0.95), (2.0, 0.0, 0.1)] {
        let (vs, vt) = (sched.sigma2(s).unwrap(), sched.sigma2(t).unwrap());
        let zt = Mat::from_vec(n, 1, (0..n).map(|_| x0 + vt.sqrt() * gauss(&mut r)).collect());
        let (mu, v) = posterior_params(&zt, &Mat::from_vec(n, 1, vec![x0; n]), s, t, &sched).unwrap();
        let zs: Vec<f64> = mu.data.iter().map(|m| m + v.sqrt() * gauss(&mut r)).collect();
        let (m, mse) = mean_se(&zs);
        let (var, vse) = var_se(&zs);
        c.check(
            (m - x0).abs() <= 3.0 * mse && (var - vs).abs() <= 3.0 * vse,
            format!("s={s} t={t}: mean {m:.4}±{mse:.4} vs {x0}, var {var:.5}±{vse:.5} vs {vs:.5}"),
        );
    }
    c.outcome()
}

pub fn interior_invariance() -> Outcome {
    let mut c = Checks::default();
    let mut model = tiny_model(4, 3, 72);
    // the denoiser then sees time only through sigma^2(t)
    let time_w = model.params.find("denoiser.time.weight").unwrap();
    model.params.get_mut(time_w).data.iter_mut().for_each(|v| *v = 0.0);
    let base = model.schedule();
    let tokens = [2u32, 0, 3];
    let interiors = [
        ("identity", InteriorMap::Identity),
        ("power 2", InteriorMap::Power(2.0)),
        ("power 0.6", InteriorMap::Power(0.6)),
        ("learned", InteriorMap::Learned(MonotoneNet::from_raw(vec![1.5, -0.8, 2.0, 0.7, -1.2, 0.4, 0.9, -2.0, 1.1, 0.3]).unwrap())),
    ];
    let bounds: Vec<(&str, _)> = interiors
        .into_iter()
        .map(|(name, f)| {
            let sched = NoiseSchedule::new(base.gamma0, base.gamma1, f);
            let draws = OracleDraws::sample(40_000, 3, model.config.embed_dim, &mut rng(73 + name.len() as u64));
            (name, continuous_vlb(&model, &sched, &tokens, &draws, 1.0).unwrap().diffusion)
        })
        .collect();
    let (ref_name, reference) = &bounds[0];
    for (name, b) in &bounds[1..] {
        let se = (b.std_err.powi(2) + reference.std_err.powi(2)).sqrt();
        c.check(
            (b.mean - reference.mean).abs() <= 3.0 * se,
            format!("{name} {:.4} vs {ref_name} {:.4} (3 SE = {:.4})", b.mean, reference.mean, 3.0 * se),
        );
    }
    c.outcome()
}

pub fn overfit_smoke() -> Outcome {
    let mut c = Checks::default();
    let seq: Vec<TokenId> = (0..32u32).map(|i| (i * 7 + i / 5) % 16).collect();
    let cfg = DenoiserConfig { vocab: 16, embed_dim: 16, width: 64, depth: 2, heads: 4, max_len: 32, time_dim: 16, ..Default::default() };
    let tc = TrainConfig { batch_size: 8, seq_len: 32, total_steps: 500, warmup_steps: 50, ..Default::default() };
    let seqs = vec![seq.clone()];
    let mut snapshot = None;
    let state = fit(cfg, &seqs, &tc, 74, |s| {
        if s.step == 50 {
            snapshot = Some(s.model.clone());
        }
    });
    let opts = |step: u64| EvalOptions { mc_draws: 64, seed: 75, anneal: anneal_coefficient(step), ..Default::default() };
    let early = eval_nll(&snapshot.unwrap(), &seqs, &opts(50)).unwrap();
    let late = eval_nll(&state.model, &seqs, &opts(500)).unwrap();
    c.check(late.recon <= 0.5 * early.recon, format!("recon {:.3} at step 50 -> {:.3} at step 500 nats/seq", early.recon, late.recon));
    c.note(format!("bound {:.3} -> {:.3} nats/token", early.nats_per_token, late.nats_per_token));
    c.outcome()
}

pub fn infilling_consistency() -> Outcome {
    let mut c = Checks::default();
    let a: Vec<TokenId> = vec![1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7, 0];
    let b: Vec<TokenId> = vec![7, 6, 5, 4, 3, 2, 1, 0, 7, 6, 5, 4, 3, 2, 1, 0];
    let cfg = DenoiserConfig { vocab: 8, embed_dim: 8, width: 64, depth: 2, heads: 4, max_len: 16, time_dim: 16, ..Default::default() };
    let tc = TrainConfig { batch_size: 16, seq_len: 16, total_steps: 1500, warmup_steps: 100, ..Default::default() };
    let state = fit(cfg, &[a.clone(), b.clone()], &tc, 76, |_| {});
    let fit_report = eval_nll(
        &state.model,
        &[a.clone(), b.clone()],
        &EvalOptions { mc_draws: 32, seed: 77, anneal: anneal_coefficient(state.step), ..Default::default() },
    )
    .unwrap();
    c.note(format!("toy bound {:.4} nats/token", fit_report.nats_per_token));

    let (start, end) = (9, 13);
    let spec = GuidanceSpec::new(vec![GuidanceTerm::span(start, b[start..end].to_vec())]);
    let scfg = SamplerConfig {
        steps: 256,
        seq_len: 16,
        num_samples: 200,
        chunk: 50,
        seed: 78,
        guidance_weight: 8.0,
        anneal: anneal_coefficient(state.step),
        ..Default::default()
    };
    let guided = sample(&state.model, &scfg, Some(&spec)).unwrap();
    let hits = guided.sequences.iter().filter(|s| s[start..end] == b[start..end]).count();
    let rate = hits as f64 / guided.sequences.len() as f64;
    let free = sample(&state.model, &SamplerConfig { guidance_weight: 0.0, ..scfg.clone() }, None).unwrap();
    let free_rate = free.sequences.iter().filter(|s| s[start..end] == b[start..end]).count() as f64 / free.sequences.len() as f64;
    c.check(rate >= 0.95, format!("span reproduced in {:.1}% of guided samples (unguided {:.1}%)", 100.0 * rate, 100.0 * free_rate));
    c.outcome()
}
