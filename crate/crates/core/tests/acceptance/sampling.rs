use plaid_core::sampler::{apply_score_temperature, guided_xhat};
use plaid_core::{sample, GuidanceSpec, GuidanceTerm, Mat, SamplerConfig};

use crate::support::{rng, tiny_model, Checks, Outcome};

pub fn sampling_identities() -> Outcome {
    let mut c = Checks::default();
    let model = tiny_model(6, 5, 51);
    let cfg = SamplerConfig { steps: 48, seq_len: 5, num_samples: 7, chunk: 3, seed: 17, ..Default::default() };
    let a = sample(&model, &cfg, None).unwrap();
    let b = sample(&model, &cfg, None).unwrap();
    c.check(a.sequences == b.sequences, "same seed gives identical samples");
    let rechunked = sample(&model, &SamplerConfig { chunk: 7, ..cfg.clone() }, None).unwrap();
    c.check(a.sequences == rechunked.sequences, "samples independent of chunking");
    let other = sample(&model, &SamplerConfig { seed: 18, ..cfg.clone() }, None).unwrap();
    c.check(other.sequences[..6] == a.sequences[1..], "chain c is seeded by seed + c");
    c.check(a.posterior_draws == 48 && a.network_calls == 49, format!("T=48: {} draws, {} calls", a.posterior_draws, a.network_calls));

    let mut r = rng(52);
    let xh = Mat::randn(10, 4, 1.0, &mut r);
    let z = Mat::randn(10, 4, 3.0, &mut r);
    c.check(apply_score_temperature(&xh, &z, 1.0).unwrap() == xh, "tau = 1 leaves x_hat bit-identical");
    let sharp = apply_score_temperature(&xh, &z, 0.5).unwrap();
    let expected: Vec<f64> = xh.data.iter().zip(&z.data).map(|(x, z)| x + (x - z)).collect();
    c.check(sharp.data.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-12), "tau = 0.5 doubles the step away from z");
    let grad = Mat::randn(10, 4, 5.0, &mut r);
    c.check(guided_xhat(&xh, &grad, 7.0, 0.0, 0.5).unwrap() == xh, "weight 0 leaves x_hat bit-identical");

    let spec = GuidanceSpec::new(vec![GuidanceTerm::lexical(2), GuidanceTerm::span(1, vec![3, 4])]);
    let zero = sample(&model, &SamplerConfig { guidance_weight: 0.0, ..cfg.clone() }, Some(&spec)).unwrap();
    c.check(zero.sequences == a.sequences, "guided sampling at weight 0 equals unguided");
    let tau1 = SamplerConfig { tau: 1.0, ..cfg.clone() };
    let t1 = sample(&model, &tau1, None).unwrap();
    c.check(t1 == sample(&model, &tau1, None).unwrap(), "tau = 1 sampling deterministic");

    let default = SamplerConfig::default();
    c.check(default.steps == 4096, format!("default T = {}", default.steps));
    let full = sample(&model, &SamplerConfig { seq_len: 5, num_samples: 2, ..SamplerConfig::default() }, None).unwrap();
    c.check(
        full.posterior_draws == 4096 && full.network_calls == 4097,
        format!("default run: {} draws, {} calls", full.posterior_draws, full.network_calls),
    );
    c.outcome()
}
