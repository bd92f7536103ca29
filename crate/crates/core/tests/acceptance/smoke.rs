use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use plaid_core::corpus::{tokenize_corpus, TokenizedCorpus};
use plaid_core::denoiser::anneal_coefficient;
use plaid_core::sampler::lexical_rate;
use plaid_core::{
    eval_nll, sample, Checkpoint, DenoiserConfig, EvalOptions, EvalReport, GuidanceSpec, GuidanceTerm, Model, SamplerConfig, TokenId,
    TrainConfig, TrainState,
};

use crate::support::{rng, Checks, Outcome};

pub const SEQ_LEN: usize = 64;
pub const BATCH: usize = 32;
pub const TOTAL_STEPS: u64 = 20_000;
/// Step at which the full method and the ablation are compared.
pub const MATCHED_STEP: u64 = 6_000;
pub const CPU_HOURS: f64 = 6.0;
pub const TARGET_BPC: f64 = 4.5;
const EVAL_DRAWS: usize = 4;
const GUIDE_SAMPLES: usize = 500;
const GUIDE_STEPS: usize = 128;
const GUIDE_WEIGHTS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];

pub fn corpus_bytes() -> Vec<u8> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/shakespeare.txt");
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {path}: {e}"))
}

fn corpus() -> &'static TokenizedCorpus {
    static CORPUS: OnceLock<TokenizedCorpus> = OnceLock::new();
    CORPUS.get_or_init(|| tokenize_corpus(&corpus_bytes(), 259, SEQ_LEN).expect("tokenizing the smoke corpus"))
}

fn model_config(output_prior: bool) -> DenoiserConfig {
    DenoiserConfig { vocab: 259, depth: 4, width: 128, max_len: SEQ_LEN, output_prior, ..Default::default() }
}

fn train_config() -> TrainConfig {
    TrainConfig { batch_size: BATCH, seq_len: SEQ_LEN, total_steps: TOTAL_STEPS, ..Default::default() }
}

/// A training run stopped at `step`, with the wall-clock seconds it took.
struct Run {
    state: TrainState,
    seconds: f64,
}

/// Trained checkpoints live in `PLAID_SMOKE_DIR`, or under cargo's test scratch directory.
/// Each records its configuration and training time and is reused only on an exact match.
fn cache_path(name: &str, step: u64) -> Option<PathBuf> {
    let dir = match std::env::var_os("PLAID_SMOKE_DIR") {
        Some(d) if d.is_empty() => return None,
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("smoke"),
    };
    Some(dir.join(format!("{name}-{step}.pldk")))
}

fn cache_key(cfg: &DenoiserConfig, tc: &TrainConfig, seed: u64) -> String {
    format!("{cfg:?} {tc:?} seed={seed}")
}

/// Continues `run` to `step`, going through the on-disk cache when one is configured.
fn advance(name: &str, run: Option<Run>, cfg: &DenoiserConfig, seed: u64, step: u64) -> Run {
    let tc = train_config();
    let key = cache_key(cfg, &tc, seed);
    if let Some(path) = cache_path(name, step) {
        if let Ok(ck) = Checkpoint::load(&path) {
            if ck.meta("key") == Some(key.as_str()) && ck.training.step == step {
                let seconds = ck.meta("seconds").and_then(|s| s.parse().ok()).unwrap_or(0.0);
                return Run { state: ck.into_state(), seconds };
            }
        }
    }
    let mut run =
        run.unwrap_or_else(|| Run { state: TrainState::new(Model::new(cfg.clone(), &mut rng(seed)).unwrap(), seed), seconds: 0.0 });
    let start = Instant::now();
    let todo = step - run.state.step;
    plaid_core::train_loop(&mut run.state, &tc, corpus().train.tokens(), todo, |_, _| Ok(true)).expect("smoke training");
    run.seconds += start.elapsed().as_secs_f64();
    if let Some(path) = cache_path(name, step) {
        let mut ck = Checkpoint::from_state(&run.state, None);
        ck.meta = vec![("key".into(), key), ("seconds".into(), format!("{}", run.seconds))];
        if let Some(dir) = path.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        ck.save(&path).expect("caching smoke checkpoint");
    }
    run
}

fn evaluate(state: &TrainState) -> EvalReport {
    let seqs: Vec<Vec<TokenId>> = corpus().validation.sequences().map(<[TokenId]>::to_vec).collect();
    let opts = EvalOptions {
        dataset: "validation".into(),
        mc_draws: EVAL_DRAWS,
        seed: 9,
        anneal: anneal_coefficient(state.step),
        ..Default::default()
    };
    eval_nll(&state.model, &seqs, &opts).expect("smoke evaluation")
}

struct Smoke {
    full_matched: EvalReport,
    ablation_matched: EvalReport,
    full_final: EvalReport,
    seconds: f64,
    model: Model,
}

fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<Smoke> = OnceLock::new();
    SMOKE.get_or_init(|| {
        let (full_cfg, ablation_cfg) = (model_config(true), model_config(false));
        let matched = advance("full", None, &full_cfg, 1, MATCHED_STEP);
        let full_matched = evaluate(&matched.state);
        let ablation = advance("ablation", None, &ablation_cfg, 1, MATCHED_STEP);
        let ablation_matched = evaluate(&ablation.state);
        let done = advance("full", Some(matched), &full_cfg, 1, TOTAL_STEPS);
        let full_final = evaluate(&done.state);
        Smoke { full_matched, ablation_matched, full_final, seconds: done.seconds + ablation.seconds, model: done.state.model }
    })
}

pub fn training_smoke() -> Outcome {
    let mut c = Checks::default();
    let s = smoke();
    let bpc_se = |r: &EvalReport| r.std_err * r.tokens as f64 / r.chars as f64 / std::f64::consts::LN_2;
    let hours = s.seconds / 3600.0;
    c.check(
        s.full_final.bpc <= TARGET_BPC,
        format!(
            "validation bound {:.3}±{:.3} bpc at step {TOTAL_STEPS} ({} sequences)",
            s.full_final.bpc,
            bpc_se(&s.full_final),
            s.full_final.sequences
        ),
    );
    c.check(hours <= CPU_HOURS, format!("{hours:.2} CPU-hours of training"));
    c.check(
        s.full_matched.bpc < s.ablation_matched.bpc,
        format!(
            "step {MATCHED_STEP}: full {:.3}±{:.3} vs no output prior {:.3}±{:.3} bpc",
            s.full_matched.bpc,
            bpc_se(&s.full_matched),
            s.ablation_matched.bpc,
            bpc_se(&s.ablation_matched)
        ),
    );
    c.outcome()
}

/// The byte whose training-set frequency predicts a presence rate closest to 25% per sequence.
fn lexical_target() -> (TokenId, f64) {
    let train = corpus().train.tokens();
    let mut counts = vec![0usize; 256];
    for &t in train {
        if (t as usize) < 256 {
            counts[t as usize] += 1;
        }
    }
    let n = train.len() as f64;
    (0..256u32)
        .map(|b| (b, 1.0 - (1.0 - counts[b as usize] as f64 / n).powi(SEQ_LEN as i32)))
        .min_by(|a, b| (a.1 - 0.25).abs().total_cmp(&(b.1 - 0.25).abs()))
        .unwrap()
}

pub fn guidance_efficacy() -> Outcome {
    let mut c = Checks::default();
    let s = smoke();
    let (token, predicted) = lexical_target();
    c.note(format!("token {token:?} ({:?}), unigram presence rate {:.1}%", token as u8 as char, 100.0 * predicted));
    let spec = GuidanceSpec::new(vec![GuidanceTerm::lexical(token)]);
    let rates: Vec<f64> = GUIDE_WEIGHTS
        .iter()
        .map(|&w| {
            let cfg = SamplerConfig {
                steps: GUIDE_STEPS,
                seq_len: SEQ_LEN,
                num_samples: GUIDE_SAMPLES,
                seed: 2024,
                guidance_weight: w,
                anneal: 1.0,
                ..Default::default()
            };
            let out = sample(&s.model, &cfg, (w > 0.0).then_some(&spec)).expect("guided sampling");
            lexical_rate(&out.sequences, token, false)
        })
        .collect();
    let table: Vec<String> = GUIDE_WEIGHTS.iter().zip(&rates).map(|(w, r)| format!("w={w}: {:.1}%", 100.0 * r)).collect();
    c.check(rates.windows(2).all(|p| p[1] >= p[0]), format!("nondecreasing in weight ({})", table.join(", ")));
    let gain = rates[3] - rates[0];
    c.check(gain >= 0.20, format!("weight 4 gains {:.1} points over weight 0", 100.0 * gain));
    c.outcome()
}
