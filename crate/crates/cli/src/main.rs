mod guide;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use plaid_core::checkpoint::Checkpoint;
use plaid_core::config::RunConfig;
use plaid_core::corpus::{tokenize_corpus, PackedDataset, Vocabulary};
use plaid_core::denoiser::anneal_coefficient;
use plaid_core::sampler::sample_with_record;
use plaid_core::scaling::{fit_report, format_report, parse_records};
use plaid_core::{eval_nll, EvalOptions, GuidanceSpec, Model, SamplerConfig, TrainState};

/// Invalid configuration or flags; exits with status 2.
#[derive(Debug)]
pub struct BadConfig(pub String);

impl std::fmt::Display for BadConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadConfig {}

#[derive(Parser)]
#[command(name = "plaid", version, about = "Continuous diffusion language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ancestral steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "guidance-weight")]
    guidance_weight: Option<f64>,
    #[arg(long = "num-samples")]
    num_samples: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from the packed dataset, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run at most this many steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Likelihood bound on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Unconditional samples.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Samples under token guidance.
    Guide {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: SampleArgs,
        /// START:END:TEXT infilling constraint; repeatable.
        #[arg(long)]
        span: Vec<String>,
        /// Token that should appear somewhere; repeatable.
        #[arg(long)]
        lexical: Vec<String>,
        /// Complement every term.
        #[arg(long)]
        negate: bool,
        /// File of guidance terms.
        #[arg(long = "guide-file")]
        guide_file: Option<PathBuf>,
    },
    /// IsoFLOP and power-law fits over a sweep records file.
    ScalingFit {
        #[command(flatten)]
        common: Common,
        records: PathBuf,
    },
    /// Build the vocabulary and packed datasets from the corpus.
    Tokenize {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
        None => None,
    };
    RunConfig::load(text.as_deref(), &common.set).map_err(|e| BadConfig(e.to_string()).into())
}

fn read_dataset(path: &Path) -> Result<PackedDataset> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    PackedDataset::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn tokenize(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let corpus = fs::read(&cfg.data.corpus).with_context(|| format!("reading corpus {}", cfg.data.corpus))?;
    let tc = tokenize_corpus(&corpus, cfg.data.vocab_size, cfg.train.seq_len)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.dir));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("vocab.txt"), tc.vocab.to_text())?;
    fs::write(dir.join("train.bin"), tc.train.to_bytes())?;
    fs::write(dir.join("validation.bin"), tc.validation.to_bytes())?;
    let stats = format!(
        "documents={}\nvalidation_documents={}\nvocab={}\nseq_len={}\ntrain_sequences={}\nvalidation_sequences={}\nvalidation_chars={}\n",
        tc.documents,
        tc.validation_documents,
        tc.vocab.len(),
        cfg.train.seq_len,
        tc.train.num_sequences(),
        tc.validation.num_sequences(),
        tc.validation_chars
    );
    fs::write(dir.join("stats.txt"), &stats)?;
    print!("{stats}");
    Ok(())
}

fn validation_chars(dir: &Path) -> Option<usize> {
    let text = fs::read_to_string(dir.join("stats.txt")).ok()?;
    text.lines().find_map(|l| l.strip_prefix("validation_chars=")).and_then(|v| v.parse().ok())
}

fn evaluate(model: &Model, step: u64, cfg: &RunConfig, data: &PackedDataset, total_chars: Option<usize>) -> Result<plaid_core::EvalReport> {
    let n = match cfg.eval.max_sequences {
        0 => data.num_sequences(),
        m => m.min(data.num_sequences()),
    };
    let seqs: Vec<Vec<u32>> = data.sequences().take(n).map(<[u32]>::to_vec).collect();
    // characters scale with the evaluated share of the split
    let chars = total_chars.map(|c| ((c as f64) * n as f64 / data.num_sequences() as f64).round() as usize);
    let opts = EvalOptions {
        dataset: "validation".into(),
        mc_draws: cfg.eval.mc_draws,
        seed: cfg.eval.seed,
        anneal: anneal_coefficient(step),
        chunk: cfg.eval.chunk,
        chars,
    };
    Ok(eval_nll(model, &seqs, &opts)?)
}

fn train(common: &Common, checkpoint: Option<&Path>, steps: Option<u64>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    let data_dir = PathBuf::from(&cfg.data.dir);
    let vocab =
        Vocabulary::from_text(&fs::read_to_string(data_dir.join("vocab.txt")).context("reading vocabulary; run `plaid tokenize` first")?)?;
    let train_data = read_dataset(&data_dir.join("train.bin"))?;
    if train_data.vocab_size != cfg.model.vocab {
        bail!(BadConfig(format!("dataset vocabulary {} differs from model.vocab {}", train_data.vocab_size, cfg.model.vocab)));
    }
    let validation = if cfg.run.eval_every > 0 { Some(read_dataset(&data_dir.join("validation.bin"))?) } else { None };
    let chars = validation_chars(&data_dir);
    let mut state = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if ck.model.config != cfg.model {
                eprintln!("note: using the model config stored in {}", p.display());
            }
            ck.into_state()
        }
        None => {
            let model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.init_seed))?;
            TrainState::new(model, cfg.train.seed)
        }
    };
    let run_dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.dir));
    fs::create_dir_all(&run_dir)?;
    let ck_path = run_dir.join("checkpoint.pldk");
    let mut log = fs::OpenOptions::new().create(true).append(true).open(run_dir.join("metrics.log"))?;
    write!(log, "# run start_step={}\n{}", state.step, cfg.header())?;
    let save = |state: &TrainState| -> Result<()> {
        let mut ck = Checkpoint::from_state(state, Some(vocab.clone()));
        ck.meta = cfg.to_text().lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect();
        ck.save(&ck_path)?;
        Ok(())
    };
    let budget = steps.unwrap_or(u64::MAX);
    let mut err = None;
    plaid_core::train_loop(&mut state, &cfg.train, train_data.tokens(), budget, |st, m| {
        if st.step % cfg.run.log_every == 0 || st.step == cfg.train.total_steps {
            writeln!(log, "{}", m.to_record())?;
            eprintln!(
                "step {} total {:.3} bpt {:.4} lr {:.3e}",
                m.step,
                m.total,
                m.total / cfg.train.seq_len as f64 / std::f64::consts::LN_2,
                m.lr
            );
        }
        if cfg.run.eval_every > 0 && st.step % cfg.run.eval_every == 0 {
            if let Some(v) = &validation {
                match evaluate(&st.model, st.step, &cfg, v, chars) {
                    Ok(r) => writeln!(log, "eval step={} {}", st.step, r.to_record())?,
                    Err(e) => {
                        err = Some(e);
                        return Ok(false);
                    }
                }
            }
        }
        if cfg.run.checkpoint_every > 0 && st.step % cfg.run.checkpoint_every == 0 {
            if let Err(e) = save(st) {
                err = Some(e);
                return Ok(false);
            }
        }
        Ok(true)
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    save(&state)?;
    eprintln!("saved {} at step {}", ck_path.display(), state.step);
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.eval.seed = s;
    }
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let dir = PathBuf::from(&cfg.data.dir);
    let data = read_dataset(&dir.join("validation.bin"))?;
    let report = evaluate(&ck.model, ck.training.step, &cfg, &data, validation_chars(&dir))?;
    write_output(common.out.as_deref(), &format!("{}\n", report.to_record()))
}

fn sampler_config(cfg: &RunConfig, common: &Common, args: &SampleArgs, step: u64) -> SamplerConfig {
    let mut s = cfg.sample.clone();
    if let Some(x) = args.steps {
        s.steps = x;
    }
    if let Some(x) = args.tau {
        s.tau = x;
    }
    if let Some(x) = args.guidance_weight {
        s.guidance_weight = x;
    }
    if let Some(x) = args.num_samples {
        s.num_samples = x;
    }
    if let Some(x) = common.seed {
        s.seed = x;
    }
    s.anneal = anneal_coefficient(step);
    s
}

fn run_sampler(common: &Common, args: &SampleArgs, guide: Option<GuideFlags<'_>>) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let vocab = ck.vocab.clone().unwrap_or_else(Vocabulary::byte_level);
    let scfg = sampler_config(&cfg, common, args, ck.training.step);
    scfg.validate().map_err(|e| BadConfig(e.to_string()))?;
    let spec: Option<GuidanceSpec> = match guide {
        Some(g) => {
            let file = match g.file {
                Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
                None => None,
            };
            let spec = guide::build_spec(g.spans, g.lexical, file.as_deref(), g.negate, &vocab)?;
            spec.validate(scfg.seq_len, ck.model.config.vocab).map_err(|e| BadConfig(e.to_string()))?;
            Some(spec)
        }
        None => None,
    };
    let (out, record) = sample_with_record(&ck.model, &scfg, spec.as_ref())?;
    eprintln!("{}", record.to_record());
    let mut text = String::new();
    for (i, s) in out.sequences.iter().enumerate() {
        text.push_str(&format!("### sample {i} seed={}\n{}\n", scfg.seed + i as u64, vocab.render(s)?));
    }
    write_output(common.out.as_deref(), &text)
}

struct GuideFlags<'a> {
    spans: &'a [String],
    lexical: &'a [String],
    negate: bool,
    file: Option<&'a Path>,
}

fn scaling_fit(common: &Common, records: &Path) -> Result<()> {
    let text = fs::read_to_string(records).with_context(|| format!("reading {}", records.display()))?;
    let recs = parse_records(&text)?;
    let fits = fit_report(&recs)?;
    write_output(common.out.as_deref(), &format_report(&fits))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, checkpoint, steps } => train(common, checkpoint.as_deref(), *steps),
        Command::Eval { common, checkpoint } => eval(common, checkpoint),
        Command::Sample { common, sample } => run_sampler(common, sample, None),
        Command::Guide { common, sample, span, lexical, negate, guide_file } => {
            run_sampler(common, sample, Some(GuideFlags { spans: span, lexical, negate: *negate, file: guide_file.as_deref() }))
        }
        Command::ScalingFit { common, records } => scaling_fit(common, records),
        Command::Tokenize { common } => tokenize(common),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<BadConfig>().is_some()
            || matches!(c.downcast_ref::<plaid_core::Error>(), Some(plaid_core::Error::Config(_) | plaid_core::Error::Spec(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_config_error(&e) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
