use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cfqa::check::{run_checks, CheckOptions};
use cfqa::tensor::{Fault, Scalar};
use cfqa::text::{build_vocab, gen_synthetic, load_dataset, prepare_all, save_dataset, SynthConfig, Vocab};
use cfqa::train::{load_checkpoint, write_trajectories, CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE};
use cfqa::{CfqaError, EpisodeSummary, RunConfig, RunMetrics, Session};

#[derive(Parser)]
#[command(name = "cfqa", version, about = "Coarse-to-fine extractive question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset.
    Eval(EvalArgs),
    /// Write a synthetic key/value corpus as JSONL.
    GenData(GenArgs),
    /// Run the gradient, oracle and bandit self-checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Starting preset: default or desk.
    #[arg(long, default_value = "default")]
    preset: String,
    /// key = value config file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Run directory for checkpoint, vocabulary, config and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    max_doc_tokens: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Where metrics.json, per_example.csv and trajectories.jsonl go
    /// (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides on top of the run's saved config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Evaluate even if the checkpoint was trained under another model config.
    #[arg(long)]
    allow_hash_mismatch: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    min_sentences: usize,
    #[arg(long, default_value_t = 10)]
    max_sentences: usize,
    #[arg(long, default_value_t = 0.3)]
    distractor_rate: f64,
    #[arg(long, default_value_t = 400)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "syn")]
    prefix: String,
    /// Also write a held-out split drawn from the same word pools.
    #[arg(long, requires = "eval_n")]
    eval_out: Option<PathBuf>,
    #[arg(long, requires = "eval_out")]
    eval_n: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    /// Run only these checks (a group such as `bandit`, or `grad/conv1d`).
    #[arg(long)]
    only: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeded cases per op gradient check.
    #[arg(long, default_value_t = 100)]
    grad_cases: usize,
    /// Seeded cases of the end-to-end gradient check.
    #[arg(long, default_value_t = 10)]
    e2e_cases: usize,
    /// Break a backward pass on purpose (test fixture): conv1d.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Failure classes, mapped to the process exit status.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Check(usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<CfqaError>(),
                Some(CfqaError::Config(_) | CfqaError::HashMismatch { .. })
            )
        });
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Data(e)
        }
    }
}

impl From<CfqaError> for Failure {
    fn from(e: CfqaError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GenData(a) => gen_data(a),
        Command::Check(a) => check(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(3)
        }
    }
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<(), Failure> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::preset(&args.preset)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(Failure::Usage)?;
        cfg.apply(&text)?;
    }
    apply_sets(&mut cfg, &args.sets)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.cfg)?;
    if a.train.is_some() {
        cfg.train_path = a.train.clone();
    }
    if a.eval.is_some() {
        cfg.eval_path = a.eval.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(u) = a.updates {
        cfg.updates = u;
    }
    if let Some(m) = a.max_doc_tokens {
        cfg.max_doc_tokens = m;
    }
    cfg.validate()?;
    if cfg.double_precision {
        train_as::<f64>(cfg)
    } else {
        train_as::<f32>(cfg)
    }
}

fn train_as<T: Scalar>(cfg: RunConfig) -> Result<(), Failure> {
    let train_path = cfg
        .train_path
        .clone()
        .ok_or_else(|| usage("no training data: pass --train or set train_path"))?;
    let train_raw = load_dataset(&train_path)?;
    let eval_raw = match &cfg.eval_path {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let vocab = build_vocab(&train_raw)?;
    let width = cfg.char_width;
    let train_ex = prepare_all(&train_raw, &vocab, width, cfg.max_doc_tokens)?;
    let eval_ex = prepare_all(&eval_raw, &vocab, width, cfg.max_doc_tokens)?;

    let out = cfg.out_dir.clone();
    let mut session = Session::<T>::new(cfg, vocab)?;
    // config and vocabulary first, so a crashed run still records its inputs
    session.save(&out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let metrics = session.fit(&train_ex, &eval_ex, |u| {
        serde_json::to_writer(&mut log, u).map_err(|e| CfqaError::io(&log_path, e.into()))?;
        log.write_all(b"\n").map_err(|e| CfqaError::io(&log_path, e))?;
        if u.step % 50 == 0 {
            eprintln!(
                "update {:>6}  actor {:+.4}  critic {:.4}  span {:.4}  train_em {:.3}",
                u.step, u.actor_loss, u.critic_loss, u.span_loss, u.train_em
            );
        }
        if let Some(m) = &u.eval {
            eprintln!("  eval em {:.4} f1 {:.4} steps {:.2}", m.em, m.f1, m.avg_steps);
        }
        Ok(())
    })?;
    log.flush().with_context(|| format!("writing {}", log_path.display()))?;
    session.save(&out)?;
    if let Some(m) = metrics {
        write_metrics(&out.join("metrics.json"), &m)?;
        println!("{}", serde_json::to_string(&m).context("serializing metrics")?);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&a.run.join(CONFIG_FILE))?;
    apply_sets(&mut cfg, &a.sets)?;
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    if cfg.double_precision {
        eval_as::<f64>(cfg, &a)
    } else {
        eval_as::<f32>(cfg, &a)
    }
}

fn eval_as<T: Scalar>(cfg: RunConfig, a: &EvalArgs) -> Result<(), Failure> {
    let vocab = Vocab::load(&a.run.join(VOCAB_FILE))?;
    let (store, hash) = load_checkpoint::<T>(&a.run.join(CHECKPOINT_FILE))?;
    let session = Session::from_parts(cfg, vocab, store, hash, a.allow_hash_mismatch).map_err(|e| match e {
        CfqaError::HashMismatch { .. } => Failure::Usage(anyhow::Error::from(e).context(
            "the checkpoint was trained under a different model config; pass --allow-hash-mismatch to evaluate anyway",
        )),
        other => other.into(),
    })?;
    let raw = load_dataset(&a.data)?;
    let examples = prepare_all(&raw, &session.vocab, session.cfg.char_width, session.cfg.max_doc_tokens)?;
    let result = session.evaluate(&examples)?;

    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_metrics(&out.join("metrics.json"), &result.metrics)?;
    let summaries: Vec<EpisodeSummary> = result.results.iter().map(|r| r.summary()).collect();
    write_csv(&out.join("per_example.csv"), &summaries)?;
    let traj = out.join("trajectories.jsonl");
    let f = File::create(&traj).with_context(|| format!("creating {}", traj.display()))?;
    write_trajectories(BufWriter::new(f), &result.results).with_context(|| format!("writing {}", traj.display()))?;
    println!("{}", serde_json::to_string(&result.metrics).context("serializing metrics")?);
    Ok(())
}

fn write_metrics(path: &Path, m: &RunMetrics) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(m).context("serializing metrics")?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_csv(path: &Path, rows: &[EpisodeSummary]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r).with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn gen_data(a: GenArgs) -> Result<(), Failure> {
    let held_out = a.eval_n.unwrap_or(0);
    let cfg = SynthConfig {
        n_docs: a.n + held_out,
        sentences: (a.min_sentences, a.max_sentences),
        distractor_rate: a.distractor_rate,
        vocab_size: a.vocab_size,
        id_prefix: a.prefix,
        ..SynthConfig::default()
    };
    let corpus = gen_synthetic(&cfg, a.seed)?;
    let (train, eval) = corpus.examples.split_at(a.n);
    save_dataset(&a.out, train)?;
    eprintln!("wrote {} examples to {}", train.len(), a.out.display());
    if let Some(path) = &a.eval_out {
        save_dataset(path, eval)?;
        eprintln!("wrote {} examples to {}", eval.len(), path.display());
    }
    Ok(())
}

fn check(a: CheckArgs) -> Result<(), Failure> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("conv1d") => Some(Fault::Conv1dBackwardSign),
        Some(other) => return Err(usage(format!("unknown fault `{other}` (known: conv1d)"))),
    };
    let opts = CheckOptions {
        only: a.only,
        grad_cases: a.grad_cases,
        e2e_cases: a.e2e_cases,
        seed: a.seed,
        fault,
    };
    let outcomes = run_checks(&opts)?;
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::Check(failed));
    }
    Ok(())
}
