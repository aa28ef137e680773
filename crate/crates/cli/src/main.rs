use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use scgs_core::pipeline::{BackendChoice, CamChoice, Run, RunConfig, RunOutcome, Stage};
use scgs_core::synth::stub::{StubBehavior, StubServer};
use scgs_core::Error;

/// Spurious-correlation guided synthesis: harvest misclassified images,
/// regenerate their context under CAM preserve-masks, retrain.
#[derive(Parser)]
#[command(name = "scgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) every stage.
    Run(StageArgs),
    /// Generate the synthetic dataset or ingest the configured manifest.
    GenData(StageArgs),
    /// Train ERM (and the JTT baseline when enabled).
    Train(StageArgs),
    /// Collect misclassified train images and their features.
    Harvest(StageArgs),
    /// Cluster each class's misclassified set and sample sources.
    Cluster(StageArgs),
    /// Compute CAMs and preserve-masks for the sampled sources.
    Cam(StageArgs),
    /// Generate new images from the masked sources.
    Synth(StageArgs),
    /// Merge generated images into the training set.
    Merge(StageArgs),
    /// Retrain on the merged set (and JTT+SCGS when enabled).
    Retrain(StageArgs),
    /// Evaluate every trained variant on the test split.
    Eval(StageArgs),
    /// Write report.csv, report.md, metrics.jsonl and overlays.
    Report(StageArgs),
    /// Serve the bundled echo/fault-injection inpainting stub.
    ServeStub(StubArgs),
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Run config (flat TOML). Defaults to the run directory's config.toml, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Run only this seed (replaces the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// CAM threshold τ in (0, 1].
    #[arg(long)]
    tau: Option<f64>,
    /// gradcam | gradcampp | none
    #[arg(long)]
    cam: Option<CamChoice>,
    /// procedural | remote
    #[arg(long)]
    backend: Option<BackendChoice>,
    /// Inpainting service base URL.
    #[arg(long, env = "SCGS_ENDPOINT")]
    endpoint: Option<String>,
    /// SCGS rounds.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Args)]
struct StubArgs {
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: String,
    /// echo | invert | wrong-dims | fail-times:N | always-fail | malformed | bad-base64 | wrong-id | reject | delay:MS
    #[arg(long, default_value = "echo")]
    mode: String,
}

fn parse_behavior(mode: &str) -> Result<StubBehavior> {
    let (name, arg) = mode.split_once(':').unwrap_or((mode, ""));
    Ok(match name {
        "echo" => StubBehavior::Echo,
        "invert" => StubBehavior::Invert,
        "wrong-dims" => StubBehavior::WrongDims,
        "fail-times" => StubBehavior::FailTimes(arg.parse().context("fail-times:N needs a count")?),
        "always-fail" => StubBehavior::AlwaysFail,
        "malformed" => StubBehavior::Malformed,
        "bad-base64" => StubBehavior::BadBase64,
        "wrong-id" => StubBehavior::WrongRequestId,
        "reject" => StubBehavior::Reject,
        "delay" => StubBehavior::Delay(std::time::Duration::from_millis(
            arg.parse().context("delay:MS needs milliseconds")?,
        )),
        other => anyhow::bail!("unknown stub mode {other:?}"),
    })
}

/// The config plus the text to store verbatim in the run directory.
fn resolve_config(args: &StageArgs) -> Result<(RunConfig, Option<String>)> {
    let stored = args.out.join(scgs_core::pipeline::run::CONFIG_FILE);
    let source: Option<&Path> = match &args.config {
        Some(p) => Some(p),
        None if stored.exists() => Some(&stored),
        None => None,
    };
    let (mut cfg, text) = match source {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg = RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?;
            (cfg, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    let overridden = args.seed.is_some()
        || args.tau.is_some()
        || args.cam.is_some()
        || args.backend.is_some()
        || args.rounds.is_some()
        || (args.endpoint.is_some() && cfg.endpoint.is_none());
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(t) = args.tau {
        cfg.tau = t;
    }
    if let Some(c) = args.cam {
        cfg.cam = c;
    }
    if let Some(b) = args.backend {
        cfg.backend = b;
    }
    if cfg.endpoint.is_none() {
        cfg.endpoint = args.endpoint.clone();
    }
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    cfg.validate()?;
    Ok((cfg, if overridden { None } else { text }))
}

fn summarize(out: &RunOutcome) {
    for k in &out.executed {
        println!("ran      {k}");
    }
    for k in &out.skipped {
        println!("skipped  {k}");
    }
}

fn run_stage(stage: Option<Stage>, args: &StageArgs) -> Result<()> {
    let (cfg, text) = resolve_config(args)?;
    let mut run = Run::open(&args.out, cfg, text.as_deref())?;
    let out = match stage {
        None => run.run_all()?,
        Some(s) => run.run_stage(s, None)?,
    };
    summarize(&out);
    if stage.is_none() || stage == Some(Stage::Report) {
        println!("report: {}", args.out.join("report.md").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCGS_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run_stage(None, a),
        Command::GenData(a) => run_stage(Some(Stage::GenData), a),
        Command::Train(a) => run_stage(Some(Stage::Train), a),
        Command::Harvest(a) => run_stage(Some(Stage::Harvest), a),
        Command::Cluster(a) => run_stage(Some(Stage::Cluster), a),
        Command::Cam(a) => run_stage(Some(Stage::Cam), a),
        Command::Synth(a) => run_stage(Some(Stage::Synth), a),
        Command::Merge(a) => run_stage(Some(Stage::Merge), a),
        Command::Retrain(a) => run_stage(Some(Stage::Retrain), a),
        Command::Eval(a) => run_stage(Some(Stage::Eval), a),
        Command::Report(a) => run_stage(Some(Stage::Report), a),
        Command::ServeStub(a) => parse_behavior(&a.mode).and_then(|b| {
            let server = StubServer::bind(&a.addr, b)?;
            println!("{}", server.url());
            server.serve_forever();
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Dependency { .. }) => ExitCode::from(3),
                Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
