use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffpilot::harness::{self, ExperimentSpec, PolicyKind};
use diffpilot::{Error, GeneratorSpec, Result};

#[derive(Parser)]
#[command(name = "diffpilot", version, about = "Change-targeted GUI test generation on simulated apps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed overriding every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Event budget per directed run; environment actions for `train`.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// JSON experiment spec (generator spec for `gen-app`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// App model JSON, replacing the config's app or generator.
    #[arg(long, global = true)]
    app: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train,
    /// Directed runs toward sampled targets.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Policy overriding the config's.
        #[arg(long, value_parser = parse_policy)]
        policy: Option<PolicyKind>,
    },
    /// Events to cover each changed set, per policy.
    CommitEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Random-walk runs with the evaluation targets and budgets.
    Baseline,
    /// Merge run directories into comparison tables.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Generate a synthetic app model.
    GenApp,
    /// Re-run a manifest and compare its outputs byte for byte.
    Replay { manifest: PathBuf },
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown policy `{s}` (hawkeye, random, untrained)"))
}

impl Cli {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Validation("--out is required".into()))
    }

    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        if let Some(app) = &self.app {
            spec.app = Some(app.clone());
            spec.generator = None;
        }
        if let Some(seed) = self.seed {
            spec = spec.with_seed(seed);
        }
        if let Some(b) = self.budget {
            match self.command {
                Command::Train => spec.training.actions = b,
                _ => spec.budget = b as usize,
            }
        }
        Ok(spec)
    }
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train => {
            let out = cli.out()?;
            let o = harness::cmd_train(&cli.spec()?, out)?;
            println!(
                "trained {} steps on {} sequences ({} syncs, model version {})",
                o.trainer.steps, o.trainer.sequences, o.trainer.syncs, o.trainer.model_version
            );
            match &o.checkpoint {
                Some(p) => println!("checkpoint: {}", p.display()),
                None => println!("no optimizer steps ran; no checkpoint written"),
            }
        }
        Command::Evaluate { checkpoint, policy } => {
            let mut spec = cli.spec()?;
            if let Some(p) = policy {
                spec.policy = *p;
            }
            let out = cli.out()?;
            harness::cmd_evaluate(&spec, checkpoint.as_deref(), out)?;
            print!("{}", std::fs::read_to_string(out.join("report.md"))?);
        }
        Command::CommitEval { checkpoint } => {
            let out = cli.out()?;
            let r = harness::cmd_commit_eval(&cli.spec()?, checkpoint.as_deref(), out)?;
            print!("{}", r.render_markdown());
        }
        Command::Baseline => {
            let out = cli.out()?;
            harness::cmd_baseline(&cli.spec()?, out)?;
            print!("{}", std::fs::read_to_string(out.join("report.md"))?);
        }
        Command::Report { dirs } => {
            let m = harness::cmd_report(dirs, cli.out()?)?;
            print!("{}", harness::render_markdown(&m));
        }
        Command::GenApp => {
            let mut gen = match &cli.config {
                Some(p) => serde_json::from_str::<GeneratorSpec>(&std::fs::read_to_string(p)?)?,
                None => GeneratorSpec::default(),
            };
            if let Some(seed) = cli.seed {
                gen.seed = seed;
            }
            let (path, fp) = harness::cmd_gen_app(&gen, cli.out()?)?;
            println!("{} (fingerprint {fp})", path.display());
        }
        Command::Replay { manifest } => {
            let scratch;
            let out = match &cli.out {
                Some(o) => o.as_path(),
                None => {
                    scratch = std::env::temp_dir().join(format!("diffpilot-replay-{}", std::process::id()));
                    scratch.as_path()
                }
            };
            let r = harness::replay(manifest, out);
            if cli.out.is_none() {
                let _ = std::fs::remove_dir_all(out);
            }
            let r = r?;
            for f in &r.files {
                println!("{} {}", if f.identical() { "same" } else { "DIFF" }, f.name);
            }
            return Ok(r.identical());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("replay differs from the recorded run");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
