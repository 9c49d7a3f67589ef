use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use phm_harness::control::{get_status, ControlPolicy, Mode, RunDir};
use phm_harness::runtime::{load_datasource, StackContext};
use phm_harness::verification::{run_verification, CheckStatus, VerificationPolicy};
use phm_harness::workflow::{self, PaperSpec, RunOptions, RunOutcome, WORKSPACE_ENV};

#[derive(Parser)]
#[command(name = "phm-harness", version, about = "Reproduction harness for PHM papers")]
struct Cli {
    /// Workspace root; bare run names resolve to <workspace>/validate-paper/<name>.
    #[arg(long, global = true, env = WORKSPACE_ENV)]
    workspace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    BlueprintOnly,
    Quick,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::BlueprintOnly => Mode::BlueprintOnly,
            ModeArg::Quick => Mode::Quick,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Start a run from a paper spec.
    ValidateRun {
        /// Run name or directory.
        run: String,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        paper_spec: PathBuf,
        /// Control policy (retry budget, phase gates) as JSON.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Print the state of a run without changing it.
    Status {
        run: String,
        #[arg(long)]
        json: bool,
    },
    /// Reconcile a run with its artifacts and continue it.
    Resume {
        run: String,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Compare the run's model against a baseline model binding.
    Bench {
        run: String,
        #[arg(long)]
        baseline: String,
    },
    /// Run static verification and the sanity ladder on a paper spec.
    Ladder {
        #[arg(long)]
        paper_spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve_run(workspace: Option<&Path>, run: &str) -> Result<RunDir> {
    let p = Path::new(run);
    let is_path = p.is_absolute() || p.components().count() > 1 || run == "." || run == "..";
    if is_path {
        return Ok(RunDir::new(p));
    }
    let ws = match workspace {
        Some(w) => w.to_path_buf(),
        None => std::env::current_dir().context("cannot determine the working directory")?,
    };
    Ok(RunDir::new(workflow::run_directory(&ws, run)))
}

fn run_name(dir: &RunDir) -> String {
    dir.root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn options(policy: Option<&Path>) -> Result<RunOptions> {
    let mut opts = RunOptions::from_env();
    if let Some(p) = policy {
        let text = fs::read_to_string(p).with_context(|| format!("reading policy {}", p.display()))?;
        opts.policy = serde_json::from_str::<ControlPolicy>(&text).with_context(|| format!("parsing policy {}", p.display()))?;
    }
    Ok(opts)
}

fn report(outcome: &RunOutcome, dir: &RunDir) -> ExitCode {
    print!("{}", get_status(&outcome.state, Some(dir)).render());
    if let Some((phase, blocker)) = &outcome.blocker {
        eprintln!("blocked in {phase}: {blocker}");
    }
    ExitCode::from(outcome.exit_code() as u8)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ws = cli.workspace.as_deref();
    match cli.command {
        Command::ValidateRun {
            run,
            mode,
            seed,
            paper_spec,
            policy,
        } => {
            let dir = resolve_run(ws, &run)?;
            let opts = options(policy.as_deref())?;
            let outcome = workflow::validate_run(&dir, &paper_spec, &run_name(&dir), mode.into(), seed, &opts)?;
            Ok(report(&outcome, &dir))
        }
        Command::Status { run, json } => {
            let dir = resolve_run(ws, &run)?;
            let state = dir.load_state()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&workflow::status_value(&state, &dir))?);
            } else {
                print!("{}", get_status(&state, Some(&dir)).render());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Resume { run, policy } => {
            let dir = resolve_run(ws, &run)?;
            let opts = options(policy.as_deref())?;
            let outcome = workflow::resume(&dir, &opts)?;
            Ok(report(&outcome, &dir))
        }
        Command::Bench { run, baseline } => {
            let dir = resolve_run(ws, &run)?;
            let result = workflow::bench(&dir, &baseline)?;
            println!("{}", result.row);
            Ok(ExitCode::SUCCESS)
        }
        Command::Ladder { paper_spec, seed } => {
            let text = fs::read_to_string(&paper_spec).with_context(|| format!("reading {}", paper_spec.display()))?;
            let spec = PaperSpec::parse(&text).map_err(anyhow::Error::msg)?;
            let prep = workflow::prepare(&spec).map_err(anyhow::Error::msg)?;
            let ctx = StackContext {
                base_dir: paper_spec.parent().map(Path::to_path_buf),
                seed,
            };
            let loaded = load_datasource(&prep.config, &prep.registry, &prep.contract, &ctx);
            let out = run_verification(&prep.config, &prep.registry, &prep.contract, loaded, seed, &VerificationPolicy::default());
            for c in &out.checks {
                let id = serde_json::to_value(c.check_id)?;
                let status = match c.status {
                    CheckStatus::Pass => "pass",
                    CheckStatus::Warn => "warn",
                    CheckStatus::Fail => "fail",
                };
                println!("{:<20} {status:<5} {}", id.as_str().unwrap_or_default(), c.messages.join("; "));
            }
            println!("verdict: {}", out.verdict.as_str());
            if !out.verdict.proceeds() {
                bail!("ladder verdict {}", out.verdict.as_str());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
