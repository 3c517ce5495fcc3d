use std::path::PathBuf;
use std::process::ExitCode;

use bm_cli::commands;
use bm_cli::{CliError, Experiment, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bm", version, about = "Gaussian-noise slope regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds to run, e.g. `--seed 0,1,2`; overrides the config's list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Worker threads; falls back to BM_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate labeled, unlabeled and evaluation caches.
    Gen,
    /// Train one model per seed.
    Train,
    /// Run the configured attacks and ρ_adv.
    Attack,
    /// Export the SoftMax surface of a 2D model.
    Surface,
    /// Retrain at scaled σ_u, σ_b.
    SigmaSweep,
    /// Validation accuracy across λ values.
    LambdaSweep,
    /// Prediction statistics on foreign images.
    Uuc,
    /// Collect results into report.json.
    Report,
    /// gen, train, attack, then surface/uuc when configured, then report.
    All,
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("BM_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("BM_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let seeds = (!cli.seed.is_empty()).then_some(cli.seed.as_slice());
    let exp = Experiment::load(config, cli.out.as_deref(), seeds)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads(cli.threads)? {
        if n == 0 {
            return Err(CliError::Config("thread count must be ≥ 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| dispatch(cli.command, &exp))
}

fn dispatch(cmd: Command, exp: &Experiment) -> Result<()> {
    match cmd {
        Command::Gen => commands::cmd_gen(exp),
        Command::Train => commands::cmd_train(exp),
        Command::Attack => commands::cmd_attack(exp),
        Command::Surface => commands::cmd_surface(exp),
        Command::SigmaSweep => commands::cmd_sigma_sweep(exp),
        Command::LambdaSweep => commands::cmd_lambda_sweep(exp),
        Command::Uuc => commands::cmd_uuc(exp),
        Command::Report => {
            print!("{}", commands::cmd_report(exp)?);
            Ok(())
        }
        Command::All => {
            commands::cmd_gen(exp)?;
            commands::cmd_train(exp)?;
            commands::cmd_attack(exp)?;
            if exp.config.surface.is_some() {
                commands::cmd_surface(exp)?;
            }
            if exp.config.uuc.is_some() {
                commands::cmd_uuc(exp)?;
            }
            dispatch(Command::Report, exp)
        }
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
