use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deltamil::config::{Overrides, RunConfig};
use deltamil::harness;
use deltamil::{Error, Exec};

#[derive(Parser)]
#[command(name = "deltamil", version, about = "Gated delta-rule MIL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict to a single cross-validation fold.
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Disable the 2-D local branch.
    #[arg(long, global = true)]
    no_local: bool,
    /// Fix the decay gate at 1.
    #[arg(long, global = true)]
    no_gated: bool,
    /// Use the additive update instead of the delta rule.
    #[arg(long, global = true)]
    no_delta: bool,
    /// Standardize features per bag.
    #[arg(long, global = true)]
    zscore: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth,
    /// Cross-validated training.
    Train,
    /// Evaluate saved checkpoints on their test folds.
    Eval,
    /// Train each ablation variant.
    Ablate,
    /// Patch-retention curves.
    Sweep,
    /// Export attention heatmaps.
    Heatmap,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "io" => 3,
        "format" => 4,
        "manifest" => 5,
        "training" => 6,
        "metric" => 7,
        _ => 8,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::from_text("")?,
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        out: c.out,
        fold: c.fold,
        chunk_size: c.chunk_size,
        layers: c.layers,
        heads: c.heads,
        no_local: c.no_local,
        no_gated: c.no_gated,
        no_delta: c.no_delta,
        zscore: c.zscore,
    })?;
    let exec = Exec::default();
    match cli.command {
        Command::Synth => {
            let o = harness::cmd_synth(&cfg, exec)?;
            println!("wrote {} bags; manifest {}", o.n_bags, o.manifest.display());
        }
        Command::Train => print!("{}", harness::cmd_train(&cfg, exec)?.report.render()),
        Command::Eval => print!("{}", harness::cmd_eval(&cfg, exec)?.render()),
        Command::Ablate => print!("{}", harness::cmd_ablate(&cfg, exec)?.render()),
        Command::Sweep => print!("{}", deltamil::saliency::render_curves(&harness::cmd_sweep(&cfg, exec)?)),
        Command::Heatmap => {
            let o = harness::cmd_heatmap(&cfg, exec)?;
            for p in &o.paths {
                println!("{}", p.display());
            }
            for (id, p) in &o.witness_percentiles {
                println!("{id}\twitness_percentile {p:.4}");
            }
        }
        Command::Gradcheck => {
            let o = harness::cmd_gradcheck(&cfg, exec)?;
            print!("{}", o.render());
            if !o.pass() {
                eprintln!("compute error: gradient check failed, worst relative error {:.3e}", o.max_rel_err);
                return Ok(ExitCode::from(8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{} error: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
