use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use udanas::pipeline::{self, LoadedConfig, RunConfig};
use udanas::selftrain::Scheme;
use udanas::space::{format_si, parse_si};
use udanas::Error;

#[derive(Parser)]
#[command(name = "udanas", version, about = "MRF architecture search with self-training domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON config; the toy profile when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// MAC ceiling such as `2.5G`, or `inf`.
    #[arg(long, global = true, value_parser = parse_si)]
    budget_flops: Option<f64>,
    /// Candidates per scheme.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Restrict the run to one pseudo-labelling scheme.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    #[arg(long, global = true, default_value = "runs/out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the supernet and the architecture MRF.
    Search,
    /// Extract diverse candidates and filter them by the FLOPs budget.
    Infer,
    /// Retrain every candidate and write the run report.
    Retrain,
    /// Evaluate saved subnet weights on the target evaluation set.
    Eval {
        /// Checkpoint stem, e.g. `runs/out/subnets/confidence_0`.
        #[arg(long)]
        weights: PathBuf,
        /// Also write an SVG bar chart.
        #[arg(long)]
        svg: bool,
    },
    /// search, infer, retrain and eval in one go.
    Report,
}

fn load(c: &Common) -> udanas::Result<LoadedConfig> {
    let loaded = match &c.config {
        Some(path) => LoadedConfig::from_path(path)?,
        None => LoadedConfig::in_memory(RunConfig::toy())?,
    };
    let mut config = loaded.config;
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    if let Some(b) = c.budget_flops {
        config.infer.budget_flops = Some(b);
    }
    if let Some(m) = c.m {
        config.infer.m = m;
    }
    if let Some(s) = c.scheme {
        config.schemes = vec![s];
    }
    Ok(LoadedConfig {
        config: config.finalize()?,
        digest: loaded.digest,
    })
}

fn run(cli: Cli) -> udanas::Result<()> {
    let cfg = load(&cli.common)?;
    let out = &cli.common.out_dir;
    match cli.command {
        Command::Search => {
            for a in pipeline::cmd_search(&cfg, out)? {
                println!(
                    "{}: mrf {} (sha256 {}), factor L2 {:.4}",
                    a.scheme,
                    a.mrf.display(),
                    &a.mrf_digest[..12],
                    a.final_factor_l2
                );
            }
        }
        Command::Infer => {
            for c in pipeline::cmd_infer(&cfg, out)? {
                println!(
                    "{} #{}: {} flops {} params {} score {:.4}",
                    c.scheme,
                    c.round,
                    c.description,
                    format_si(c.flops as f64),
                    format_si(c.params as f64),
                    c.score
                );
            }
        }
        Command::Retrain | Command::Report => {
            let report = if matches!(cli.command, Command::Report) {
                pipeline::cmd_report(&cfg, out)?
            } else {
                pipeline::cmd_retrain(&cfg, out)?
            };
            for s in &report.subnets {
                println!(
                    "{:>2}{} {} #{}: mIoU {:.4} flops {} params {}",
                    s.rank,
                    if s.selected { "*" } else { " " },
                    s.candidate.scheme,
                    s.candidate.round,
                    s.metrics.target_miou,
                    format_si(s.candidate.flops as f64),
                    format_si(s.candidate.params as f64)
                );
            }
            println!("report: {}", pipeline::report_path(out).display());
        }
        Command::Eval { weights, svg } => {
            let r = pipeline::cmd_eval(&cfg, &weights, out, svg)?;
            println!("mIoU {:.4}", r.mean);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
