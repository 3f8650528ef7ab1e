use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use refn_cli::{commands, CliError, Config};

#[derive(Parser)]
#[command(
    name = "refn",
    version,
    about = "Learn, validate and refine network filter rules from packet captures"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "REFN_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured report directory.
    #[arg(long, global = true)]
    reports: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse every record's captures and report ADU statistics.
    Ingest { dataset: Option<PathBuf> },
    /// Train the rule policy on every record.
    Train {
        dataset: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Pentest a rule file against every record.
    Validate {
        rules: PathBuf,
        dataset: Option<PathBuf>,
        /// Also run decision-tree inference over the traffic.
        #[arg(long, requires = "ntot_spec")]
        ntot: bool,
        #[arg(long, value_name = "PATH")]
        ntot_spec: Option<PathBuf>,
    },
    /// Refine a rule file by fuzzing and trimming.
    Fuzz {
        rules: PathBuf,
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        budget: Option<u64>,
    },
    /// Write distillation tuples as JSON lines.
    Export {
        dataset: Option<PathBuf>,
        /// Extra rules to include for every record.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write a small synthetic Log4j dataset.
    Synth { dir: PathBuf },
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<bool, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(r) = cli.reports {
        cfg.paths.reports = r;
    }
    let dataset = |d: Option<PathBuf>| d.unwrap_or_else(|| cfg.paths.dataset.clone());
    match cli.command {
        Command::Ingest { dataset: d } => {
            commands::ingest(&cfg, &dataset(d), out)?;
        }
        Command::Train { dataset: d, iters } => {
            let d = dataset(d);
            if let Some(n) = iters {
                cfg.iters = n;
            }
            commands::train(&cfg, &d, out)?;
        }
        Command::Validate {
            rules,
            dataset: d,
            ntot,
            ntot_spec,
        } => {
            let spec = ntot_spec.filter(|_| ntot);
            let report = commands::validate(&cfg, &rules, &dataset(d), spec.as_deref(), out)?;
            return Ok(report.passed);
        }
        Command::Fuzz {
            rules,
            dataset: d,
            budget,
        } => {
            let d = dataset(d);
            if let Some(b) = budget {
                cfg.fuzz.budget = b as usize;
            }
            commands::fuzz(&cfg, &rules, &d, out)?;
        }
        Command::Export {
            dataset: d,
            rules,
            out: path,
        } => {
            let path = path.unwrap_or_else(|| cfg.paths.reports.join("distillation.jsonl"));
            commands::export(&cfg, &dataset(d), rules.as_deref(), &path, out)?;
        }
        Command::Synth { dir } => {
            let record = refn_core::synth::write_log4j_dataset(&dir)?;
            writeln!(out, "wrote {}", record.display()).map_err(|source| CliError::Io {
                path: Path::new("<stdout>").to_path_buf(),
                source,
            })?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
