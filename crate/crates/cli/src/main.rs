use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use halluc_cli::commands::{self, Axis};
use halluc_cli::report;
use halluc_cli::{parse_seed_list, CliError, ExperimentConfig};
use halluc_core::heads::HeadKind;
use halluc_core::pipeline::{ProposalMode, Schedule, VariantSetting};

#[derive(Parser)]
#[command(name = "halluc", version, about = "Few-shot hallucination experiments on a synthetic feature world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a world and write it with a manifest.
    GenWorld(Common),
    /// Run the configured cell over every seed.
    Train(Common),
    /// Sweep one axis with everything else fixed.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize result CSVs as markdown.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; `a..b` ranges are end-exclusive.
    #[arg(long)]
    seed_list: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_parser = ["single", "corpns"])]
    proposal: Option<String>,
    #[arg(long, value_parser = ["cosine", "fc"])]
    head: Option<String>,
    #[arg(long, value_parser = ["conservative", "aggressive", "none"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["1", "2", "joint"])]
    em_iters: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seed_list {
            cfg.run.seeds = parse_seed_list(s)?;
        }
        if let Some(k) = self.shots {
            cfg.train.shot = k;
        }
        if let Some(m) = self.m {
            cfg.train.m = m;
        }
        if let Some(p) = &self.proposal {
            cfg.train.proposal = p.parse::<ProposalMode>()?;
        }
        if let Some(h) = &self.head {
            cfg.train.head_kind = h.parse::<HeadKind>()?;
        }
        if let Some(v) = &self.variant {
            cfg.train.variant = v.parse::<VariantSetting>()?;
        }
        match self.em_iters.as_deref() {
            Some("joint") => cfg.train.schedule = Schedule::Joint,
            Some(n) => {
                cfg.train.schedule = Schedule::Em;
                cfg.train.em_iterations = n.parse().map_err(|_| CliError::Argument(format!("bad --em-iters '{n}'")))?;
            }
            None => {}
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.clone();
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = commands::thread_count()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Argument(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenWorld(c) => {
            let cfg = c.resolve()?;
            let (path, err) = commands::gen_world(&cfg)?;
            let status = if err < 1e-10 { "ok" } else { "FAILED" };
            println!("mode orthonormality: max |UᵀU - I| = {err:.3e} ({status})");
            println!("wrote {}", path.display());
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            log::info!("train: {} seeds, {threads} threads", cfg.run.seeds.len());
            let path = pool.install(|| commands::train(&cfg))?;
            println!("wrote {}", path.display());
        }
        Command::Ablate { axis, common } => {
            let cfg = common.resolve()?;
            log::info!("ablate {}: {} seeds, {threads} threads", axis.as_str(), cfg.run.seeds.len());
            let path = pool.install(|| commands::ablate(&cfg, axis))?;
            println!("wrote {}", path.display());
        }
        Command::Report { csv } => {
            let tables = csv.iter().map(|p| report::load_csv(p)).collect::<Result<Vec<_>, _>>()?;
            print!("{}", report::render(&tables));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
