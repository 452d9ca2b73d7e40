use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xprompt_core::harness::metrics::{read_jsonl, render_medians, render_table};
use xprompt_core::harness::pipeline::prepare_backbone;
use xprompt_core::harness::{
    run_baselines, run_pipeline, run_transfer, Baseline, PipelineOptions, RunConfig, Stage, TransferMode,
};
use xprompt_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xprompt",
    version,
    about = "Hierarchical prompt pruning on a frozen toy encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run only this seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory, overriding `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for grid cells.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or reuse) the backbone.
    Pretrain(Common),
    /// Stage 1: prompt tuning.
    Tune(Common),
    /// Stages 2 and 3 from an existing stage-1 checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Reuse a finished pruning checkpoint instead of recomputing it.
        #[arg(long)]
        resume: bool,
    },
    /// All stages.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Continue from the last finished stage checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this stage (backbone, tune or prune).
        #[arg(long)]
        stop_after: Option<String>,
    },
    /// Comparison runs against the pipeline checkpoints.
    Baselines {
        #[command(flatten)]
        common: Common,
        /// negative, random, reversed, length or vanilla; all when omitted.
        #[arg(long, value_delimiter = ',')]
        which: Vec<String>,
    },
    /// Initialize the target prompt from a source prompt checkpoint.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Source run checkpoint or prompt directory.
        #[arg(long)]
        source: PathBuf,
        /// plain, full, or both when omitted.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
    },
    /// Print the metrics tables found in the output directory.
    Report(Common),
    /// Print a configuration file with every default spelled out.
    Template,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !c.seeds.is_empty() {
        cfg.run.seeds = c.seeds.clone();
    }
    if let Some(o) = &c.out {
        cfg.run.out_dir = o.to_string_lossy().into_owned();
    }
    if let Some(j) = c.jobs {
        cfg.run.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn options(cfg: &RunConfig) -> PipelineOptions {
    PipelineOptions {
        jobs: cfg.run.jobs.max(1),
        ..PipelineOptions::default()
    }
}

fn print_records(records: &[xprompt_core::harness::MetricsRecord]) {
    let finals: Vec<_> = records.iter().filter(|r| r.stage != "cell").cloned().collect();
    print!("{}", render_table(&finals));
    println!();
    print!("{}", render_medians(&finals));
}

fn report(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    let files = [
        ("pipeline", out.join("metrics.jsonl")),
        ("baselines", out.join("baselines.jsonl")),
        ("transfer", out.join("transfer").join("metrics.jsonl")),
    ];
    let mut found = false;
    for (name, path) in files {
        if path.is_file() {
            found = true;
            println!("== {name} ({}) ==", path.display());
            print_records(&read_jsonl(&path)?);
            println!();
        }
    }
    if !found {
        return Err(Error::Dependency(format!("no metrics found under {}", out.display())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Template => {
            print!("{}", RunConfig::template());
        }
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            let bb = prepare_backbone(&cfg).map_err(|e| e.in_stage("backbone"))?;
            println!(
                "backbone {} in {}",
                bb.weights_hash(),
                cfg.out_dir().join("backbone").display()
            );
        }
        Command::Tune(c) => {
            let cfg = load_config(&c)?;
            let opts = PipelineOptions {
                stop_after: Some(Stage::Tune),
                ..options(&cfg)
            };
            print_records(&run_pipeline(&cfg, &opts)?);
        }
        Command::Prune { common, resume } => {
            let cfg = load_config(&common)?;
            let opts = PipelineOptions {
                require_tuned: true,
                resume,
                ..options(&cfg)
            };
            print_records(&run_pipeline(&cfg, &opts)?);
        }
        Command::Pipeline {
            common,
            resume,
            stop_after,
        } => {
            let cfg = load_config(&common)?;
            let opts = PipelineOptions {
                resume,
                stop_after: stop_after.as_deref().map(str::parse).transpose()?,
                ..options(&cfg)
            };
            print_records(&run_pipeline(&cfg, &opts)?);
        }
        Command::Baselines { common, which } => {
            let cfg = load_config(&common)?;
            let which = if which.is_empty() {
                Baseline::ALL.to_vec()
            } else {
                which.iter().map(|w| w.parse()).collect::<Result<_>>()?
            };
            print_records(&run_baselines(&cfg, &which, &options(&cfg))?);
        }
        Command::Transfer { common, source, mode } => {
            let cfg = load_config(&common)?;
            let modes = if mode.is_empty() {
                vec![TransferMode::Plain, TransferMode::Full]
            } else {
                mode.iter().map(|m| m.parse()).collect::<Result<_>>()?
            };
            print_records(&run_transfer(&cfg, &source, &modes, &options(&cfg))?);
        }
        Command::Report(c) => report(&load_config(&c)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XPROMPT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
