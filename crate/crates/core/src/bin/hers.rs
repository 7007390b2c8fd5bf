use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hers_core::domain::Domain;
use hers_core::pipeline::{self, PipelineConfig, RunPaths};
use hers_core::Error;

#[derive(Parser)]
#[command(name = "hers", version, about = "Domain-expert synthesis, training, merging and trust metrics")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and filter the prompt bank.
    Prompts(Common),
    /// Draw one sample per retained prompt.
    Synth(Common),
    /// Pretrain the shared base denoiser.
    Pretrain(Common),
    /// Train adapters for one domain, or all when --domain is omitted.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        domain: Option<Domain>,
    },
    /// Merge the expert adapters factor-wise.
    Merge(Common),
    /// Score every model and write the reports.
    Eval(Common),
    /// Run every stage in order.
    RunAll(Common),
    /// Print the default config as JSON.
    DefaultConfig,
}

fn load_config(common: &Common, seed: Option<u64>) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage<T>(name: &'static str, common: &Common, seed: Option<u64>, f: impl FnOnce(&PipelineConfig, &RunPaths) -> Result<T, Error>) -> Result<(), Error> {
    let cfg = load_config(common, seed)?;
    let paths = RunPaths::new(&common.out);
    pipeline::write_config(&cfg, &paths).map_err(|e| e.in_stage("config"))?;
    f(&cfg, &paths).map(drop).map_err(|e| e.in_stage(name))
}

fn summarize(out: &Path) {
    println!("artifacts written to {}", out.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match &cli.command {
        Command::Prompts(c) => stage("prompts", c, seed, pipeline::stage_prompts).map(|_| summarize(&c.out)),
        Command::Synth(c) => stage("synth", c, seed, pipeline::stage_synth).map(|_| summarize(&c.out)),
        Command::Pretrain(c) => stage("pretrain", c, seed, pipeline::stage_pretrain).map(|_| summarize(&c.out)),
        Command::Train { common, domain } => {
            stage("train", common, seed, |cfg, paths| pipeline::stage_train(cfg, paths, *domain)).map(|_| summarize(&common.out))
        }
        Command::Merge(c) => stage("merge", c, seed, pipeline::stage_merge).map(|_| summarize(&c.out)),
        Command::Eval(c) => stage("eval", c, seed, pipeline::stage_eval).map(|_| summarize(&c.out)),
        Command::RunAll(c) => load_config(c, seed).and_then(|cfg| pipeline::run_all(&cfg, &c.out)).map(|_| summarize(&c.out)),
        Command::DefaultConfig => PipelineConfig::default().to_json().map(|j| println!("{j}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Stage { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
