use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use seqrec_core::model::Variant;
use seqrec_lab::pipeline::{self, Outcome};
use seqrec_lab::rundir::default_root;
use seqrec_lab::{LoadedConfig, Session, WriteMode};

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Generative, dense and hybrid sequential retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run seed; defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides $LIGER_RUN_DIR.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Recompute and overwrite completed outputs.
    #[arg(long, conflicts_with = "if_changed")]
    force: bool,
    /// Skip completed stages whose inputs are unchanged.
    #[arg(long)]
    if_changed: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, truncate and split the dataset; flag cold-start items.
    Preprocess(Common),
    /// Train the residual-quantizing autoencoder on non-cold items.
    TrainRqvae(Common),
    /// Quantize every item into a semantic ID.
    AssignSids(Common),
    /// Train one variant, or every configured variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Recall and NDCG of every trained variant on the test split.
    Evaluate(Common),
    /// Generation probabilities of cold-start labels.
    Coldstart {
        #[command(flatten)]
        common: Common,
        /// Beam sizes, comma separated.
        #[arg(long = "Ks", value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Hybrid recall and normalized performance gap over beam sizes.
    Npg {
        #[command(flatten)]
        common: Common,
        /// Beam sizes, comma separated.
        #[arg(long = "Ks", value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Mean and standard deviation of evaluation metrics over all seeds.
    Report(Common),
    /// Every stage in order.
    Pipeline(Common),
}

impl Common {
    fn mode(&self) -> WriteMode {
        match (self.force, self.if_changed) {
            (true, _) => WriteMode::Force,
            (_, true) => WriteMode::IfChanged,
            _ => WriteMode::Normal,
        }
    }

    fn load(&self) -> anyhow::Result<(LoadedConfig, PathBuf)> {
        let cfg = LoadedConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        Ok((cfg, self.run_dir.clone().unwrap_or_else(default_root)))
    }

    fn session(&self) -> anyhow::Result<Session> {
        let (cfg, root) = self.load()?;
        let seed = self.seed.unwrap_or(cfg.config.seeds[0]);
        Ok(Session::open(cfg, seed, &root, self.mode())?)
    }
}

fn run(cli: Cli) -> anyhow::Result<Vec<Outcome>> {
    Ok(match cli.command {
        Command::Preprocess(c) => vec![pipeline::cmd_preprocess(&c.session()?)?],
        Command::TrainRqvae(c) => vec![pipeline::cmd_train_rqvae(&c.session()?)?],
        Command::AssignSids(c) => vec![pipeline::cmd_assign_sids(&c.session()?)?],
        Command::Train { common, variant } => pipeline::cmd_train(&common.session()?, variant)?,
        Command::Evaluate(c) => vec![pipeline::cmd_evaluate(&c.session()?)?],
        Command::Coldstart { common, ks } => vec![pipeline::cmd_coldstart(&common.session()?, ks)?],
        Command::Npg { common, ks } => vec![pipeline::cmd_npg(&common.session()?, ks)?],
        Command::Report(c) => {
            let (cfg, root) = c.load()?;
            vec![pipeline::cmd_report(&cfg, &root, c.mode())?]
        }
        Command::Pipeline(c) => pipeline::run_pipeline(&c.session()?)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(outcomes) => {
            for o in outcomes {
                println!("{}: {}", o.stage, if o.skipped { "up to date" } else { "done" });
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
