use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mclearn_cli::config::{effective_config, Overrides};
use mclearn_cli::stages::{run_all, run_stage, Outcome, Stage};
use mclearn_cli::RunDir;
use mclearn_core::metatrain::SamplerKind;

/// Meta-curriculum domain adaptation pipeline.
#[derive(Parser)]
#[command(name = "mclearn", version, about)]
struct Cli {
    /// Run directory holding all artifacts of one experiment.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// JSON config file; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Re-run even if the stage is already complete, overwriting a drifted
    /// config.
    #[arg(long, global = true)]
    force: bool,

    #[command(flatten)]
    overrides: FlagOverrides,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct FlagOverrides {
    /// Global seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Negate the curriculum ranking key (stored scores are unaffected).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    flip_sign: Option<bool>,

    /// Source-token budget per support set and meta-test support split.
    #[arg(long, global = true)]
    support_tokens: Option<usize>,

    /// Source-token budget per query set and meta-test query split.
    #[arg(long, global = true)]
    query_tokens: Option<usize>,

    /// Tasks per meta-step.
    #[arg(long, global = true)]
    tasks: Option<usize>,

    /// Number of meta-steps.
    #[arg(long, global = true)]
    meta_steps: Option<usize>,

    /// Inner (task-adaptation) learning rate.
    #[arg(long, global = true)]
    inner_lr: Option<f64>,

    /// Outer (meta) learning rate.
    #[arg(long, global = true)]
    outer_lr: Option<f64>,

    /// Fine-tuning epochs per domain.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Beam size for evaluation decoding.
    #[arg(long, global = true)]
    beam: Option<usize>,
}

impl From<&FlagOverrides> for Overrides {
    fn from(f: &FlagOverrides) -> Self {
        Overrides {
            seed: f.seed,
            flip_sign: f.flip_sign,
            support_tokens: f.support_tokens,
            query_tokens: f.query_tokens,
            tasks: f.tasks,
            meta_steps: f.meta_steps,
            inner_lr: f.inner_lr,
            outer_lr: f.outer_lr,
            epochs: f.epochs,
            beam: f.beam,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain corpora.
    Gen,
    /// Build vocabulary and splits; pre-train the vanilla translator.
    Pretrain,
    /// Train the general scoring LM and the per-domain LMs.
    TrainLm,
    /// Score divergence for curriculum pools and query splits.
    Score,
    /// FoMAML meta-training from the vanilla checkpoint.
    MetaTrain {
        /// Task sampling: sliding-window curriculum or the frozen uniform
        /// baseline.
        #[arg(long, value_enum, default_value = "curriculum")]
        sampler: SamplerArg,
    },
    /// Fine-tune every base system on each domain's support split.
    Finetune,
    /// Beam-decode all systems on the query splits and compute BLEU.
    Evaluate,
    /// Render the comparison report and bucket tables.
    Report,
    /// Run every stage in order (both samplers).
    RunAll,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SamplerArg {
    Curriculum,
    Uniform,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Curriculum => SamplerKind::Curriculum,
            SamplerArg::Uniform => SamplerKind::Uniform,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let overrides = Overrides::from(&cli.overrides);
    let cfg = effective_config(cli.config.as_deref(), &overrides)?;
    let dir = RunDir::at(&cli.run_dir);

    let print = |stage: Stage, outcome: Outcome| {
        let verdict = match outcome {
            Outcome::Ran => "done",
            Outcome::UpToDate => "up to date",
        };
        println!("{:<24} {verdict}", stage.name());
    };

    match cli.cmd {
        Cmd::Gen => print(Stage::Gen, run_stage(&dir, &cfg, cli.force, Stage::Gen)?),
        Cmd::Pretrain => print(
            Stage::Pretrain,
            run_stage(&dir, &cfg, cli.force, Stage::Pretrain)?,
        ),
        Cmd::TrainLm => print(
            Stage::TrainLm,
            run_stage(&dir, &cfg, cli.force, Stage::TrainLm)?,
        ),
        Cmd::Score => print(Stage::Score, run_stage(&dir, &cfg, cli.force, Stage::Score)?),
        Cmd::MetaTrain { sampler } => {
            let stage = Stage::MetaTrain(sampler.into());
            print(stage, run_stage(&dir, &cfg, cli.force, stage)?);
        }
        Cmd::Finetune => print(
            Stage::Finetune,
            run_stage(&dir, &cfg, cli.force, Stage::Finetune)?,
        ),
        Cmd::Evaluate => print(
            Stage::Evaluate,
            run_stage(&dir, &cfg, cli.force, Stage::Evaluate)?,
        ),
        Cmd::Report => print(
            Stage::Report,
            run_stage(&dir, &cfg, cli.force, Stage::Report)?,
        ),
        Cmd::RunAll => {
            for (stage, outcome) in run_all(&dir, &cfg, cli.force)? {
                print(stage, outcome);
            }
        }
    }
    Ok(())
}
