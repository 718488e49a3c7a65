//! pr2l: experiment driver for promptable-representation RL studies.

mod commands;
mod config;
mod envs;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Overrides};
use error::Result;

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for seed fan-out.
    #[arg(long)]
    workers: Option<usize>,
    /// Representation condition override.
    #[arg(long)]
    condition: Option<String>,
    /// Task override.
    #[arg(long)]
    task: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                out: self.out.clone(),
                workers: self.workers,
                condition: self.condition.clone(),
                task: self.task.clone(),
            },
        )
    }
}

#[derive(Debug, Parser)]
#[command(name = "pr2l", version, about = "Promptable-representation RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the VQA pretraining dataset.
    GenVqa(Common),
    /// Pretrain the VLM on generated VQA data.
    PretrainVlm(Common),
    /// Collect expert / offline datasets.
    CollectData(Common),
    /// Online PPO training across seeds.
    TrainPpo(Common),
    /// Behavior cloning on expert data.
    TrainBc(Common),
    /// Conservative Q-learning on offline data.
    TrainCql(Common),
    /// Re-evaluate trained checkpoints.
    Eval(Common),
    /// Detection quality of the presence prompts.
    PromptEval(Common),
    /// Linear position probes on decoded representations.
    Probe(Common),
    /// PCA analyses of packet embeddings.
    Analyze(Common),
    /// Run the learner over several conditions and emit a comparison report.
    Sweep(Common),
}

fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenVqa(c) => commands::data::gen_vqa(&c.load()?),
        Command::PretrainVlm(c) => commands::data::pretrain_vlm(&c.load()?),
        Command::CollectData(c) => commands::data::collect_data(&c.load()?),
        Command::TrainPpo(c) => commands::train::train_ppo(&c.load()?),
        Command::TrainBc(c) => commands::train::train_bc(&c.load()?),
        Command::TrainCql(c) => commands::train::train_cql(&c.load()?),
        Command::Eval(c) => commands::evalcmd::eval_cmd(&c.load()?),
        Command::PromptEval(c) => commands::evalcmd::prompt_eval(&c.load()?),
        Command::Probe(c) => commands::evalcmd::probe(&c.load()?),
        Command::Analyze(c) => commands::analyze::analyze(&c.load()?),
        Command::Sweep(c) => commands::sweep::sweep(&c.load()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
