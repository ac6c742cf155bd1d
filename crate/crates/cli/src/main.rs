use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xstab::data::DatasetKind;
use xstab::harness::{self, exit_code, ExperimentConfig};
use xstab::Error;

#[derive(Parser)]
#[command(name = "xstab", version, about = "Explanation stability experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the undefended softplus CNN.
    Train(Common),
    /// Fine-tune the trained model with ATEX, saving every iteration.
    Atex(Common),
    /// Manipulate explanations of the baseline and ATEX models.
    AttackExplain(Common),
    /// FGSM robustness and the explanation/attack-direction check.
    AttackFgsm(Common),
    /// Adversarial fine-tuning of selected ATEX checkpoints.
    Advtrain(Common),
    /// Clean accuracy and the SmoothGrad similarity study.
    Eval(Common),
    /// Assemble report tables from earlier stages.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
    /// Print the default configuration as JSON.
    InitConfig,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults apply to omitted fields.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "mnist" => Ok(DatasetKind::Mnist),
        "fashion" | "fashion-mnist" => Ok(DatasetKind::Fashion),
        other => Err(format!("unknown dataset `{other}` (expected mnist or fashion)")),
    }
}

impl Common {
    fn resolve(&self) -> xstab::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.eval_size {
            cfg.eval.size = n;
        }
        if let Some(n) = self.train_size {
            cfg.train_size = Some(n);
        }
        if let Some(k) = self.top_k {
            cfg.eval.top_k = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> xstab::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> xstab::Result<()> {
    match cli.command {
        Command::InitConfig => println!("{}", ExperimentConfig::default().to_json()?),
        Command::Train(c) => print_json(&harness::cmd_train(&c.resolve()?)?)?,
        Command::Atex(c) => print_json(&harness::cmd_atex(&c.resolve()?)?)?,
        Command::AttackExplain(c) => print_json(&harness::cmd_attack_explain(&c.resolve()?)?)?,
        Command::AttackFgsm(c) => print_json(&harness::cmd_attack_fgsm(&c.resolve()?)?)?,
        Command::Advtrain(c) => print_json(&harness::cmd_advtrain(&c.resolve()?)?)?,
        Command::Eval(c) => print_json(&harness::cmd_eval(&c.resolve()?)?)?,
        Command::Report(c) => print_json(&harness::cmd_report(&c.resolve()?)?)?,
        Command::Run(c) => print_json(&harness::run_all(&c.resolve()?)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Dependency { stage, .. } = &e {
                eprintln!("hint: run `xstab {stage}` first");
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
