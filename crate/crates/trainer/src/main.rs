use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clorae_core::Checkpoint;
use clorae_data::jsonl::write_suite;
use clorae_data::Split;
use clorae_model::Seq2Seq;
use clorae_trainer::ablate::variant_config;
use clorae_trainer::{
    ablate, encode_suite, evaluate, load_suite, prepare, routing_cmd, train_prepared, RunConfig, TrainError,
};

/// Collaborative multi-LoRA expert training on a synthetic extraction suite.
#[derive(Parser)]
#[command(name = "clorae", version)]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Named ablation variant (full, no_mim, no_aml, no_gate, only_tlora, only_ulora, lora).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Read the suite written by `gen-data` instead of generating it.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory root.
    #[arg(long, global = true, env = "CLORAE_OUT", default_value = "clorae-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic suite as JSON lines.
    GenData,
    /// Train one configuration.
    Train,
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train several variants over several seeds and compare test F1.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,no_mim,no_aml,no_gate,only_tlora,only_ulora")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Gate statistics of a checkpoint per layer group and task.
    Routing {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Trainable-parameter counts per variant.
    Params {
        #[arg(long, value_delimiter = ',', default_value = "full,no_mim,no_aml,no_gate,only_tlora,only_ulora,lora")]
        variants: Vec<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, TrainError> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| TrainError::Config(format!("unknown split `{s}`")))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, TrainError> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("`--set {kv}`: expected KEY=VALUE")))?;
            c.set(k.trim(), v)?;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = &self.variant {
            c = variant_config(&c, v)?;
        }
        if let Some(v) = &self.data_dir {
            c.data_dir = Some(v.clone());
        }
        if c.out_dir.is_none() {
            c.out_dir = Some(self.out.clone());
        }
        Ok(c)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), TrainError> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_model(path: &Path) -> Result<Seq2Seq<f64>, TrainError> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        clorae_core::CoreError::Io(io) => io_err(path, io),
        e => e.into(),
    })?;
    Ok(Seq2Seq::from_checkpoint(&ck)?)
}

fn run(cli: Cli) -> Result<(), TrainError> {
    let config = cli.run.resolve()?;
    let out = config.out_dir.clone().expect("resolved");
    match cli.command {
        Command::GenData => {
            let suite = load_suite(&config)?;
            write_suite(&out, &suite)?;
            for d in &suite.datasets {
                println!("{:<12} train {:>6} dev {:>6} test {:>6}", d.spec.name, d.train.len(), d.dev.len(), d.test.len());
            }
            println!("wrote {}", out.display());
        }
        Command::Train => {
            let data = prepare(&config)?;
            let outcome = train_prepared(&config, &data, &mut |m, secs| {
                let cells: Vec<String> = m
                    .datasets
                    .iter()
                    .map(|d| format!("{} ce {:.3} f1 {:.3} w {:.3}", d.dataset, d.train_ce, d.dev_f1, d.weight))
                    .collect();
                eprintln!("epoch {:>3} [{secs:.1}s] {}", m.epoch, cells.join(" | "));
            })?;
            print!("{}", outcome.test.table());
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, split } => {
            let split = parse_split(&split)?;
            let model = load_model(&checkpoint)?;
            let data = encode_suite(load_suite(&config)?, model.vocab().clone(), model.config())?;
            let report = evaluate(&model, &data, split, None, config.eval_group)?;
            write_json(&out.join(format!("eval_{}.json", split.name())), &report)?;
            print!("{}", report.table());
        }
        Command::Ablate { variants, seeds } => {
            let data = prepare(&config)?;
            let names: Vec<&str> = variants.iter().map(String::as_str).collect();
            let report = ablate(&config, &data, &names, &seeds)?;
            write_json(&out.join("ablation.json"), &report)?;
            print!("{}", report.table());
        }
        Command::Routing { checkpoint, split } => {
            let split = parse_split(&split)?;
            let model = load_model(&checkpoint)?;
            let data = encode_suite(load_suite(&config)?, model.vocab().clone(), model.config())?;
            let samples: Vec<_> = data.encoded.iter().flat_map(|e| e.split(split).iter().cloned()).collect();
            let report = routing_cmd(&model, &samples, config.eval_group)?;
            write_json(&out.join(format!("routing_{}.json", split.name())), &report)?;
            println!("{:<8} {:>4} {:>14} {:>10} {:>10}", "group", "task", "task-specific", "universal", "tokens");
            for r in &report.rows {
                println!("{:<8} {:>4} {:>14.4} {:>10.4} {:>10}", r.group, r.task, r.task_specific, r.universal, r.tokens);
            }
        }
        Command::Params { variants } => {
            let data = prepare(&config)?;
            println!(
                "{:<12} {:>10} {:>10} {:>8} {:>8} {:>10} {:>8} {:>10}",
                "variant", "universal", "task", "gate", "mim", "lora", "other", "total"
            );
            for v in &variants {
                let c = variant_config(&config, v)?;
                let model = Seq2Seq::<f64>::new(c.model_config(data.vocab.len()), data.vocab.clone())?;
                let n = model.count_trainable();
                println!(
                    "{:<12} {:>10} {:>10} {:>8} {:>8} {:>10} {:>8} {:>10}",
                    v,
                    n.universal,
                    n.task_experts,
                    n.gate,
                    n.mim_head,
                    n.lora_matrices(),
                    n.other,
                    n.total
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
