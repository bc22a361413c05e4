use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use mmg_core::dataeng::{generate_synthetic, load_dataset, Dataset, DatasetSpec, Split};
use mmg_core::orchestrator::{
    collect_records, fewshot_eval, report, run_pipeline, supervised_eval, Checkpoint, EvalRow,
    RunConfig, Setting, Task, TOP1,
};
use mmg_core::{Error, ModalityMask};
use serde::Serialize;

const CHECKPOINT_FILE: &str = "model.mmgc";

#[derive(Parser)]
#[command(name = "mmg", version, about = "Multimodal generalization experiments")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads for evaluation (0 = all cores); never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML spec.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one (setting, task) pipeline.
    Run {
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        /// TOML run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot evaluation of a checkpoint on novel classes.
    EvalFewshot {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_parser = parse_mask)]
        support_mask: ModalityMask,
        #[arg(long, value_parser = parse_mask)]
        query_mask: ModalityMask,
        /// Task whose mask contract applies; defaults to the checkpoint's task.
        #[arg(long)]
        task: Option<Task>,
        /// Episode seed; defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-1 accuracy of a checkpoint on the base test split.
    EvalSupervised {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_parser = parse_mask)]
        test_mask: ModalityMask,
    },
    /// Merge every results.json under a directory into one report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    setting: Setting,
    task: Task,
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    row: EvalRow,
}

fn parse_mask(s: &str) -> Result<ModalityMask, String> {
    let mask = ModalityMask::parse_list(s).map_err(|e| e.to_string())?;
    if mask.is_empty() {
        return Err("mask must name at least one modality".into());
    }
    Ok(mask)
}

fn load(path: &Path) -> mmg_core::Result<Dataset> {
    load_dataset(path)?.materialize()
}

fn open(source: &Source) -> mmg_core::Result<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(&source.checkpoint)?;
    let dir = match (&source.data, &ck.header.data_dir) {
        (Some(d), _) | (None, Some(d)) => d.clone(),
        (None, None) => {
            return Err(Error::Invalid(
                "checkpoint records no dataset; pass --data".into(),
            ))
        }
    };
    let ds = load(&dir)?;
    Ok((ck, ds))
}

fn print_json(value: &impl Serialize) -> mmg_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> mmg_core::Result<()> {
    match command {
        Command::GenSynth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::Data(format!("{}: {e}", spec.display())))?;
            let spec: DatasetSpec = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let ds = generate_synthetic(&spec, &out)?;
            log::info!("wrote {} examples to {}", ds.examples.len(), out.display());
        }
        Command::Run {
            setting,
            task,
            data,
            config,
            seed,
            out,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.validate()?;
            let ds = load(&data)?;
            let (record, model) = run_pipeline(setting, task, &ds, &cfg, seed)?;
            report(std::slice::from_ref(&record), &out)?;
            let data_dir = std::path::absolute(&data).unwrap_or(data);
            Checkpoint::new(model, cfg, setting, task, seed, Some(data_dir))
                .save(&out.join(CHECKPOINT_FILE))?;
            for row in &record.rows {
                println!(
                    "{setting} {task} {} -> {}: {:.4} ± {:.4}",
                    row.train_mask, row.test_mask, row.value, row.ci
                );
            }
        }
        Command::EvalFewshot {
            source,
            episodes,
            support_mask,
            query_mask,
            task,
            seed,
        } => {
            let (ck, ds) = open(&source)?;
            let h = &ck.header;
            let task = task.unwrap_or(h.task);
            if !task.allows(support_mask, query_mask) {
                return Err(Error::Invalid(format!(
                    "support {support_mask} / query {query_mask} is not a legal {task} pair"
                )));
            }
            let mut eval = h.run_config.eval;
            if let Some(n) = episodes {
                eval.episodes = n;
            }
            let seed = seed.unwrap_or(h.seed);
            let r = fewshot_eval(&ck.model, &ds, &eval, support_mask, query_mask, seed)?;
            print_json(&EvalOutput {
                setting: h.setting,
                task,
                config_hash: &h.config_hash,
                seed,
                row: EvalRow {
                    train_mask: support_mask,
                    test_mask: query_mask,
                    metric: TOP1.into(),
                    value: r.mean,
                    ci: r.ci95,
                    n: r.episodes,
                },
            })?;
        }
        Command::EvalSupervised { source, test_mask } => {
            let (ck, ds) = open(&source)?;
            let h = &ck.header;
            let r = supervised_eval(&ck.model, &ds, Split::BaseTest, test_mask)?;
            print_json(&EvalOutput {
                setting: h.setting,
                task: h.task,
                config_hash: &h.config_hash,
                seed: h.seed,
                row: EvalRow {
                    train_mask: ModalityMask::ALL,
                    test_mask,
                    metric: TOP1.into(),
                    value: r.accuracy,
                    ci: r.ci95,
                    n: r.n,
                },
            })?;
        }
        Command::Report { input, out } => {
            let records = collect_records(&input)?;
            report(&records, &out)?;
            log::info!("merged {} records into {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => 3,
        Error::Config(_) | Error::Invalid(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
