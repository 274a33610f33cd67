//! `eeg-ssm`: synthetic data, preprocessing, pretraining, fine-tuning,
//! evaluation and interpretation from one binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use eeg_ssm::ingest::{self, Manifest, Split};
use eeg_ssm::interpret;
use eeg_ssm::train::{self, RunConfig, RunReport, Task};
use eeg_ssm::Error;

const SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Debug, Parser)]
#[command(
    name = "eeg-ssm",
    version,
    about = "EEG encoder-decoder with selective state-space blocks",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.\n\
                  EEG_SSM_THREADS caps the number of worker threads.\n\
                  The --config file is JSON with optional sections synth, model, pretrain and finetune;\n\
                  `eeg-ssm --print-schema` prints its JSON schema."
)]
struct Cli {
    /// JSON run configuration; omitted fields keep the desk-scale defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for every artifact of the run.
    #[arg(long, global = true, value_name = "DIR", default_value = "eeg-ssm-out")]
    out: PathBuf,
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the configuration schema and exit.
    #[arg(long, exclusive = true)]
    print_schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Write synthetic EDF recordings, annotations and a manifest.
    Synth(SynthArgs),
    /// Filter, resample and window every recording of a manifest.
    Preprocess(PreprocessArgs),
    /// Reconstruction pretraining.
    Pretrain(PretrainArgs),
    /// Seizure-detection fine-tuning.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Channel saliency of the detection output for one window.
    Saliency(SaliencyArgs),
    /// Frequency responses of the learned front-end filters.
    Filters(FiltersArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// Training patients.
    #[arg(long)]
    patients: Option<usize>,
    /// Held-out test patients.
    #[arg(long)]
    test_patients: Option<usize>,
    /// Length of each recording in seconds (multiple of 10).
    #[arg(long)]
    seconds: Option<u32>,
}

#[derive(Debug, Args, Serialize)]
struct PreprocessArgs {
    /// Manifest listing raw recordings and annotations.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainOverrides {
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct PretrainArgs {
    /// Manifest with window caches.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    /// Weight of the spectral reconstruction term.
    #[arg(long)]
    lambda_spectral: Option<f64>,
    /// Also pretrain without the spectral term and write a comparison.
    #[arg(long)]
    ablate_spectral: bool,
}

#[derive(Debug, Args, Serialize)]
struct FinetuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pretrained checkpoint to start from.
    #[arg(long, required_unless_present = "from_scratch")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
    /// Start from a fresh initialization.
    #[arg(long, conflicts_with = "compare_scratch")]
    from_scratch: bool,
    /// Train only the detection head.
    #[arg(long)]
    freeze_encoder: bool,
    /// Fine-tune from the checkpoint and from scratch and write a comparison.
    #[arg(long, requires = "checkpoint")]
    compare_scratch: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Detection,
    Reconstruction,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "detection")]
    task: TaskArg,
}

#[derive(Debug, Args, Serialize)]
struct SaliencyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Fine-tuned checkpoint with a detection head.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Window index within the split; defaults to the first seizure window.
    #[arg(long)]
    window: Option<usize>,
    /// Also write the per-sample saliency as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args, Serialize)]
struct FiltersArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Written to `<out>/effective_config.json`.
#[derive(Serialize)]
struct Effective<'a> {
    command: &'a Command,
    seed: Option<u64>,
    config: &'a RunConfig,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    ingest::write_atomic(path, text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn apply(cfg: &mut train::TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
}

fn summary_line(r: &RunReport) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let test = r.test.as_ref();
    format!(
        "steps {} (best {}), test loss {}, test mse {}, test auroc {}",
        r.steps_run,
        r.best_step,
        fmt(test.map(|t| t.loss_total)),
        fmt(test.and_then(|t| t.loss_mse)),
        fmt(test.and_then(|t| t.auroc)),
    )
}

fn run(cli: Cli) -> Result<(), Error> {
    let Some(command) = cli.command.as_ref() else {
        return Err(Error::config("no subcommand given; see --help"));
    };
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match command {
        Command::Synth(a) => {
            if let Some(v) = a.patients {
                cfg.synth.train_patients = v;
            }
            if let Some(v) = a.test_patients {
                cfg.synth.test_patients = v;
            }
            if let Some(v) = a.seconds {
                cfg.synth.record_seconds = v;
            }
        }
        Command::Pretrain(a) => {
            apply(&mut cfg.pretrain, &a.train);
            if let Some(v) = a.lambda_spectral {
                cfg.pretrain.lambda_spectral = v;
            }
        }
        Command::Finetune(a) => {
            apply(&mut cfg.finetune, &a.train);
            cfg.finetune.from_scratch |= a.from_scratch;
            cfg.finetune.freeze_encoder |= a.freeze_encoder;
        }
        _ => {}
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let effective = Effective {
        command,
        seed: cli.seed,
        config: &cfg,
    };
    write(
        &out.join("effective_config.json"),
        &serde_json::to_string_pretty(&effective).expect("config serializes"),
    )?;

    match command {
        Command::Synth(_) => {
            let m = ingest::synth::generate(out, &cfg.synth)?;
            log::info!("wrote {} recordings and {}", m.records.len(), out.join("manifest.json").display());
        }
        Command::Preprocess(a) => {
            let m = Manifest::load(&a.manifest)?;
            let cached = ingest::preprocess_manifest(&m, &out.join("cache"))?;
            cached.save(&out.join("manifest.json"))?;
            log::info!("cached {} recordings; manifest {}", cached.records.len(), out.join("manifest.json").display());
        }
        Command::Pretrain(a) => {
            let m = Manifest::load(&a.manifest)?;
            if a.ablate_spectral {
                let (cmp, _, _) = train::spectral_ablation(&m, &cfg.model, &cfg.pretrain, out)?;
                println!("{}", cmp.table());
            } else {
                let (report, _) = train::pretrain(&m, &cfg.model, &cfg.pretrain, Some(out))?;
                println!("{}", summary_line(&report));
            }
        }
        Command::Finetune(a) => {
            let m = Manifest::load(&a.manifest)?;
            if a.compare_scratch {
                let ckpt = a.checkpoint.as_deref().expect("clap requires --checkpoint");
                let (cmp, _, _) = train::pretrained_vs_scratch(&m, ckpt, &cfg.model, &cfg.finetune, out)?;
                println!("{}", cmp.table());
            } else {
                let (report, _) = train::finetune(&m, a.checkpoint.as_deref(), &cfg.model, &cfg.finetune, Some(out))?;
                println!("{}", summary_line(&report));
            }
        }
        Command::Eval(a) => {
            let m = Manifest::load(&a.manifest)?;
            let task = match a.task {
                TaskArg::Detection => Task::Detection,
                TaskArg::Reconstruction => Task::Reconstruction,
            };
            let report = train::evaluate(&m, &a.checkpoint, a.split.into(), task, &cfg.finetune)?;
            write(&out.join("report.json"), &report.to_json())?;
            let s = report.train.as_ref().or(report.test.as_ref()).expect("one split evaluated");
            println!("{}", serde_json::to_string(s).expect("summary serializes"));
        }
        Command::Saliency(a) => {
            let m = Manifest::load(&a.manifest)?;
            let windows: Vec<_> = m.load_windows(a.split.into())?.into_values().flatten().collect();
            if windows.is_empty() {
                return Err(Error::data("the selected split has no windows"));
            }
            let index = match a.window {
                Some(i) if i < windows.len() => i,
                Some(i) => {
                    return Err(Error::config(format!("--window {i} out of range (split has {} windows)", windows.len())))
                }
                None => windows.iter().position(|w| w.label == 1).unwrap_or(0),
            };
            let map = interpret::saliency_from_checkpoint(&windows[index..=index], &a.checkpoint)?.remove(0);
            let csv = out.join("saliency.csv");
            interpret::export_saliency(&map, &out.join("saliency.json"), a.csv.then_some(csv.as_path()))?;
            println!("window {} p(seizure) {:.4}", map.window_id, map.probability);
            for (name, v) in ingest::CHANNELS.iter().zip(&map.importance) {
                println!("{name:>4} {v:.3}");
            }
        }
        Command::Filters(a) => {
            let spectra = interpret::spectra_from_checkpoint(&a.checkpoint)?;
            write(
                &out.join("filters.json"),
                &serde_json::to_string_pretty(&spectra).expect("spectra serialize"),
            )?;
            for s in &spectra {
                println!("filter {} peak {:.2} Hz", s.filter, s.peak_hz);
            }
        }
    }
    Ok(())
}

/// Applies `EEG_SSM_THREADS` to the global worker pool.
fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("EEG_SSM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("EEG_SSM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.print_schema {
        print!("{SCHEMA}");
        return ExitCode::SUCCESS;
    }
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
