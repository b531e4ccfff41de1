use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgmm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cgmm::config::{RunConfig, SEED_ENV};
use cgmm::data::{generate_dataset, load_dataset, Dataset};
use cgmm::error::ErrorClass;
use cgmm::gradcheck::GradCheckOptions;
use cgmm::gradsuite;
use cgmm::metrics::{write_csv, MetricsReport};
use cgmm::model::ModelConfig;
use cgmm::train::{self, ablate, evaluate, pretrain, write_ablation_csv, write_loss_csv, EpochRecord, Strategy};
use cgmm::{Error, Result};

#[derive(Parser)]
#[command(name = "cgmm", version, about = "Text box classification for video frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed (and CGMM_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Contrastive pre-training of the encoders and fusion module.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the configured variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Starting point; required for the finetune strategy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the configured splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score every variant of the ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// autodiff, encoders, fusion, correlationnet, contrastive, model or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failed gradient checks share the numeric failure code.
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Io => 1,
        ErrorClass::Validation => 2,
        ErrorClass::Divergence => EXIT_NUMERIC,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads, resolves and echoes the run configuration into `out`.
fn prepare(common: &Common, dataset: Option<&Dataset>) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let mut cfg = cfg.resolve(common.seed, env.as_deref())?;
    if let Some(d) = dataset {
        // The data on disk is authoritative for its own parameters.
        cfg.dataset = d.manifest.config.clone();
    }
    create_dir(&common.out)?;
    let path = common.out.join("config.json");
    fs::write(&path, cfg.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(cfg)
}

fn load_data(dir: &Path, cfg: Option<&Path>) -> Result<Dataset> {
    // The execution mode is only known after reading the config; loading is
    // order-preserving either way.
    let exec = match cfg {
        Some(p) => RunConfig::load(p)?.execution,
        None => Default::default(),
    };
    load_dataset(dir, exec)
}

fn write_epochs(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss", "split", "precision", "recall", "f1"])?;
    for e in epochs {
        let (p, r, f) = match &e.standard {
            Some(m) => (m.summary.precision.to_string(), m.summary.recall.to_string(), m.summary.f1.to_string()),
            None => Default::default(),
        };
        w.write_record([e.epoch.to_string(), e.mean_loss.to_string(), "standard".into(), p, r, f])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn report_epochs(epochs: &[EpochRecord]) {
    for e in epochs {
        match &e.standard {
            Some(m) => eprintln!("epoch {:>3}  loss {:.4}  standard f1 {:.4}", e.epoch, e.mean_loss, m.f1()),
            None => eprintln!("epoch {:>3}  loss {:.4}", e.epoch, e.mean_loss),
        }
    }
}

fn check_arch(ck: &Checkpoint, cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let expected = ModelConfig::for_dataset(&cfg.model, &dataset.manifest.config);
    if ck.model.config != expected {
        return Err(Error::Config(
            "checkpoint model configuration differs from the run configuration and dataset".into(),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = prepare(&common, None)?;
            let manifest = generate_dataset(&cfg.dataset, cfg.seed, &common.out, cfg.execution)?;
            println!(
                "wrote {} train, {} standard, {} generalization frames to {}",
                manifest.train.frames,
                manifest.standard.frames,
                manifest.generalization.frames,
                common.out.display()
            );
        }
        Command::Pretrain { common, data } => {
            let dataset = load_data(&data, common.config.as_deref())?;
            let cfg = prepare(&common, Some(&dataset))?;
            let out = pretrain(&dataset, &cfg.model, &cfg.train, cfg.train.pretrain_epochs, cfg.seed, cfg.execution)?;
            report_epochs(&out.epochs);
            write_loss_csv(&common.out.join("loss.csv"), &out.steps)?;
            save_checkpoint(
                &common.out.join("checkpoint"),
                &Checkpoint {
                    model: out.model,
                    optimizer: Some(out.optimizer),
                    seed: cfg.seed,
                },
            )?;
        }
        Command::Train {
            common,
            data,
            checkpoint,
        } => {
            let dataset = load_data(&data, common.config.as_deref())?;
            let cfg = prepare(&common, Some(&dataset))?;
            let init = match &checkpoint {
                Some(dir) => {
                    let ck = load_checkpoint(dir)?;
                    check_arch(&ck, &cfg, &dataset)?;
                    Some(ck.model)
                }
                None if cfg.ablation.effective_strategy() == Strategy::Finetune => {
                    return Err(Error::Config(
                        "the finetune strategy needs --checkpoint from a pretrain run".into(),
                    ));
                }
                None => None,
            };
            let out = train::train(&dataset, &cfg.ablation, &cfg.model, &cfg.train, cfg.seed, init, cfg.execution)?;
            report_epochs(&out.epochs);
            write_loss_csv(&common.out.join("loss.csv"), &out.steps)?;
            write_epochs(&common.out.join("epochs.csv"), &out.epochs)?;
            save_checkpoint(
                &common.out.join("checkpoint"),
                &Checkpoint {
                    model: out.model,
                    optimizer: Some(out.optimizer),
                    seed: cfg.seed,
                },
            )?;
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let dataset = load_data(&data, common.config.as_deref())?;
            let cfg = prepare(&common, Some(&dataset))?;
            let ck = load_checkpoint(&checkpoint)?;
            let run_id = format!("{}-seed{}", cfg.ablation.name, ck.seed);
            for &split in &cfg.splits {
                let report: MetricsReport =
                    evaluate(&ck.model, &dataset, split, &cfg.ablation.mask(), cfg.metrics, cfg.execution)?;
                println!("{:<15} f1 {:.4}", split.as_str(), report.f1());
                let path = common.out.join(format!("metrics_{}.csv", split.as_str()));
                write_csv(&path, &[(run_id.clone(), cfg.ablation.name.clone(), report)])?;
            }
        }
        Command::Ablate { common, data } => {
            let dataset = load_data(&data, common.config.as_deref())?;
            let cfg = prepare(&common, Some(&dataset))?;
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                rows.extend(ablate(&dataset, &cfg.grid, &cfg.model, &cfg.train, cfg.metrics, seed, cfg.execution)?);
            }
            write_ablation_csv(&common.out.join("ablation.csv"), &rows)?;
            for row in &rows {
                match (&row.result, row.mean_f1()) {
                    (Ok(_), Some(f1)) => println!("{:<24} mean f1 {:.4}", row.run_id(), f1),
                    (Err(msg), _) => println!("{:<24} failed: {msg}", row.run_id()),
                    _ => {}
                }
            }
        }
        Command::Gradcheck {
            module,
            trials,
            tol,
            step,
            seed,
        } => {
            let opts = GradCheckOptions {
                h: step,
                tol,
                max_coords: None,
            };
            let results = gradsuite::run(&module, trials, opts, seed, Default::default())?;
            println!("{:<15} {:<20} {:>6} {:>8} {:>7} {:>12}  result", "module", "op", "trials", "checked", "skipped", "max_rel_err");
            for r in &results {
                println!(
                    "{:<15} {:<20} {:>6} {:>8} {:>7} {:>12.3e}  {}",
                    r.module,
                    r.case,
                    r.trials,
                    r.checked,
                    r.skipped_nonsmooth,
                    r.max_rel_error,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                if let Some(f) = &r.first_failure {
                    println!("    {f}");
                }
            }
            if results.iter().any(|r| !r.passed()) {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
