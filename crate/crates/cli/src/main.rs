//! `coseg` command-line driver.

mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coseg_core::eval::{cross_validate, evaluate, plan_folds, FoldReport};
use coseg_core::io::{load_studies, save_study};
use coseg_core::network::{ModelConfig, ModelGraph};
use coseg_core::phantom::{generate_cohort, PhantomSpec};
use coseg_core::preprocess::{preprocess_study, PreprocessPlan};
use coseg_core::train::{load_checkpoint, save_checkpoint, train_with_observer, TrainConfig};
use coseg_core::volume::Study;
use serde::de::DeserializeOwned;

use error::CliError;
use manifest::{config_hash, RunManifest};

const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "coseg", version, about = "Multimodal tumor co-segmentation toolkit")]
struct Cli {
    /// Where to write the run manifest (defaults to a location beside the outputs).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resample, crop and normalize every study under a directory.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic phantom studies.
    Phantom {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one cross-validation fold and evaluate it on its test patients.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every study under a directory.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; both `.csv` and `.json` files are written with this stem.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Print the trainable parameter count of a model config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run k-fold cross-validation and write per-fold and pooled reports.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "crossval")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
}

fn read_config(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(format!("config {} not found", path.display()))
        } else {
            CliError::Other(format!("{}: {e}", path.display()))
        }
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse<T: DeserializeOwned>(value: &serde_json::Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(value.clone()).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

fn beside(path: &Path) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(MANIFEST_NAME)
}

fn write_report(report: &FoldReport, stem: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let csv = stem.with_extension("csv");
    let json = stem.with_extension("json");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    }
    report.write_csv(&csv)?;
    report.write_json(&json)?;
    manifest.artifacts.push(csv);
    manifest.artifacts.push(json);
    Ok(())
}

fn print_summary(report: &FoldReport) {
    for (t, s) in &report.summary {
        let assd = match (s.assd_mean, s.assd_std) {
            (Some(m), Some(d)) => format!("{m:.2} ± {d:.2} mm"),
            _ => "n/a".into(),
        };
        eprintln!(
            "{t}: DSC {:.1} ± {:.1} %, ASSD {assd} ({} of {} missing)",
            s.dsc_mean, s.dsc_std, s.assd_missing, s.patients
        );
    }
}

fn progress(fold: Option<usize>) -> impl FnMut(&coseg_core::train::EpochRecord) {
    move |r| {
        let prefix = fold.map(|f| format!("fold {f} ")).unwrap_or_default();
        eprintln!(
            "{prefix}epoch {} train {:.4} val {:.4} lr {:.2e}{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            if r.lr_halved { " (halved)" } else { "" }
        );
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Preprocess { data, plan, out } => {
            let mut manifest = RunManifest::start("preprocess");
            let plan: PreprocessPlan = match &plan {
                Some(p) => {
                    let v = read_config(p)?;
                    manifest.config_hash = Some(config_hash(&v));
                    parse(&v, "preprocess plan")?
                }
                None => PreprocessPlan::default(),
            };
            if let Some(r) = &plan.resample {
                r.validate()?;
            }
            for s in load_studies(&data)? {
                let p = preprocess_study(&s, &plan)?;
                let dir = out.join(&p.patient_id);
                save_study(&p, &dir)?;
                manifest.artifacts.push(dir);
            }
            manifest.finish(&cli.manifest.unwrap_or_else(|| out.join(MANIFEST_NAME)))
        }
        Command::Phantom { spec, n, out } => {
            let mut manifest = RunManifest::start("phantom");
            let spec: PhantomSpec = match &spec {
                Some(p) => {
                    let v = read_config(p)?;
                    manifest.config_hash = Some(config_hash(&v));
                    parse(&v, "phantom spec")?
                }
                None => PhantomSpec::default(),
            };
            manifest.seeds.insert("phantom".into(), spec.seed);
            for s in generate_cohort(&spec, n)? {
                let dir = out.join(&s.patient_id);
                save_study(&s, &dir)?;
                manifest.artifacts.push(dir);
            }
            println!("{n}");
            manifest.finish(&cli.manifest.unwrap_or_else(|| out.join(MANIFEST_NAME)))
        }
        Command::CountParams { config } => {
            let mut manifest = RunManifest::start("count-params");
            let v = read_config(&config)?;
            manifest.config_hash = Some(config_hash(&v));
            let model_json = v.get("model").unwrap_or(&v);
            let cfg = ModelConfig::from_json(model_json)?;
            let model = ModelGraph::<f32>::build(&cfg)?;
            println!("{}", model.count_parameters());
            manifest.finish(&cli.manifest.unwrap_or_else(|| beside(&config)))
        }
        Command::Train {
            config,
            fold,
            folds,
            data,
            out,
        } => {
            let mut manifest = RunManifest::start("train");
            let v = read_config(&config)?;
            manifest.config_hash = Some(config_hash(&v));
            let cfg = TrainConfig::from_json(&v)?;
            manifest.seeds.insert("train".into(), cfg.seed);
            let studies = load_studies(&data)?;
            let ids: Vec<String> = studies.iter().map(|s| s.patient_id.clone()).collect();
            let plans = plan_folds(&ids, folds, cfg.seed)?;
            let plan = plans
                .get(fold)
                .ok_or_else(|| CliError::Config(format!("fold {fold} out of range for {folds} folds")))?;
            let pick = |ids: &[String]| -> Vec<Study> {
                ids.iter()
                    .filter_map(|id| studies.iter().find(|s| &s.patient_id == id).cloned())
                    .collect()
            };
            let outcome = train_with_observer(&cfg, &pick(&plan.train), &pick(&plan.validation), &mut progress(None))?;
            save_checkpoint(&outcome.model, cfg.seed, cfg.sampler.size, &out)?;
            manifest.artifacts.push(out.join("weights.f32"));
            manifest.artifacts.push(out.join("checkpoint.json"));
            let history = out.join("history.json");
            coseg_core::io::write_json(&history, &outcome.history)?;
            manifest.artifacts.push(history);
            let report = evaluate(&outcome.model, &pick(&plan.test), cfg.sampler.size, 0.5, Some(fold))?;
            write_report(&report, &out.join("report"), &mut manifest)?;
            print_summary(&report);
            manifest.finish(&cli.manifest.unwrap_or_else(|| out.join(MANIFEST_NAME)))
        }
        Command::Evaluate {
            weights,
            data,
            out,
            overlap,
        } => {
            let mut manifest = RunManifest::start("evaluate");
            let (model, ckpt) = load_checkpoint(&weights)?;
            manifest.seeds.insert("train".into(), ckpt.seed);
            manifest.config_hash = serde_json::to_value(&ckpt.model).ok().map(|v| config_hash(&v));
            let studies = load_studies(&data)?;
            let report = evaluate(&model, &studies, ckpt.patch_size, overlap, None)?;
            write_report(&report, &out, &mut manifest)?;
            print_summary(&report);
            manifest.finish(&cli.manifest.unwrap_or_else(|| beside(&out)))
        }
        Command::Crossval {
            config,
            data,
            out,
            folds,
            overlap,
        } => {
            let mut manifest = RunManifest::start("crossval");
            let v = read_config(&config)?;
            manifest.config_hash = Some(config_hash(&v));
            let cfg = TrainConfig::from_json(&v)?;
            manifest.seeds.insert("train".into(), cfg.seed);
            let studies = load_studies(&data)?;
            let reports = cross_validate(&cfg, &studies, folds, overlap, &mut |f, r| progress(Some(f))(r))?;
            for r in &reports {
                let id = r.fold_id.unwrap_or_default();
                write_report(r, &out.join(format!("fold_{id}")).join("report"), &mut manifest)?;
            }
            let pooled = FoldReport::pooled(&reports);
            write_report(&pooled, &out.join("report"), &mut manifest)?;
            print_summary(&pooled);
            manifest.finish(&cli.manifest.unwrap_or_else(|| out.join(MANIFEST_NAME)))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
