use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dassl::bag_store::{load_manifest, read_bag, CohortManifest, PatchClass};
use dassl::eval::{cross_validate, evaluate_predictions, format_table, kfold_split, FoldSplit, MetricsReport, SlidePrediction};
use dassl::synth::{gen_cohort, oracle_auc};
use dassl::trainer::{predict, prepare_manifest, resume, train, Checkpoint, PreparedSlide, RunOutput};
use dassl::{Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "dassl", version, about = "Self-supervised feature adapters for attention-MIL on patch-feature bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (bags + manifest.csv) into --out-dir.
    Synth(RunArgs),
    /// Train one model on every slide of the manifest.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a trained checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to evaluate; defaults to data.manifest.
        #[arg(long)]
        test_manifest: Option<PathBuf>,
    },
    /// K-fold cross-validation over the manifest's patients.
    Cv {
        #[command(flatten)]
        run: RunArgs,
        /// Also train on the full manifest and score this held-out cohort.
        #[arg(long)]
        test_manifest: Option<PathBuf>,
    },
    /// Summarise one bag file.
    Inspect {
        bag: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied in order after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    /// Creates the output directory and records the resolved config in it.
    fn prepare(&self) -> Result<ExperimentConfig> {
        let cfg = self.resolve()?;
        create_dir(&self.out_dir)?;
        write_text(&self.out_dir.join("config.toml"), &cfg.to_toml()?)?;
        eprintln!(
            "config {} (seed {}) -> {}",
            cfg.hash(),
            cfg.train.seed,
            self.out_dir.join("config.toml").display()
        );
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    write_text(path, &(text + "\n"))
}

fn manifest_of(cfg: &ExperimentConfig) -> Result<CohortManifest> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    load_manifest(path)
}

fn slides_of(cfg: &ExperimentConfig, manifest: &CohortManifest) -> Result<Vec<PreparedSlide>> {
    prepare_manifest(manifest, cfg.data.filter_tumor)
}

fn score(model: &dassl::trainer::Model, slides: &[PreparedSlide], cfg: &ExperimentConfig) -> Result<Vec<SlidePrediction>> {
    let probs = predict(model, slides, cfg)?;
    Ok(slides
        .iter()
        .zip(probs)
        .map(|(s, p)| SlidePrediction {
            fold: 0,
            slide_id: s.slide_id().to_string(),
            patient_id: s.patient_id().to_string(),
            target: s.target(),
            probability: p,
        })
        .collect())
}

/// Writes `<stem>.json` and `<stem>.csv` for a single evaluated cohort.
fn write_holdout(out_dir: &Path, stem: &str, preds: &[SlidePrediction]) -> Result<(MetricsReport, MetricsReport)> {
    let (slide, patient) = evaluate_predictions(preds)?;
    let slide = MetricsReport::from_folds(vec![slide]);
    let patient = MetricsReport::from_folds(vec![patient]);
    write_json(
        &out_dir.join(format!("{stem}.json")),
        &json!({ "slide": slide, "patient": patient, "predictions": preds }),
    )?;
    write_text(&out_dir.join(format!("{stem}.csv")), &slide.to_csv())?;
    Ok((slide, patient))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = args.prepare()?;
            let manifest = gen_cohort(&cfg.synthgen, &args.out_dir)?;
            let positives = manifest.patient_targets().values().filter(|&&t| t == 1).count();
            println!(
                "wrote {} slides from {} patients ({positives} positive) to {}",
                manifest.len(),
                manifest.patient_targets().len(),
                args.out_dir.display()
            );
            println!("oracle slide AUC {:.4}", oracle_auc(&cfg.synthgen)?);
        }
        Command::Train { run: args, checkpoint } => {
            let cfg = args.prepare()?;
            let slides = slides_of(&cfg, &manifest_of(&cfg)?)?;
            let out = RunOutput {
                log_path: Some(args.out_dir.join("train_log.jsonl")),
                checkpoint_dir: Some(args.out_dir.join("checkpoints")),
            };
            let result = match checkpoint {
                Some(p) => resume(Checkpoint::load(&p)?, &slides, &cfg, &out)?,
                None => train(&slides, &cfg, &out)?,
            };
            println!(
                "trained {} passes on {} slides; checkpoint {}",
                result.state.passes_done,
                slides.len(),
                args.out_dir.join("checkpoints/final.json").display()
            );
        }
        Command::Eval {
            run: args,
            checkpoint,
            test_manifest,
        } => {
            let cfg = args.prepare()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            if ckpt.config_hash != cfg.hash() {
                eprintln!("note: checkpoint was trained under a different config ({})", ckpt.config_hash);
            }
            let manifest = match &test_manifest {
                Some(p) => load_manifest(p)?,
                None => manifest_of(&cfg)?,
            };
            let preds = score(&ckpt.state.model, &slides_of(&cfg, &manifest)?, &cfg)?;
            let (slide, patient) = write_holdout(&args.out_dir, "metrics", &preds)?;
            print!("{}", format_table(&[("slide", &slide), ("patient", &patient)]));
        }
        Command::Cv {
            run: args,
            test_manifest,
        } => {
            let cfg = args.prepare()?;
            let manifest = manifest_of(&cfg)?;
            let split = match FoldSplit::from_manifest(&manifest)? {
                Some(s) => s,
                None => kfold_split(&manifest, cfg.eval.k, cfg.eval.seed)?,
            };
            let slides = slides_of(&cfg, &manifest)?;
            let report = cross_validate(&slides, &split, &cfg, Some(&args.out_dir))?;
            write_json(&args.out_dir.join("metrics.json"), &serde_json::to_value(&report).expect("report serializes"))?;
            write_text(&args.out_dir.join("metrics.csv"), &report.slide.to_csv())?;
            write_text(&args.out_dir.join("metrics_patient.csv"), &report.patient.to_csv())?;
            print!("{}", format_table(&[("slide", &report.slide), ("patient", &report.patient)]));

            if let Some(p) = test_manifest {
                let full_dir = args.out_dir.join("full");
                create_dir(&full_dir)?;
                let out = RunOutput {
                    log_path: Some(full_dir.join("train_log.jsonl")),
                    checkpoint_dir: Some(full_dir.join("checkpoints")),
                };
                let result = train(&slides, &cfg, &out)?;
                let preds = score(&result.state.model, &slides_of(&cfg, &load_manifest(&p)?)?, &cfg)?;
                let (slide, patient) = write_holdout(&args.out_dir, "test_metrics", &preds)?;
                println!();
                print!("{}", format_table(&[("test slide", &slide), ("test patient", &patient)]));
            }
        }
        Command::Inspect { bag, json } => {
            let loaded = read_bag(&bag)?;
            let b = &loaded.bag;
            let counts = b.class_counts();
            let count = |c: PatchClass| counts.get(&c).copied().unwrap_or(0);
            let column = |j: usize| {
                let col = b.coords().column(j);
                let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                [lo, hi]
            };
            let summary = json!({
                "path": bag,
                "n": b.n_instances(),
                "d": b.dim(),
                "removed_nonfinite_rows": loaded.removed_rows,
                "patch_class": {
                    "tumor": count(PatchClass::Tumor),
                    "normal": count(PatchClass::Normal),
                    "artifact": count(PatchClass::Artifact),
                },
                "coords": { "x": column(0), "y": column(1) },
            });
            if json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("json value serializes"));
            } else {
                let [x0, x1] = column(0);
                let [y0, y1] = column(1);
                println!("{}", bag.display());
                println!("  N = {}, d = {}", b.n_instances(), b.dim());
                println!(
                    "  tumor {}  normal {}  artifact {}",
                    count(PatchClass::Tumor),
                    count(PatchClass::Normal),
                    count(PatchClass::Artifact)
                );
                println!("  x in [{x0}, {x1}], y in [{y0}, {y1}]");
                if loaded.removed_rows > 0 {
                    println!("  {} rows dropped for non-finite features", loaded.removed_rows);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
