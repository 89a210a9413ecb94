//! Command-line front end for the segmentation pipeline.
//!
//! Every command reads one JSON run configuration (`--config`, defaults
//! apply when omitted) and writes exclusively under the configured output
//! directory, which the `UCF_OUTPUT_DIR` environment variable overrides.
//! Exit codes: 0 on success, 2 for configuration errors (unknown keys,
//! invalid values, missing sections), 1 for runtime failures.

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ucfnet::config::{DataSource, RunConfig};
use ucfnet::data::checkpoint::{load_checkpoint, LoadedCheckpoint};
use ucfnet::data::synth::{synth_generate, SynthConfig};
use ucfnet::data::{
    load_dataset, pad_to_multiple, read_png_gray, split, write_png_gray, SampleRecord,
};
use ucfnet::eval::{evaluate_dataset, predict_dataset};
use ucfnet::metrics::write_curves_csv;
use ucfnet::model::UcfConfig;
use ucfnet::tensor::ElemWidth;
use ucfnet::train::{train_model, TrainPlan};
use ucfnet::verify::gradcheck_suite;
use ucfnet::{Error, Result, Scalar, Tensor4};

#[derive(Parser)]
#[command(
    name = "ucfnet",
    version,
    about = "Infrared small object segmentation: synthesize data, train, evaluate"
)]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and write its manifest.
    Synth {
        /// Destination directory (default: <output_dir>/dataset).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train on the configured data source; checkpoints and the epoch log
    /// land in the output directory.
    Train,
    /// Evaluate a checkpoint: metric report, threshold-sweep curves, and
    /// predicted masks.
    Eval {
        /// Checkpoint base path (the path without .manifest.json / .bin).
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Evaluate this dataset directory instead of the held-out split.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Run one image through a checkpoint and write mask + probabilities.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
        /// Output mask path; probabilities go next to it as .prob.png.
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
    },
    /// Verify every operation's gradients against finite differences
    /// (always 64-bit, whatever the configured precision).
    Gradcheck,
    /// Train the four model variants (plain, CDC only, FFC only, full)
    /// on shared data and seeds; report median held-out IoU per row.
    Ablate,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out_dir = match std::env::var_os("UCF_OUTPUT_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => cfg.run.output_dir.clone(),
    };

    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, &out_dir, out.as_deref()),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Train => match cfg.run.precision {
            ElemWidth::F32 => cmd_train::<f32>(&cfg, &out_dir),
            ElemWidth::F64 => cmd_train::<f64>(&cfg, &out_dir),
        },
        Command::Eval { checkpoint, data } => match cfg.run.precision {
            ElemWidth::F32 => cmd_eval::<f32>(&cfg, &out_dir, &checkpoint, data.as_deref()),
            ElemWidth::F64 => cmd_eval::<f64>(&cfg, &out_dir, &checkpoint, data.as_deref()),
        },
        Command::Predict {
            checkpoint,
            image,
            out,
        } => match cfg.run.precision {
            ElemWidth::F32 => cmd_predict::<f32>(&checkpoint, &image, &out),
            ElemWidth::F64 => cmd_predict::<f64>(&checkpoint, &image, &out),
        },
        Command::Ablate => match cfg.run.precision {
            ElemWidth::F32 => cmd_ablate::<f32>(&cfg, &out_dir),
            ElemWidth::F64 => cmd_ablate::<f64>(&cfg, &out_dir),
        },
    }
}

/// Generates the dataset plus `manifest.json` and `checksum.txt`. The
/// checksum hashes every PNG (name then bytes, in generation order), so
/// identical configs produce identical checksum files.
fn generate_synth_dataset(cfg: &SynthConfig, dest: &Path) -> Result<(usize, String)> {
    let targets = synth_generate(cfg, dest)?;
    let mut hasher = Sha256::new();
    let mut files = Vec::with_capacity(2 * targets.len());
    for sub in ["images", "masks"] {
        for i in 0..targets.len() {
            let rel = format!("{sub}/synth_{i:04}.png");
            hasher.update(rel.as_bytes());
            hasher.update(&std::fs::read(dest.join(&rel))?);
            files.push(rel);
        }
    }
    let checksum: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let manifest = serde_json::json!({
        "count": cfg.count,
        "size": [cfg.size.0, cfg.size.1],
        "seed": cfg.seed,
        "targets_per_image": targets,
        "files": files,
        "checksum": checksum,
    });
    std::fs::write(
        dest.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    std::fs::write(dest.join("checksum.txt"), format!("{checksum}\n"))?;
    Ok((targets.len(), checksum))
}

fn cmd_synth(cfg: &RunConfig, out_dir: &Path, out: Option<&Path>) -> Result<()> {
    let synth = match cfg.data.source()? {
        DataSource::Synth(s) => s,
        DataSource::Dir(_) => {
            return Err(Error::Config(
                "data.synth is required by the synth command, but the config selects a data directory"
                    .into(),
            ))
        }
    };
    let dest = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("dataset"));
    let (count, checksum) = generate_synth_dataset(&synth, &dest)?;
    println!(
        "wrote {count} image/mask pairs under {} (checksum {checksum})",
        dest.display()
    );
    Ok(())
}

/// Loads the configured data source, padded for `multiple`, and returns
/// the (train, held-out) split. A synthetic source is generated under
/// <output_dir>/dataset on first use and reused afterwards.
fn resolve_dataset<S: Scalar>(
    cfg: &RunConfig,
    out_dir: &Path,
    multiple: usize,
) -> Result<(Vec<SampleRecord<S>>, Vec<SampleRecord<S>>)> {
    let samples = match cfg.data.source()? {
        DataSource::Dir(dir) => load_dataset(dir, multiple)?,
        DataSource::Synth(synth) => {
            let dataset_dir = out_dir.join("dataset");
            if !dataset_dir.join("images").is_dir() {
                let (count, _) = generate_synth_dataset(&synth, &dataset_dir)?;
                println!("generated {count} synthetic images under {}", dataset_dir.display());
            }
            load_dataset(&dataset_dir, multiple)?
        }
    };
    if samples.is_empty() {
        return Err(Error::Data("the configured data source holds no images".into()));
    }
    Ok(split(samples, cfg.data.split_ratio, cfg.data.split_seed))
}

fn cmd_train<S: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (train_set, val_set) = resolve_dataset::<S>(cfg, out_dir, 1 << cfg.model.depth)?;
    std::fs::create_dir_all(out_dir)?;
    let plan = TrainPlan {
        model: &cfg.model,
        optim: &cfg.optim,
        loss: &cfg.loss,
        seed: cfg.run.seed,
        out_dir: Some(out_dir),
        checkpoint_every: cfg.run.checkpoint_every,
    };
    let outcome = train_model::<S>(&plan, &train_set, &val_set)?;
    println!(
        "trained {} epochs on {} images ({} held out)",
        cfg.optim.epochs,
        train_set.len(),
        val_set.len()
    );
    println!(
        "best val IoU {:.4} at epoch {}",
        outcome.best_val_iou, outcome.best_epoch
    );
    for (label, path) in [
        ("best checkpoint", &outcome.best_checkpoint),
        ("final checkpoint", &outcome.final_checkpoint),
    ] {
        if let Some(p) = path {
            println!("{label}: {}", p.display());
        }
    }
    println!("epoch log: {}", out_dir.join("train_log.csv").display());
    Ok(())
}

fn cmd_eval<S: Scalar>(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint: &Path,
    data: Option<&Path>,
) -> Result<()> {
    let ck: LoadedCheckpoint<S> = load_checkpoint(checkpoint)?;
    let multiple = 1usize << ck.model.config.depth;
    let samples = match data {
        Some(dir) => {
            let s = load_dataset::<S>(dir, multiple)?;
            if s.is_empty() {
                return Err(Error::Data(format!("no images under {}", dir.display())));
            }
            s
        }
        None => resolve_dataset::<S>(cfg, out_dir, multiple)?.1,
    };
    let outputs = evaluate_dataset(&ck.model, &ck.state, &samples, &cfg.eval, cfg.run.threads)?;

    std::fs::create_dir_all(out_dir)?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&outputs.report)?)?;
    let curves_path = out_dir.join("curves.csv");
    write_curves_csv(&curves_path, &outputs.curves.points)?;
    for p in &outputs.predictions {
        write_png_gray(&out_dir.join("preds").join(format!("{}.png", p.id)), &p.mask)?;
        write_png_gray(&out_dir.join("probs").join(format!("{}.png", p.id)), &p.probs)?;
    }

    let r = &outputs.report;
    println!("evaluated {} images from step-{} checkpoint", samples.len(), ck.step);
    println!(
        "IoU {:.4}  nIoU {:.4}  Pd {:.2}%  Fa {:.3}e-6  AUC {:.4}  F {:.4}",
        r.iou,
        r.niou,
        100.0 * r.pd,
        r.fa,
        r.auc,
        r.f_score
    );
    println!(
        "report {}, curves {}, masks under preds/, probabilities under probs/",
        report_path.display(),
        curves_path.display()
    );
    Ok(())
}

fn cmd_predict<S: Scalar>(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let ck: LoadedCheckpoint<S> = load_checkpoint(checkpoint)?;
    let raw = read_png_gray::<S>(image)?;
    let (padded, orig_hw) = pad_to_multiple(&raw, 1 << ck.model.config.depth)?;
    let sample = SampleRecord {
        id: image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into()),
        mask: Tensor4::zeros(padded.shape()),
        image: padded,
        orig_hw,
    };
    let pred = predict_dataset(&ck.model, &ck.state, &[sample], 1)?.remove(0);
    write_png_gray(out, &pred.mask)?;
    let prob_path = out.with_extension("prob.png");
    write_png_gray(&prob_path, &pred.probs)?;
    println!(
        "wrote mask {} and probabilities {}",
        out.display(),
        prob_path.display()
    );
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let suite = gradcheck_suite();
    let mut failed = Vec::new();
    for entry in &suite {
        match &entry.report {
            Ok(r) => {
                println!(
                    "{:<22} max rel err {:.3e}  {}",
                    entry.name,
                    r.max_rel_err(),
                    if r.pass() { "pass" } else { "FAIL" }
                );
                if !r.pass() {
                    println!("{r}");
                    failed.push(entry.name);
                }
            }
            Err(e) => {
                println!("{:<22} did not run: {e}  FAIL", entry.name);
                failed.push(entry.name);
            }
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", suite.len());
        Ok(())
    } else {
        Err(Error::Grad(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

#[derive(serde::Serialize)]
struct AblationRow {
    name: &'static str,
    theta: f64,
    n_ffc_blocks: usize,
    seeds: Vec<u64>,
    iou_per_seed: Vec<f64>,
    median_iou: f64,
}

fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty list");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn cmd_ablate<S: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (train_set, val_set) = resolve_dataset::<S>(cfg, out_dir, 1 << cfg.model.depth)?;
    std::fs::create_dir_all(out_dir)?;
    let variants = [
        ("plain", 0.0, 0),
        ("cdc", cfg.model.theta, 0),
        ("ffc", 0.0, cfg.model.n_ffc_blocks),
        ("full", cfg.model.theta, cfg.model.n_ffc_blocks),
    ];
    println!(
        "ablation over {} seeds, {} train / {} held-out images",
        cfg.run.seeds.len(),
        train_set.len(),
        val_set.len()
    );
    let mut rows = Vec::with_capacity(variants.len());
    for (name, theta, n_ffc_blocks) in variants {
        let model_cfg = UcfConfig {
            theta,
            n_ffc_blocks,
            ..cfg.model.clone()
        };
        let mut ious = Vec::with_capacity(cfg.run.seeds.len());
        for &seed in &cfg.run.seeds {
            let plan = TrainPlan {
                model: &model_cfg,
                optim: &cfg.optim,
                loss: &cfg.loss,
                seed,
                out_dir: None,
                checkpoint_every: 0,
            };
            let outcome = train_model::<S>(&plan, &train_set, &val_set)?;
            println!("  {name} seed {seed}: held-out IoU {:.4}", outcome.best_val_iou);
            ious.push(outcome.best_val_iou);
        }
        let median_iou = median(&ious);
        println!("{name} (theta {theta}, {n_ffc_blocks} FFC blocks): median IoU {median_iou:.4}");
        rows.push(AblationRow {
            name,
            theta,
            n_ffc_blocks,
            seeds: cfg.run.seeds.clone(),
            iou_per_seed: ious,
            median_iou,
        });
    }

    let json_path = out_dir.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&rows)?)?;
    let csv_path = out_dir.join("ablation.csv");
    let mut csv = String::from("name,theta,n_ffc_blocks,median_iou\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.name, row.theta, row.n_ffc_blocks, row.median_iou
        ));
    }
    std::fs::write(&csv_path, csv)?;
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}
