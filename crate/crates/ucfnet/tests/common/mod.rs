//! Shared pieces of the acceptance gate: random fixtures, an independent
//! DFT oracle, the pass/fail line printer, and the desk-scale training
//! protocol whose results two criteria consume.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ucfnet::data::synth::{synth_generate, SynthConfig};
use ucfnet::data::{load_dataset, split, SampleRecord};
use ucfnet::loss::LossConfig;
use ucfnet::model::{FfcPlacement, UcfConfig};
use ucfnet::optim::OptimConfig;
use ucfnet::train::{train_model, TrainPlan};
use ucfnet::Tensor4;

/// Prints the one-line verdict for a criterion, then enforces it.
pub fn gate(criterion: &str, pass: bool, details: &str) {
    println!(
        "criterion {criterion}: {}: {details}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {details}");
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor4::from_vec(shape, data).expect("shape/data agree")
}

/// Full h x w complex DFT of one plane, straight from the definition:
/// X(u,v) = sum_{i,j} x(i,j) exp(-2 pi I (u i / h + v j / w)).
/// Quadratic per output bin; oracle use only.
pub fn naive_dft_plane(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    assert_eq!(plane.len(), h * w, "plane size disagrees with h*w");
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for i in 0..h {
                for j in 0..w {
                    let angle = -2.0
                        * std::f64::consts::PI
                        * (u as f64 * i as f64 / h as f64 + v as f64 * j as f64 / w as f64);
                    re += plane[i * w + j] * angle.cos();
                    im += plane[i * w + j] * angle.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

pub fn median(xs: &[f64]) -> f64 {
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

/// One ablation variant's outcome under the desk-scale protocol.
pub struct VariantResult {
    pub ious: Vec<f64>,
    pub median_iou: f64,
    /// Wall-clock seconds per training run.
    pub run_secs: Vec<f64>,
}

pub struct ProtocolResults {
    pub full: VariantResult,
    pub cdc_only: VariantResult,
    pub ffc_only: VariantResult,
    pub vanilla: VariantResult,
}

/// Desk-scale protocol shared by the training and ablation criteria:
/// 320 synthetic 64x64 images at generator defaults, split 256/64, model
/// base_width 16 / depth 4 / theta 0.7 / two FFC blocks, 100 epochs of
/// batch-8 AdamW under the default recipe, three seeds per variant. The
/// held-out IoU of a run is the best-epoch IoU on the 64 test images.
/// Twelve trainings in all; this is by far the slowest part of the gate,
/// so both criteria share one execution.
pub fn protocol() -> &'static ProtocolResults {
    static RESULTS: OnceLock<ProtocolResults> = OnceLock::new();
    RESULTS.get_or_init(run_protocol)
}

const PROTOCOL_SEEDS: [u64; 3] = [0, 1, 2];

fn run_protocol() -> ProtocolResults {
    let dir = tempfile::tempdir().expect("tempdir");
    let synth = SynthConfig::default();
    assert_eq!(synth.count, 320, "protocol expects a 256/64 split of 320");
    assert_eq!(synth.size, (64, 64));
    synth_generate(&synth, dir.path()).expect("synthetic generation");

    let samples: Vec<SampleRecord<f32>> =
        load_dataset(dir.path(), 16).expect("dataset should load");
    let (train_set, test_set) = split(samples, 0.8, 0);
    assert_eq!(train_set.len(), 256);
    assert_eq!(test_set.len(), 64);

    let base = UcfConfig {
        base_width: 16,
        depth: 4,
        theta: 0.7,
        n_ffc_blocks: 2,
        alpha: 0.5,
        ffc_placement: FfcPlacement::Bottleneck,
        in_channels: 1,
    };
    let optim = OptimConfig {
        epochs: 100,
        batch_size: 8,
        ..OptimConfig::default()
    };
    let loss = LossConfig::default();

    let run_variant = |name: &str, theta: f64, n_ffc_blocks: usize| -> VariantResult {
        let model = UcfConfig {
            theta,
            n_ffc_blocks,
            ..base.clone()
        };
        let mut ious = Vec::new();
        let mut run_secs = Vec::new();
        for seed in PROTOCOL_SEEDS {
            let plan = TrainPlan {
                model: &model,
                optim: &optim,
                loss: &loss,
                seed,
                out_dir: None,
                checkpoint_every: 0,
            };
            let start = Instant::now();
            let outcome = train_model::<f32>(&plan, &train_set, &test_set)
                .expect("protocol training run");
            let secs = start.elapsed().as_secs_f64();
            println!(
                "  protocol {name} seed {seed}: held-out IoU {:.4} in {:.0} s",
                outcome.best_val_iou, secs
            );
            ious.push(outcome.best_val_iou);
            run_secs.push(secs);
        }
        VariantResult {
            median_iou: median(&ious),
            ious,
            run_secs,
        }
    };

    ProtocolResults {
        full: run_variant("full", 0.7, 2),
        cdc_only: run_variant("cdc-only", 0.7, 0),
        ffc_only: run_variant("ffc-only", 0.0, 2),
        vanilla: run_variant("vanilla", 0.0, 0),
    }
}
