//! The acceptance gate: one test per criterion, each printing a single
//! pass/fail line before enforcing it. Numeric claims are checked against
//! independent oracles (a literal-loop convolution, finite differences, a
//! from-the-definition DFT, hand-computed metric fixtures); the two
//! training criteria share one twelve-run protocol.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines on success as well as on failure.

mod common;

use std::process::Command;
use std::time::Instant;

use common::{gate, median, naive_dft_plane, protocol, rand_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ucfnet::cdc::{cdc_brute, cdc_forward};
use ucfnet::data::checkpoint::checkpoint_checksum;
use ucfnet::ffc::FourierUnit;
use ucfnet::metrics::{
    confusion, connected_components, curve_and_auc, default_thresholds, detect_image,
    iou_dataset, match_detections, niou_dataset, pd_fa, MATCH_DISTANCE,
};
use ucfnet::nn::{BufferSet, Mode, ParamSet};
use ucfnet::tensor::{irfft2, rfft2, Tape};
use ucfnet::verify::gradcheck_suite;
use ucfnet::Tensor4;

const BIN: &str = env!("CARGO_BIN_EXE_ucfnet");

#[test]
fn criterion_01_cdc_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let thetas = [0.0, 0.25, 0.5, 0.7, 1.0];
    // Same-size, valid, and strided geometries all route through the
    // decomposed fast path; the oracle is the literal double loop.
    let geometries = [(1usize, 1usize), (1, 0), (2, 1)];
    let mut max_diff = 0.0f64;
    for trial in 0..20 {
        let x = rand_tensor(&mut rng, [2, 3, 8, 8]);
        let w = rand_tensor(&mut rng, [4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, [1, 4, 1, 1]);
        let bias = if trial % 2 == 0 { Some(&b) } else { None };
        for &theta in &thetas {
            for &(stride, padding) in &geometries {
                let params = ParamSet::<f64>::new();
                let mut tape = Tape::new(&params);
                let xi = tape.leaf(x.clone());
                let wi = tape.leaf(w.clone());
                let bi = bias.map(|t| tape.leaf(t.clone()));
                let fast = cdc_forward(&mut tape, xi, wi, bi, theta, stride, padding)
                    .expect("fast path accepts the oracle's geometry");
                let slow = cdc_brute(&x, &w, bias, theta, stride, padding)
                    .expect("brute force accepts the same geometry");
                assert_eq!(tape.shape(fast), slow.shape(), "routes disagree on shape");
                for (a, o) in tape.value(fast).iter().zip(slow.iter()) {
                    max_diff = max_diff.max((a - o).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        "1 (CDC oracle equivalence)",
        max_diff <= 1e-9 && secs < 5.0,
        &format!("max |fast - brute| {max_diff:.3e} over 300 cases (tol 1e-9), {secs:.2} s (< 5 s)"),
    );
}

#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let suite = gradcheck_suite();
    for required in [
        "conv2d",
        "cdc(theta=0.7)",
        "fourier_unit",
        "ffc_layer",
        "ffc_residual_block",
        "batchnorm_train",
        "relu",
        "sigmoid",
        "bce_loss",
        "soft_iou_loss",
        "ucf_model",
    ] {
        assert!(
            suite.iter().any(|e| e.name == required),
            "gradient suite is missing the {required} check"
        );
    }
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for entry in &suite {
        match &entry.report {
            Ok(report) => {
                assert_eq!(report.tol_rel, 1e-4, "{} runs at a nonstandard tolerance", entry.name);
                worst = worst.max(report.max_rel_err());
                if !report.pass() {
                    failures.push(format!("{}:\n{report}", entry.name));
                }
            }
            Err(e) => failures.push(format!("{}: did not run: {e}", entry.name)),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate(
        "2 (gradient suite)",
        failures.is_empty() && secs < 120.0,
        &format!(
            "{} checks, worst rel err {worst:.3e} (tol 1e-4), {secs:.1} s (< 120 s){}{}",
            suite.len(),
            if failures.is_empty() { "" } else { "; failures: " },
            failures.join("\n")
        ),
    );
}

#[test]
fn criterion_03_fft_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    let square = rand_tensor(&mut rng, [2, 3, 8, 8]);
    let oblong = rand_tensor(&mut rng, [1, 2, 6, 10]);

    // (a) transform then invert returns the input.
    let mut roundtrip = 0.0f64;
    for x in [&square, &oblong] {
        let [_, _, h, w] = x.shape();
        let back = irfft2(&rfft2(x), (h, w)).expect("roundtrip inversion");
        for (a, b) in back.iter().zip(x.iter()) {
            roundtrip = roundtrip.max((a - b).abs());
        }
    }

    // (b) every kept bin of the 8x8 spectrum matches a from-the-definition
    // DFT evaluated with scalar cos/sin accumulation.
    let spec = rfft2(&square);
    let [n, c, h, w_half] = spec.shape();
    let w = 8;
    let mut dft_diff = 0.0f64;
    for ni in 0..n {
        for ci in 0..c {
            let naive = naive_dft_plane(square.plane(ni, ci), h, w);
            for u in 0..h {
                for v in 0..w_half {
                    let (re, im) = spec.at(ni, ci, u, v);
                    let (nre, nim) = naive[u * w + v];
                    dft_diff = dft_diff.max((re - nre).abs().max((im - nim).abs()));
                }
            }
        }
    }

    // (c) Parseval: spatial energy equals spectral energy / (h w), with
    // the dropped conjugate half restored by doubling interior columns.
    let mut parseval = 0.0f64;
    for x in [&square, &oblong] {
        let [nn, cc, hh, ww] = x.shape();
        let sp = rfft2(x);
        let spatial: f64 = x.iter().map(|v| v * v).sum();
        let mut spectral = 0.0;
        for ni in 0..nn {
            for ci in 0..cc {
                for u in 0..hh {
                    for v in 0..ww / 2 + 1 {
                        let (re, im) = sp.at(ni, ci, u, v);
                        let weight = if v == 0 || (ww % 2 == 0 && v == ww / 2) { 1.0 } else { 2.0 };
                        spectral += weight * (re * re + im * im);
                    }
                }
            }
        }
        spectral /= (hh * ww) as f64;
        parseval = parseval.max((spatial - spectral).abs() / spatial);
    }

    // (d) a Fourier unit whose 1x1 mixer is the identity and whose
    // norm/activation stage is bypassed reduces to FFT then inverse FFT.
    let mut params = ParamSet::<f64>::new();
    let mut bufs = BufferSet::new();
    let mut fu = FourierUnit::new(&mut params, &mut bufs, &mut rng, "fu", 2);
    fu.bypass_norm_act = true;
    let weight = params.get_mut(fu.conv.weight);
    for o in 0..4 {
        for i in 0..4 {
            *weight.value.at_mut(o, i, 0, 0) = if o == i { 1.0 } else { 0.0 };
        }
    }
    let x = rand_tensor(&mut rng, [1, 2, 8, 8]);
    let mut tape = Tape::new(&params);
    let xi = tape.leaf(x.clone());
    let yi = fu
        .forward(&mut tape, &mut bufs, Mode::Eval, xi)
        .expect("identity Fourier unit forward");
    let mut fu_identity = 0.0f64;
    for (a, b) in tape.value(yi).iter().zip(x.iter()) {
        fu_identity = fu_identity.max((a - b).abs());
    }

    gate(
        "3 (FFT suite)",
        roundtrip <= 1e-10 && dft_diff <= 1e-9 && parseval <= 1e-8 && fu_identity <= 1e-6,
        &format!(
            "roundtrip {roundtrip:.3e} (tol 1e-10), naive-DFT {dft_diff:.3e} (tol 1e-9), \
             Parseval rel {parseval:.3e} (tol 1e-8), FU identity {fu_identity:.3e} (tol 1e-6)"
        ),
    );
}

#[test]
fn criterion_04_global_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(204);
    let mut params = ParamSet::<f64>::new();
    let mut bufs = BufferSet::new();
    let fu = FourierUnit::new(&mut params, &mut bufs, &mut rng, "fu", 2);
    let x = rand_tensor(&mut rng, [1, 2, 16, 16]);
    let mut bumped = x.clone();
    *bumped.at_mut(0, 1, 7, 9) += 0.5;

    let fu_forward = |input: &Tensor4<f64>| -> Tensor4<f64> {
        let mut bufs = bufs.clone();
        let mut tape = Tape::new(&params);
        let id = tape.leaf(input.clone());
        let out = fu
            .forward(&mut tape, &mut bufs, Mode::Eval, id)
            .expect("Fourier unit forward");
        tape.value(out).clone()
    };
    let changed_positions = |a: &Tensor4<f64>, b: &Tensor4<f64>| -> usize {
        let [_, c, h, w] = a.shape();
        let mut count = 0;
        for y in 0..h {
            for xx in 0..w {
                let delta = (0..c)
                    .map(|ci| (a.at(0, ci, y, xx) - b.at(0, ci, y, xx)).abs())
                    .fold(0.0f64, f64::max);
                if delta > 1e-12 {
                    count += 1;
                }
            }
        }
        count
    };

    let fu_changed = changed_positions(&fu_forward(&x), &fu_forward(&bumped));

    let w = rand_tensor(&mut rng, [2, 2, 3, 3]);
    let conv_forward = |input: &Tensor4<f64>| -> Tensor4<f64> {
        let mut tape = Tape::new(&params);
        let id = tape.leaf(input.clone());
        let wi = tape.leaf(w.clone());
        let out = tape.conv2d(id, wi, None, 1, 1).expect("3x3 conv forward");
        tape.value(out).clone()
    };
    let conv_changed = changed_positions(&conv_forward(&x), &conv_forward(&bumped));

    let total = 16 * 16;
    gate(
        "4 (global receptive field)",
        fu_changed as f64 >= 0.99 * total as f64 && conv_changed <= 25,
        &format!(
            "Fourier unit touched {fu_changed}/{total} positions (need >= 99%), \
             3x3 conv touched {conv_changed} (allow <= 25)"
        ),
    );
}

#[test]
fn criterion_05_metrics_fixtures() {
    let px = |shape: [usize; 4], on: &[(usize, usize)]| -> Tensor4<f64> {
        let mut t = Tensor4::zeros(shape);
        for &(y, x) in on {
            *t.at_mut(0, 0, y, x) = 1.0;
        }
        t
    };

    // Single image with tp 1, fp 3, fn 3.
    let gt_a = px([1, 1, 4, 4], &[(0, 0), (0, 1), (0, 2), (0, 3)]);
    let pred_a = px([1, 1, 4, 4], &[(0, 0), (1, 0), (1, 1), (1, 2)]);
    let iou_single = iou_dataset(&[confusion(&pred_a, &gt_a).unwrap()]).unwrap();

    // Two images, {tp 1, fp 0, fn 1} and {tp 3, fp 1, fn 0}: the pooled
    // ratio of sums is 4/6 while the per-image mean is 0.625.
    let gt_b1 = px([1, 1, 4, 4], &[(0, 0), (0, 1)]);
    let pred_b1 = px([1, 1, 4, 4], &[(0, 0)]);
    let gt_b2 = px([1, 1, 4, 4], &[(0, 0), (0, 1), (1, 0)]);
    let pred_b2 = px([1, 1, 4, 4], &[(0, 0), (0, 1), (1, 0), (2, 2)]);
    let counts = [
        confusion(&pred_b1, &gt_b1).unwrap(),
        confusion(&pred_b2, &gt_b2).unwrap(),
    ];
    let pooled = iou_dataset(&counts).unwrap();
    let averaged = niou_dataset(&counts).unwrap();

    // Centroid matching: distance sqrt(13) < 4 matches, exactly 4.0 does not.
    let gt_c = connected_components(&px([1, 1, 20, 20], &[(10, 10)])).unwrap();
    let near = connected_components(&px([1, 1, 20, 20], &[(12, 13)])).unwrap();
    let at_four = connected_components(&px([1, 1, 20, 20], &[(14, 10)])).unwrap();
    let near_matched = match_detections(&near, &gt_c, MATCH_DISTANCE).matched.len();
    let four_matched = match_detections(&at_four, &gt_c, MATCH_DISTANCE).matched.len();

    // One unmatched five-pixel prediction in a single 256x256 image.
    let gt_d = px([1, 1, 256, 256], &[(50, 50)]);
    let pred_d = px(
        [1, 1, 256, 256],
        &[(200, 200), (199, 200), (201, 200), (200, 199), (200, 201)],
    );
    let (pd, fa) = pd_fa(&[detect_image(&pred_d, &gt_d, MATCH_DISTANCE).unwrap()]).unwrap();

    let pass = iou_single == 1.0 / 7.0
        && pooled == 4.0 / 6.0
        && averaged == 0.625
        && near_matched == 1
        && four_matched == 0
        && pd == 0.0
        && fa == 5.0 / 65536.0;
    gate(
        "5 (metric fixtures)",
        pass,
        &format!(
            "IoU {iou_single} (want {}), pooled {pooled} vs mean {averaged} (want {} vs 0.625), \
             sqrt(13) matched {near_matched}, d=4.0 matched {four_matched}, Fa {fa:e} (want {:e})",
            1.0 / 7.0,
            4.0 / 6.0,
            5.0 / 65536.0
        ),
    );
}

#[test]
fn criterion_06_curve_sanity() {
    let mut gt1 = Tensor4::<f64>::zeros([1, 1, 8, 8]);
    for (y, x) in [(2, 2), (2, 3), (3, 2), (6, 6)] {
        *gt1.at_mut(0, 0, y, x) = 1.0;
    }
    let mut gt2 = Tensor4::<f64>::zeros([1, 1, 8, 8]);
    *gt2.at_mut(0, 0, 5, 1) = 1.0;
    let gts = [gt1, gt2];

    let perfect: Vec<_> = gts.iter().cloned().collect();
    let curves = curve_and_auc(&perfect, &gts, &default_thresholds()).unwrap();

    let inverted: Vec<Tensor4<f64>> = gts
        .iter()
        .map(|g| {
            let data = g.iter().map(|v| 1.0 - v).collect();
            Tensor4::from_vec(g.shape(), data).unwrap()
        })
        .collect();
    let flipped = curve_and_auc(&inverted, &gts, &default_thresholds()).unwrap();

    gate(
        "6 (curve sanity)",
        curves.pr_auc == 1.0 && curves.f_score == 1.0 && flipped.f_score == 0.0,
        &format!(
            "perfect predictor PR-AUC {} and F1 {} (want exactly 1), \
             inverted predictor F1 {} (want exactly 0)",
            curves.pr_auc, curves.f_score, flipped.f_score
        ),
    );
}

#[test]
fn criterion_07_desk_scale_training() {
    let p = protocol();
    let med_iou = p.full.median_iou;
    let med_secs = median(&p.full.run_secs);
    let max_secs = p.full.run_secs.iter().cloned().fold(0.0f64, f64::max);
    gate(
        "7 (desk-scale training)",
        med_iou >= 0.55 && med_secs <= 1800.0,
        &format!(
            "full model held-out IoU per seed {:?}, median {med_iou:.4} (need >= 0.55); \
             median run {med_secs:.0} s, slowest {max_secs:.0} s (budget 1800 s)",
            p.full.ious.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_08_ablation_trend() {
    let p = protocol();
    let (full, cdc, ffc, vanilla) = (
        p.full.median_iou,
        p.cdc_only.median_iou,
        p.ffc_only.median_iou,
        p.vanilla.median_iou,
    );
    let ordered = full >= ffc && ffc >= vanilla && full >= cdc && cdc >= vanilla;
    let gap = full - vanilla;
    gate(
        "8 (ablation trend)",
        ordered && gap >= 0.01,
        &format!(
            "median IoU full {full:.4}, +CDC {cdc:.4}, +FFC {ffc:.4}, vanilla {vanilla:.4}; \
             need full >= each addition >= vanilla and full - vanilla >= 0.01 (got {gap:+.4})"
        ),
    );
}

#[test]
fn criterion_09_train_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
            "model": {"base_width": 8, "depth": 2, "n_ffc_blocks": 1},
            "optim": {"epochs": 4, "batch_size": 8},
            "data": {"synth": {"count": 24, "size": [32, 32], "seed": 7}},
            "run": {"seed": 3, "threads": 1}
        }"#,
    )
    .unwrap();

    let mut checksums = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let status = Command::new(BIN)
            .args(["--config", config.to_str().unwrap(), "train"])
            .env("UCF_OUTPUT_DIR", &out)
            .status()
            .expect("train run spawns");
        assert!(status.success(), "train run {sub} failed");
        checksums.push(checkpoint_checksum(&out.join("ckpt_final")).unwrap());
    }
    gate(
        "9 (train determinism)",
        checksums[0] == checksums[1],
        &format!(
            "final checkpoint checksums {}.. and {}..",
            &checksums[0][..12],
            &checksums[1][..12]
        ),
    );
}

#[test]
fn criterion_10_sirst_report() {
    // Optional and not part of CI: exercises the report shape on a local
    // SIRST-style copy when the user points UCF_SIRST_DIR at one. No
    // numeric target is asserted.
    let Some(sirst) = std::env::var_os("UCF_SIRST_DIR") else {
        println!(
            "criterion 10 (external dataset report): SKIP: set UCF_SIRST_DIR to a local \
             images/ + masks/ dataset to exercise it"
        );
        return;
    };

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
            "model": {"base_width": 8, "depth": 2, "n_ffc_blocks": 1},
            "optim": {"epochs": 2, "batch_size": 8},
            "data": {"synth": {"count": 16, "size": [32, 32], "seed": 1}},
            "run": {"seed": 0, "threads": 1}
        }"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let status = Command::new(BIN)
        .args(["--config", config.to_str().unwrap(), "train"])
        .env("UCF_OUTPUT_DIR", &out)
        .status()
        .expect("train run spawns");
    assert!(status.success(), "checkpoint-producing train run failed");

    let eval_out = dir.path().join("eval");
    let status = Command::new(BIN)
        .args([
            "--config",
            config.to_str().unwrap(),
            "eval",
            "--checkpoint",
            out.join("ckpt_best").to_str().unwrap(),
            "--data",
            sirst.to_str().expect("UCF_SIRST_DIR is valid UTF-8"),
        ])
        .env("UCF_OUTPUT_DIR", &eval_out)
        .status()
        .expect("eval run spawns");
    assert!(status.success(), "eval on the external dataset failed");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("report.json")).unwrap())
            .unwrap();
    let has_fields = ["iou", "niou", "pd", "fa", "auc", "f_score"]
        .iter()
        .all(|k| report.get(k).map(|v| v.is_number()).unwrap_or(false));
    let images = report["per_image"].as_array().map(Vec::len).unwrap_or(0);
    gate(
        "10 (external dataset report)",
        has_fields && images > 0,
        &format!(
            "report.json carries the six summary metrics and {images} per-image rows \
             (IoU {}, Pd {}, Fa {})",
            report["iou"], report["pd"], report["fa"]
        ),
    );
}
