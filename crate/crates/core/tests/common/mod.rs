#![allow(dead_code)]

use std::path::PathBuf;

use chrono::NaiveDate;
use dpmobility::data::{iqr_clean, load_csv, slot_duration, MobilitySeries};
use dpmobility::neural::{backward, forward, init_params, mae_loss, predict, ModelParams, ModelSpec};
use dpmobility::numeric::{RngStream, Tensor};

/// Published count file: `DPMOBILITY_DATASET`, else `data/mobility.csv` at
/// the workspace root.
pub fn dataset_path() -> PathBuf {
    std::env::var_os("DPMOBILITY_DATASET")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mobility.csv"))
}

/// The 72-day study window (2020-08-24 to 2020-11-04), IQR-cleaned.
pub fn study_series() -> Result<MobilitySeries, String> {
    let path = dataset_path();
    if !path.exists() {
        return Err(format!(
            "dataset not found at {} (set DPMOBILITY_DATASET to the published per-region count CSV)",
            path.display()
        ));
    }
    let raw = load_csv(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let start = NaiveDate::from_ymd_opt(2020, 8, 24).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let end = start + slot_duration() * (72 * 48);
    let ts = raw.timestamps();
    let a = ts.partition_point(|t| *t < start);
    let b = ts.partition_point(|t| *t < end);
    let clean = iqr_clean(&raw.slice(a..b)).map_err(|e| e.to_string())?;
    if clean.len() != 72 * 48 {
        return Err(format!("study window has {} slots after cleaning, expected 3456", clean.len()));
    }
    Ok(clean)
}

/// Largest relative disagreement between backpropagated and central
/// finite-difference gradients of the per-example MAE. Differences are
/// measured relative to `max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check(spec: &ModelSpec, lag: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let mut params = init_params(spec, &mut rng.child(0)).unwrap();
    // Nonzero biases so every term of the gradient is exercised.
    for t in params.tensors_mut() {
        for v in t.values_mut() {
            *v += 0.1 * rng.standard_normal();
        }
    }
    let window = Tensor::new(
        vec![lag, spec.input],
        (0..lag * spec.input).map(|_| rng.standard_normal()).collect(),
    )
    .unwrap();
    let pred = predict(spec, &params, &window).unwrap();
    // Residuals well away from the kink of |r|.
    let target: Vec<f64> = pred
        .values()
        .iter()
        .map(|p| {
            let off = 0.5 + rng.uniform();
            if rng.uniform() < 0.5 { p + off } else { p - off }
        })
        .collect();
    let target_t = Tensor::from_vec(target.clone());
    let (_, tape) = forward(spec, &params, &window).unwrap();
    let analytic = backward(spec, &params, &tape, &target_t).unwrap();

    let loss = |p: &ModelParams| mae_loss(predict(spec, p, &window).unwrap().values(), &target);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let grads = analytic.tensors();
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].values_mut()[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].values_mut()[j] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = g.values()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Prints the acceptance line and fails the test when `ok` is false.
pub fn report(name: &str, ok: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name} failed: {detail}");
}
