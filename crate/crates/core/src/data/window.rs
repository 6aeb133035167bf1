use std::f64::consts::PI;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::MobilitySeries;
use crate::error::{invalid, shape, Error, Result};
use crate::numeric::Tensor;

/// Calendar columns appended after the region counts.
pub const CYCLICAL_FEATURES: usize = 4;

const MINUTES_PER_DAY: f64 = 1440.0;
const MINUTES_PER_WEEK: f64 = 10080.0;

/// `[sin, cos]` of the time of day followed by `[sin, cos]` of the time of
/// week, with the week starting Monday 00:00.
pub fn cyclical_features(ts: &NaiveDateTime) -> [f64; 4] {
    let minute_of_day = ts.hour() as f64 * 60.0 + ts.minute() as f64 + ts.second() as f64 / 60.0;
    let minute_of_week = ts.weekday().num_days_from_monday() as f64 * MINUTES_PER_DAY + minute_of_day;
    let day = 2.0 * PI * minute_of_day / MINUTES_PER_DAY;
    let week = 2.0 * PI * minute_of_week / MINUTES_PER_WEEK;
    [day.sin(), day.cos(), week.sin(), week.cos()]
}

/// Model input for snapshot `t`: region counts, then calendar features.
pub fn feature_row(s: &MobilitySeries, t: usize) -> Vec<f64> {
    let mut row = s.row(t).to_vec();
    row.extend_from_slice(&cyclical_features(&s.timestamps()[t]));
    row
}

/// Supervised pairs of `lag × features` windows and next-step region counts.
///
/// Feature layout per step: the region columns followed by the
/// [`CYCLICAL_FEATURES`] calendar columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    target_times: Vec<NaiveDateTime>,
    lag: usize,
    regions: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.target_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_times.is_empty()
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn num_regions(&self) -> usize {
        self.regions
    }

    /// Features per time step.
    pub fn input_dim(&self) -> usize {
        self.regions + CYCLICAL_FEATURES
    }

    /// Flattened `lag × input_dim` window of sample `i`.
    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.lag * self.input_dim();
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn input_window(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.lag, self.input_dim()], self.input(i).to_vec())
            .expect("window shape is consistent")
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.regions..(i + 1) * self.regions]
    }

    pub fn target_times(&self) -> &[NaiveDateTime] {
        &self.target_times
    }

    /// All inputs as an `n × lag × input_dim` tensor.
    pub fn inputs_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.lag, self.input_dim()], self.inputs.clone())
            .expect("consistent")
    }

    /// All targets as an `n × regions` tensor.
    pub fn targets_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.regions], self.targets.clone()).expect("consistent")
    }
}

/// Builds one-step-ahead samples from `lag` prior snapshots.
///
/// Without `context`, the first `lag` snapshots only serve as inputs and
/// `len − lag` samples result. With `context` (a series that ends before `s`
/// starts), its final `lag` snapshots prefix `s` so every snapshot of `s` is a
/// target.
pub fn make_windows(
    s: &MobilitySeries,
    lag: usize,
    context: Option<&MobilitySeries>,
) -> Result<WindowedDataset> {
    if lag == 0 {
        return Err(invalid("lag must be at least 1"));
    }
    let regions = s.num_regions();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut times: Vec<NaiveDateTime> = Vec::new();
    if let Some(ctx) = context {
        if ctx.num_regions() != regions {
            return Err(shape("context and series have different regions"));
        }
        if ctx.len() < lag {
            return Err(Error::InsufficientData(format!(
                "context has {} snapshots, lag needs {lag}",
                ctx.len()
            )));
        }
        if let (Some(a), Some(b)) = (ctx.timestamps().last(), s.timestamps().first()) {
            if a >= b {
                return Err(Error::Ordering("context must end before the series starts".into()));
            }
        }
        for t in ctx.len() - lag..ctx.len() {
            rows.push(feature_row(ctx, t));
            times.push(ctx.timestamps()[t]);
        }
    }
    for t in 0..s.len() {
        rows.push(feature_row(s, t));
        times.push(s.timestamps()[t]);
    }
    if rows.len() < lag + 1 {
        return Err(Error::InsufficientData(format!(
            "{} snapshots cannot form a window of lag {lag} plus a target",
            rows.len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("series has missing or non-finite values; clean it first"));
    }
    let n = rows.len() - lag;
    let mut inputs = Vec::with_capacity(n * lag * (regions + CYCLICAL_FEATURES));
    let mut targets = Vec::with_capacity(n * regions);
    for i in 0..n {
        for row in &rows[i..i + lag] {
            inputs.extend_from_slice(row);
        }
        targets.extend_from_slice(&rows[i + lag][..regions]);
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        target_times: times[lag..].to_vec(),
        lag,
        regions,
    })
}

/// Per-column min-max scaler to `[0, 1]`, fitted on training data only.
/// Columns follow the window feature layout; targets use the region columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    /// Scaler that leaves every column unchanged.
    pub fn identity(columns: usize) -> Self {
        Self {
            min: vec![0.0; columns],
            max: vec![1.0; columns],
        }
    }

    /// Fits on every input step and every target of `train`.
    pub fn fit(train: &WindowedDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(invalid("cannot fit a scaler on an empty dataset"));
        }
        let d = train.input_dim();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for step in train.inputs.chunks(d) {
            for (c, v) in step.iter().enumerate() {
                min[c] = min[c].min(*v);
                max[c] = max[c].max(*v);
            }
        }
        for tgt in train.targets.chunks(train.regions) {
            for (c, v) in tgt.iter().enumerate() {
                min[c] = min[c].min(*v);
                max[c] = max[c].max(*v);
            }
        }
        for c in 0..d {
            if max[c] == min[c] {
                log::warn!("scaler: column {c} is constant ({}), mapping it to 0", min[c]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn columns(&self) -> usize {
        self.min.len()
    }

    #[inline]
    pub fn apply_value(&self, col: usize, v: f64) -> f64 {
        let range = self.max[col] - self.min[col];
        if range == 0.0 {
            0.0
        } else {
            (v - self.min[col]) / range
        }
    }

    #[inline]
    pub fn invert_value(&self, col: usize, v: f64) -> f64 {
        let range = self.max[col] - self.min[col];
        if range == 0.0 {
            self.min[col]
        } else {
            v * range + self.min[col]
        }
    }

    pub fn apply(&self, ds: &WindowedDataset) -> Result<WindowedDataset> {
        let d = ds.input_dim();
        if d != self.columns() {
            return Err(shape(format!(
                "scaler has {} columns, dataset has {d}",
                self.columns()
            )));
        }
        let inputs = ds
            .inputs
            .chunks(d)
            .flat_map(|step| step.iter().enumerate().map(|(c, v)| self.apply_value(c, *v)))
            .collect();
        let targets = ds
            .targets
            .chunks(ds.regions)
            .flat_map(|t| t.iter().enumerate().map(|(c, v)| self.apply_value(c, *v)))
            .collect();
        Ok(WindowedDataset {
            inputs,
            targets,
            ..ds.clone()
        })
    }

    /// Maps one scaled region vector back to counts.
    pub fn invert_regions(&self, scaled: &[f64]) -> Vec<f64> {
        scaled
            .iter()
            .enumerate()
            .map(|(c, v)| self.invert_value(c, *v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::series_from_fn;
    use super::*;
    use chrono::{Duration, NaiveDate};

    fn at(y: i32, m: u32, d: u32, h: u32, min: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, min, 0).unwrap()
    }

    #[test]
    fn monday_midnight_is_phase_zero() {
        assert_eq!(cyclical_features(&at(2020, 8, 24, 0, 0)), [0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn six_am_is_quarter_day() {
        let f = cyclical_features(&at(2020, 8, 27, 6, 0));
        assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15);
    }

    #[test]
    fn thursday_noon_is_half_week() {
        let f = cyclical_features(&at(2020, 8, 27, 12, 0));
        assert!(f[2].abs() < 1e-12);
        assert!((f[3] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn weekly_periodicity_exact() {
        let t = at(2020, 9, 2, 17, 30);
        assert_eq!(cyclical_features(&t), cyclical_features(&(t + Duration::days(7))));
    }

    #[test]
    fn window_counts() {
        let s = series_from_fn(65, 6, |t, r| (t * 6 + r) as f64);
        let ds = make_windows(&s, 6, None).unwrap();
        assert_eq!(ds.len(), 3114);
        assert_eq!(ds.input_dim(), 10);
        let test = series_from_fn(72, 6, |t, r| (t * 6 + r) as f64).slice(3120..3456);
        let ts = make_windows(&test, 6, Some(&s)).unwrap();
        assert_eq!(ts.len(), 336);
        assert_eq!(ts.target_times()[0], test.timestamps()[0]);
        assert!(make_windows(&s, 0, None).is_err());
    }

    #[test]
    fn windows_follow_series_order() {
        let s = series_from_fn(1, 2, |t, r| (10 * t + r) as f64);
        let ds = make_windows(&s, 3, None).unwrap();
        // Sample 0: steps 0, 1, 2 then target step 3.
        let w = ds.input(0);
        assert_eq!(&w[0..2], &[0.0, 1.0]);
        assert_eq!(&w[6..8], &[10.0, 11.0]);
        assert_eq!(&w[12..14], &[20.0, 21.0]);
        assert_eq!(ds.target(0), &[30.0, 31.0]);
        for i in 0..ds.len() {
            let last_input = s.timestamps()[i + 2];
            assert!(ds.target_times()[i] > last_input);
        }
    }

    #[test]
    fn flattened_windows_recover_series() {
        let s = series_from_fn(2, 3, |t, r| (t * t + r) as f64);
        let ds = make_windows(&s, 4, None).unwrap();
        let d = ds.input_dim();
        let mut rebuilt: Vec<f64> = Vec::new();
        // First window covers steps 0..lag; each later window adds its last step.
        for step in ds.input(0).chunks(d) {
            rebuilt.extend_from_slice(&step[..3]);
        }
        for i in 1..ds.len() {
            let w = ds.input(i);
            rebuilt.extend_from_slice(&w[(ds.lag() - 1) * d..(ds.lag() - 1) * d + 3]);
        }
        rebuilt.extend_from_slice(ds.target(ds.len() - 1));
        assert_eq!(rebuilt, s.counts());
    }

    #[test]
    fn too_short_rejected() {
        let s = series_from_fn(1, 1, |_, _| 1.0).slice(0..6);
        assert!(matches!(make_windows(&s, 6, None), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn scaler_maps_to_unit_interval_and_back() {
        let s = series_from_fn(1, 1, |t, _| [0.0, 50.0, 100.0][t % 3]);
        let ds = make_windows(&s, 1, None).unwrap();
        let sc = Scaler::fit(&ds).unwrap();
        assert_eq!(sc.apply_value(0, 0.0), 0.0);
        assert_eq!(sc.apply_value(0, 50.0), 0.5);
        assert_eq!(sc.apply_value(0, 100.0), 1.0);
        // Out-of-range values extrapolate.
        assert_eq!(sc.apply_value(0, 200.0), 2.0);
        for v in [0.0, 13.7, 99.9, 250.0] {
            assert!((sc.invert_value(0, sc.apply_value(0, v)) - v).abs() < 1e-12);
        }
        let scaled = sc.apply(&ds).unwrap();
        assert!(scaled.target(1)[0] >= 0.0 && scaled.target(1)[0] <= 1.0);
    }

    #[test]
    fn degenerate_column_maps_to_zero() {
        let s = series_from_fn(1, 1, |_, _| 7.0);
        let ds = make_windows(&s, 2, None).unwrap();
        let sc = Scaler::fit(&ds).unwrap();
        assert_eq!(sc.apply_value(0, 7.0), 0.0);
        assert_eq!(sc.invert_value(0, 0.0), 7.0);
    }
}
