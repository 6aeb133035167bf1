//! Per-region count series: ingestion, IQR cleaning, cyclical calendar
//! features, train/test split, lag windows, min-max scaling and summary
//! statistics.

mod clean;
mod io;
mod stats;
mod window;

pub use clean::{iqr_clean, iqr_clean_with_report, quantile_linear, CleanReport};
pub use io::{load_csv, parse_csv, parse_timestamp, write_csv, TIMESTAMP_FORMAT};
pub use stats::{descriptive_stats, write_stats_csv, RegionStats};
pub use window::{
    cyclical_features, feature_row, make_windows, Scaler, WindowedDataset, CYCLICAL_FEATURES,
};

use std::ops::Range;

use chrono::{Duration, NaiveDateTime};

use crate::error::{shape, Error, Result};
use crate::privacy::PrivacyRecord;

/// Minutes between consecutive snapshots.
pub const SLOT_MINUTES: i64 = 30;
/// Snapshots per day.
pub const SLOTS_PER_DAY: usize = 48;

pub fn slot_duration() -> Duration {
    Duration::minutes(SLOT_MINUTES)
}

/// Read access to the count rows of a series.
///
/// Pipelines that must prove what raw data they touch go through this trait
/// so that a wrapper can observe every row read.
pub trait CountSource {
    fn timestamps(&self) -> &[NaiveDateTime];
    fn regions(&self) -> &[String];
    /// Counts of snapshot `t`, one entry per region.
    fn row(&self, t: usize) -> &[f64];

    fn len(&self) -> usize {
        self.timestamps().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Timestamped matrix of per-region user counts.
///
/// Counts are stored row-major (`len × regions`). Before cleaning, `NaN`
/// marks a missing cell. A series produced by a privacy mechanism carries its
/// [`PrivacyRecord`]; every derived series keeps it and there is no way to
/// drop it.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilitySeries {
    timestamps: Vec<NaiveDateTime>,
    counts: Vec<f64>,
    regions: Vec<String>,
    privacy: Option<PrivacyRecord>,
}

impl MobilitySeries {
    pub fn new(timestamps: Vec<NaiveDateTime>, counts: Vec<f64>, regions: Vec<String>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::InvalidArgument("series needs at least one region".into()));
        }
        if counts.len() != timestamps.len() * regions.len() {
            return Err(shape(format!(
                "{} timestamps × {} regions needs {} counts, got {}",
                timestamps.len(),
                regions.len(),
                timestamps.len() * regions.len(),
                counts.len()
            )));
        }
        if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Ordering(format!(
                "{} is not after {}",
                w[1].format(TIMESTAMP_FORMAT),
                w[0].format(TIMESTAMP_FORMAT)
            )));
        }
        Ok(Self {
            timestamps,
            counts,
            regions,
            privacy: None,
        })
    }

    pub(crate) fn with_privacy(mut self, record: PrivacyRecord) -> Self {
        self.privacy = Some(record);
        self
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    /// Counts of snapshot `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.regions.len();
        &self.counts[t * n..(t + 1) * n]
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    /// Row-major `len × regions` counts.
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn privacy(&self) -> Option<&PrivacyRecord> {
        self.privacy.as_ref()
    }

    pub fn is_sanitized(&self) -> bool {
        self.privacy.is_some()
    }

    pub fn has_missing(&self) -> bool {
        self.counts.iter().any(|v| v.is_nan())
    }

    /// True when consecutive timestamps are exactly one slot apart.
    pub fn is_regular(&self) -> bool {
        self.timestamps
            .windows(2)
            .all(|w| w[1] - w[0] == slot_duration())
    }

    /// Column `r` as a vector.
    pub fn region_values(&self, r: usize) -> Vec<f64> {
        let n = self.num_regions();
        self.counts.iter().skip(r).step_by(n).copied().collect()
    }

    /// Contiguous sub-series; the privacy record is carried over.
    pub fn slice(&self, range: Range<usize>) -> MobilitySeries {
        let n = self.num_regions();
        MobilitySeries {
            timestamps: self.timestamps[range.clone()].to_vec(),
            counts: self.counts[range.start * n..range.end * n].to_vec(),
            regions: self.regions.clone(),
            privacy: self.privacy.clone(),
        }
    }
}

impl CountSource for MobilitySeries {
    fn timestamps(&self) -> &[NaiveDateTime] {
        MobilitySeries::timestamps(self)
    }

    fn regions(&self) -> &[String] {
        MobilitySeries::regions(self)
    }

    fn row(&self, t: usize) -> &[f64] {
        MobilitySeries::row(self, t)
    }
}

/// Splits off the final `train_days + test_days` days into contiguous train
/// and test parts.
pub fn split(
    s: &MobilitySeries,
    train_days: usize,
    test_days: usize,
) -> Result<(MobilitySeries, MobilitySeries)> {
    if train_days == 0 || test_days == 0 {
        return Err(Error::InvalidArgument(
            "train and test spans must be at least one day".into(),
        ));
    }
    let n_train = train_days * SLOTS_PER_DAY;
    let n_test = test_days * SLOTS_PER_DAY;
    let need = n_train + n_test;
    if s.len() < need {
        return Err(Error::InsufficientData(format!(
            "split needs {need} slots ({} days), series has {}",
            train_days + test_days,
            s.len()
        )));
    }
    let start = s.len() - need;
    Ok((
        s.slice(start..start + n_train),
        s.slice(start + n_train..s.len()),
    ))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use chrono::NaiveDate;

    /// Regular series starting Monday 2020-08-24 00:00.
    pub fn series_from_fn(days: usize, regions: usize, f: impl Fn(usize, usize) -> f64) -> MobilitySeries {
        let start = NaiveDate::from_ymd_opt(2020, 8, 24)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let n = days * SLOTS_PER_DAY;
        let ts = (0..n).map(|i| start + slot_duration() * i as i32).collect();
        let mut counts = Vec::with_capacity(n * regions);
        for t in 0..n {
            for r in 0..regions {
                counts.push(f(t, r));
            }
        }
        let names = (1..=regions).map(|r| format!("R{r}")).collect();
        MobilitySeries::new(ts, counts, names).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testing::series_from_fn;
    use super::*;

    #[test]
    fn seventy_two_days_split() {
        let s = series_from_fn(72, 2, |t, r| (t + r) as f64);
        let (train, test) = split(&s, 65, 7).unwrap();
        assert_eq!((train.len(), test.len()), (3120, 336));
        assert!(train.timestamps().last().unwrap() < test.timestamps().first().unwrap());
    }

    #[test]
    fn short_series_split_fails() {
        let s = series_from_fn(10, 1, |_, _| 1.0);
        let err = split(&s, 65, 7).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(ref m) if m.contains("3456")));
    }

    #[test]
    fn one_day_each() {
        let s = series_from_fn(2, 1, |t, _| t as f64);
        let (a, b) = split(&s, 1, 1).unwrap();
        assert_eq!((a.len(), b.len()), (48, 48));
    }

    #[test]
    fn longer_series_uses_tail() {
        let s = series_from_fn(80, 1, |t, _| t as f64);
        let (train, test) = split(&s, 65, 7).unwrap();
        assert_eq!(train.row(0)[0], (8 * 48) as f64);
        assert_eq!(test.row(335)[0], (80 * 48 - 1) as f64);
    }

    #[test]
    fn non_monotone_rejected() {
        let s = series_from_fn(1, 1, |_, _| 0.0);
        let mut ts = s.timestamps().to_vec();
        ts.swap(3, 4);
        assert!(matches!(
            MobilitySeries::new(ts, vec![0.0; 48], vec!["R1".into()]),
            Err(Error::Ordering(_))
        ));
    }
}
