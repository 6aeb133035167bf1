use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDateTime, Timelike};

use super::{slot_duration, MobilitySeries, SLOT_MINUTES};
use crate::error::{Error, Result};

/// What [`iqr_clean_with_report`] changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct CleanReport {
    /// Grid slots absent from the input that were inserted.
    pub inserted_slots: usize,
    pub missing_filled: usize,
    pub outliers_replaced: usize,
    /// Cells filled from the region's weekly mean because their group had
    /// fewer than two usable values.
    pub fallback_fills: usize,
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (position `p·(n−1)`).
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn iqr_clean(s: &MobilitySeries) -> Result<MobilitySeries> {
    iqr_clean_with_report(s).map(|(c, _)| c)
}

/// Cleaning key: ISO year, ISO week and half-hour slot of the day.
type GroupKey = (i32, u32, u32);

fn group_key(ts: &NaiveDateTime) -> GroupKey {
    let iso = ts.iso_week();
    let slot = (ts.hour() * 60 + ts.minute()) / SLOT_MINUTES as u32;
    (iso.year(), iso.week(), slot)
}

/// Regularizes the series onto its 30-minute grid and, per
/// (ISO week, region, time-of-day slot) group, replaces values outside
/// `[Q1 − 1.5·IQR, Q3 + 1.5·IQR]` and missing cells with the mean of the
/// group's in-fence values.
pub fn iqr_clean_with_report(s: &MobilitySeries) -> Result<(MobilitySeries, CleanReport)> {
    let first = *s
        .timestamps()
        .first()
        .ok_or_else(|| Error::InsufficientData("cannot clean an empty series".into()))?;
    let last = *s.timestamps().last().expect("non-empty");
    let step = slot_duration().num_seconds();
    let r_count = s.num_regions();

    let span = (last - first).num_seconds();
    let n_slots = (span / step) as usize + 1;
    let mut grid = vec![f64::NAN; n_slots * r_count];
    for (t, ts) in s.timestamps().iter().enumerate() {
        let offset = (*ts - first).num_seconds();
        if offset % step != 0 {
            return Err(Error::InvalidArgument(format!(
                "timestamp {ts} is not on the 30-minute grid starting at {first}"
            )));
        }
        let slot = (offset / step) as usize;
        grid[slot * r_count..(slot + 1) * r_count].copy_from_slice(s.row(t));
    }
    let timestamps: Vec<NaiveDateTime> = (0..n_slots)
        .map(|i| first + slot_duration() * i as i32)
        .collect();

    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, ts) in timestamps.iter().enumerate() {
        groups.entry(group_key(ts)).or_default().push(i);
    }

    let mut report = CleanReport {
        inserted_slots: n_slots - s.len(),
        ..CleanReport::default()
    };
    let mut out = grid.clone();
    // Slots whose group could not provide a fill value.
    let mut pending: Vec<(usize, usize)> = Vec::new();
    // Accepted (present and in-fence) values per (iso year, week, region).
    let mut weekly: BTreeMap<(i32, u32, usize), (f64, usize)> = BTreeMap::new();

    for (&(year, week, _), slots) in &groups {
        for r in 0..r_count {
            let cell = |i: usize| grid[i * r_count + r];
            let mut present: Vec<f64> = slots.iter().map(|&i| cell(i)).filter(|v| !v.is_nan()).collect();
            present.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
            let fence = if present.len() >= 2 {
                let q1 = quantile_linear(&present, 0.25);
                let q3 = quantile_linear(&present, 0.75);
                let iqr = q3 - q1;
                Some((q1 - 1.5 * iqr, q3 + 1.5 * iqr))
            } else {
                None
            };
            let accepted: Vec<f64> = match fence {
                Some((lo, hi)) => present.iter().copied().filter(|v| *v >= lo && *v <= hi).collect(),
                None => present.clone(),
            };
            let acc = weekly.entry((year, week, r)).or_insert((0.0, 0));
            acc.0 += accepted.iter().sum::<f64>();
            acc.1 += accepted.len();

            let fill = (accepted.len() >= 2).then(|| accepted.iter().sum::<f64>() / accepted.len() as f64);
            for &i in slots {
                let v = cell(i);
                let outlier = match fence {
                    Some((lo, hi)) => !v.is_nan() && (v < lo || v > hi),
                    None => false,
                };
                if !v.is_nan() && !outlier {
                    continue;
                }
                match fill {
                    Some(m) => {
                        out[i * r_count + r] = m;
                        if outlier {
                            report.outliers_replaced += 1;
                        } else {
                            report.missing_filled += 1;
                        }
                    }
                    None => pending.push((i, r)),
                }
            }
        }
    }

    if !pending.is_empty() {
        let mut region_total = vec![(0.0, 0usize); r_count];
        for (&(_, _, r), &(sum, n)) in &weekly {
            region_total[r].0 += sum;
            region_total[r].1 += n;
        }
        for (i, r) in pending {
            let (year, week, _) = group_key(&timestamps[i]);
            let (sum, n) = weekly[&(year, week, r)];
            let value = if n > 0 {
                sum / n as f64
            } else if region_total[r].1 > 0 {
                region_total[r].0 / region_total[r].1 as f64
            } else {
                return Err(Error::InsufficientData(format!(
                    "region {} has no usable values",
                    s.regions()[r]
                )));
            };
            log::warn!(
                "iqr_clean: group for {} / {} has fewer than two usable values, using weekly mean",
                timestamps[i],
                s.regions()[r]
            );
            if grid[i * r_count + r].is_nan() {
                report.missing_filled += 1;
            } else {
                report.outliers_replaced += 1;
            }
            report.fallback_fills += 1;
            out[i * r_count + r] = value;
        }
    }

    let cleaned = MobilitySeries::new(timestamps, out, s.regions().to_vec())?;
    Ok((cleaned, report))
}

#[cfg(test)]
mod tests {
    use super::super::testing::series_from_fn;
    use super::*;
    use crate::data::SLOTS_PER_DAY;

    const WEEK: usize = 7 * SLOTS_PER_DAY;

    #[test]
    fn quartiles_linear() {
        let v = [10.0, 11.0, 12.0, 13.0, 100.0];
        assert_eq!(quantile_linear(&v, 0.25), 11.0);
        assert_eq!(quantile_linear(&v, 0.75), 13.0);
        assert_eq!(quantile_linear(&[1.0, 2.0], 0.25), 1.25);
    }

    #[test]
    fn outlier_replaced_by_in_fence_mean() {
        let vals = [10.0, 11.0, 12.0, 13.0, 100.0, 11.0, 11.0];
        let s = series_from_fn(7, 1, |t, _| if t % SLOTS_PER_DAY == 0 { vals[t / SLOTS_PER_DAY] } else { 5.0 });
        // The 00:00 group of the week is {10, 11, 12, 13, 100, 11, 11}.
        let (c, rep) = iqr_clean_with_report(&s).unwrap();
        let mut sorted = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q1 = quantile_linear(&sorted, 0.25);
        let q3 = quantile_linear(&sorted, 0.75);
        assert!(100.0 > q3 + 1.5 * (q3 - q1));
        let mean = (10.0 + 11.0 + 12.0 + 13.0 + 11.0 + 11.0) / 6.0;
        assert_eq!(c.row(4 * SLOTS_PER_DAY)[0], mean);
        assert_eq!(rep.outliers_replaced, 1);
    }

    #[test]
    fn five_value_group_example() {
        // Only five days in the ISO week: Monday..Friday.
        let vals = [10.0, 11.0, 12.0, 13.0, 100.0];
        let s = series_from_fn(5, 1, |t, _| if t % SLOTS_PER_DAY == 0 { vals[t / SLOTS_PER_DAY] } else { 1.0 });
        let c = iqr_clean(&s).unwrap();
        assert_eq!(c.row(4 * SLOTS_PER_DAY)[0], 11.5);
        assert_eq!(c.row(0)[0], 10.0);
    }

    #[test]
    fn clean_group_unchanged() {
        let s = series_from_fn(14, 2, |t, r| 100.0 + (t % 7) as f64 + r as f64);
        let (c, rep) = iqr_clean_with_report(&s).unwrap();
        assert_eq!(c, s);
        assert_eq!(rep, CleanReport::default());
    }

    #[test]
    fn missing_slot_filled_with_group_mean() {
        // Two days: the 00:00 group holds {4, 6} plus a missing third day.
        let s = series_from_fn(3, 1, |t, _| match t {
            0 => 4.0,
            48 => 6.0,
            96 => f64::NAN,
            _ => 1.0,
        });
        let c = iqr_clean(&s).unwrap();
        assert_eq!(c.row(96)[0], 5.0);
        assert!(!c.has_missing());
    }

    #[test]
    fn absent_rows_are_inserted() {
        let s = series_from_fn(7, 1, |t, _| (t % 3) as f64);
        let keep: Vec<usize> = (0..s.len()).filter(|&t| t != 50 && t != 51).collect();
        let ts = keep.iter().map(|&t| s.timestamps()[t]).collect();
        let counts = keep.iter().map(|&t| s.row(t)[0]).collect();
        let gappy = MobilitySeries::new(ts, counts, vec!["R1".into()]).unwrap();
        let (c, rep) = iqr_clean_with_report(&gappy).unwrap();
        assert_eq!(c.len(), WEEK);
        assert!(c.is_regular());
        assert_eq!(rep.inserted_slots, 2);
        assert_eq!(rep.missing_filled, 2);
    }

    #[test]
    fn singleton_group_falls_back_to_weekly_mean() {
        // One day in the ISO week (Sunday 2020-08-30) followed by a full week,
        // with the Sunday 00:00 cell missing.
        let s = series_from_fn(8, 1, |t, _| if t < 6 * SLOTS_PER_DAY { 0.0 } else { 2.0 });
        let tail = s.slice(6 * SLOTS_PER_DAY..8 * SLOTS_PER_DAY);
        let mut counts = tail.counts().to_vec();
        counts[0] = f64::NAN;
        let tail = MobilitySeries::new(tail.timestamps().to_vec(), counts, vec!["R1".into()]).unwrap();
        let (c, rep) = iqr_clean_with_report(&tail).unwrap();
        assert_eq!(c.row(0)[0], 2.0);
        assert_eq!(rep.fallback_fills, 1);
    }

    #[test]
    fn off_grid_timestamp_rejected() {
        let s = series_from_fn(1, 1, |_, _| 1.0);
        let mut ts = s.timestamps()[..2].to_vec();
        ts[1] = ts[0] + chrono::Duration::minutes(20);
        let bad = MobilitySeries::new(ts, vec![1.0, 1.0], vec!["R1".into()]).unwrap();
        assert!(iqr_clean(&bad).is_err());
    }

    #[test]
    fn cleaned_values_stay_within_first_pass_fences() {
        // Replacement values are means of in-fence values, so every cleaned
        // value lies inside the fences computed on the raw group.
        let vals = [0.0, 10.0, 10.0, 10.0, 10.0, 20.0, 1000.0];
        let s = series_from_fn(7, 1, |t, _| vals[t / SLOTS_PER_DAY]);
        let c = iqr_clean(&s).unwrap();
        let mut sorted = vals.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (q1, q3) = (quantile_linear(&sorted, 0.25), quantile_linear(&sorted, 0.75));
        let (lo, hi) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
        assert!(c.counts().iter().all(|v| *v >= lo && *v <= hi));
    }

    #[test]
    fn second_pass_can_tighten_fences() {
        // Means pulled into the group shrink its IQR, so a second pass may
        // flag a value the first pass accepted: 20 survives pass one
        // (fences [2.5, 22.5]) but not pass two (fences [7, 15]).
        let vals = [0.0, 10.0, 10.0, 10.0, 10.0, 20.0, 1000.0];
        let s = series_from_fn(7, 1, |t, _| vals[t / SLOTS_PER_DAY]);
        let once = iqr_clean(&s).unwrap();
        assert_eq!(once.row(5 * SLOTS_PER_DAY)[0], 20.0);
        let twice = iqr_clean(&once).unwrap();
        assert_ne!(twice.row(5 * SLOTS_PER_DAY)[0], 20.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn idempotent_without_outliers(base in 50f64..500.0, amp in 0f64..5.0, phase in 0f64..6.3) {
                // Within every group the values are evenly spaced across the
                // week, which never trips the fences, so cleaning is a fixed
                // point.
                let s = series_from_fn(14, 2, |t, r| {
                    let slot = (t % SLOTS_PER_DAY) as f64;
                    let day = ((t / SLOTS_PER_DAY) % 7) as f64;
                    base + r as f64 + 20.0 * (phase + slot / 7.6).sin() + amp * day
                });
                let once = iqr_clean(&s).unwrap();
                let twice = iqr_clean(&once).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
