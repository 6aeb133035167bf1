use std::io::Write;

use serde::Serialize;

use super::{quantile_linear, MobilitySeries};
use crate::error::{invalid, Result};

/// Summary of one region column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionStats {
    pub region: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation (divisor `n − 1`).
    pub std: f64,
    pub median: f64,
}

/// Per-region statistics, ignoring missing cells.
pub fn descriptive_stats(s: &MobilitySeries) -> Result<Vec<RegionStats>> {
    (0..s.num_regions())
        .map(|r| {
            let mut v: Vec<f64> = s.region_values(r).into_iter().filter(|x| !x.is_nan()).collect();
            if v.is_empty() {
                return Err(invalid(format!("region {} has no observed values", s.regions()[r])));
            }
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(RegionStats {
                region: s.regions()[r].clone(),
                min: v[0],
                max: v[v.len() - 1],
                mean,
                std,
                median: quantile_linear(&v, 0.5),
            })
        })
        .collect()
}

/// One row per statistic, one column per region.
pub fn write_stats_csv<W: Write>(stats: &[RegionStats], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["Statistic".to_string()];
    header.extend(stats.iter().map(|s| s.region.clone()));
    w.write_record(&header)?;
    let rows: [(&str, fn(&RegionStats) -> f64); 5] = [
        ("Min", |s| s.min),
        ("Max", |s| s.max),
        ("Mean", |s| s.mean),
        ("Std", |s| s.std),
        ("Median", |s| s.median),
    ];
    for (name, get) in rows {
        let mut rec = vec![name.to_string()];
        rec.extend(stats.iter().map(|s| format!("{:.2}", get(s))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::testing::series_from_fn;
    use super::*;

    #[test]
    fn small_column() {
        let s = series_from_fn(1, 1, |t, _| [1.0, 2.0, 3.0, 4.0][t % 4]);
        let st = &descriptive_stats(&s).unwrap()[0];
        assert_eq!((st.min, st.max, st.mean, st.median), (1.0, 4.0, 2.5, 2.5));
        // Sample std of a repeated 1..4 pattern with n = 48.
        let expect = (12.0 * 5.0 / 47.0f64).sqrt();
        assert!((st.std - expect).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let s = series_from_fn(1, 2, |_, r| r as f64);
        let mut out = Vec::new();
        write_stats_csv(&descriptive_stats(&s).unwrap(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Statistic,R1,R2");
        assert_eq!(lines[3], "Mean,0.00,1.00");
        assert_eq!(lines.len(), 6);
    }
}
