use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;

use super::MobilitySeries;
use crate::error::{Error, Result};

/// Timestamp layout of the count files.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

const ACCEPTED_FORMATS: [&str; 3] = [TIMESTAMP_FORMAT, "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    ACCEPTED_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<MobilitySeries> {
    let file = std::fs::File::open(path)?;
    parse_csv(file)
}

/// Parses `datetime,R1,...,Rk` rows. Empty cells become missing values;
/// absent rows are left as gaps for [`super::iqr_clean`].
pub fn parse_csv<R: Read>(reader: R) -> Result<MobilitySeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file, expected header `datetime,R1,...`".into(),
            })
        }
    };
    let first = header.get(0).unwrap_or("").trim_start_matches('\u{feff}');
    if first != "datetime" || header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must start with `datetime` followed by region columns, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let regions: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let width = header.len();

    let mut timestamps = Vec::new();
    let mut counts = Vec::new();
    let mut seen = HashSet::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let raw_ts = &rec[0];
        let ts = parse_timestamp(raw_ts).ok_or_else(|| Error::Parse {
            line,
            message: format!("bad timestamp `{raw_ts}`"),
        })?;
        if !seen.insert(ts) {
            return Err(Error::Ordering(format!("duplicate timestamp {raw_ts} at line {line}")));
        }
        if let Some(prev) = timestamps.last() {
            if ts < *prev {
                return Err(Error::Ordering(format!(
                    "{raw_ts} at line {line} precedes the previous row"
                )));
            }
        }
        for cell in rec.iter().skip(1) {
            if cell.is_empty() {
                counts.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad count `{cell}`"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("count must be a nonnegative number, got `{cell}`"),
                });
            }
            counts.push(v);
        }
        timestamps.push(ts);
    }
    MobilitySeries::new(timestamps, counts, regions)
}

/// Writes the series in the same layout [`parse_csv`] reads.
pub fn write_csv<W: Write>(s: &MobilitySeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["datetime".to_string()];
    header.extend(s.regions().iter().cloned());
    w.write_record(&header)?;
    for (t, ts) in s.timestamps().iter().enumerate() {
        let mut rec = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
        rec.extend(s.row(t).iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows() {
        let text = "datetime,R1,R2,R3,R4,R5,R6\r\n2020-08-24 00:00:00,1,2,3,4,5,6\r\n2020-08-24 00:30:00,7,8,9,10,11,12\r\n";
        let s = parse_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.regions().len(), 6);
        assert_eq!(s.row(1), &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn duplicate_timestamp_named() {
        let text = "datetime,R1\n2020-08-24 00:00:00,1\n2020-08-24 00:00:00,2\n";
        let err = parse_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Ordering(ref m) if m.contains("2020-08-24 00:00:00")));
    }

    #[test]
    fn out_of_order_rejected() {
        let text = "datetime,R1\n2020-08-24 01:00:00,1\n2020-08-24 00:30:00,2\n";
        assert!(matches!(parse_csv(text.as_bytes()), Err(Error::Ordering(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "datetime,R1\n2020-08-24 00:00:00,1\n2020-08-24 00:30:00,abc\n";
        match parse_csv(text.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let text = "datetime,R1\n2020-08-24 00:00:00,-4\n";
        assert!(matches!(parse_csv(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(parse_csv(&b""[..]), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_csv(&b"time,R1\n"[..]), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_cell_is_missing_and_round_trips() {
        let text = "datetime,R1,R2\n2020-08-24 00:00:00,1,\n2020-08-24 00:30:00,2.5,3\n";
        let s = parse_csv(text.as_bytes()).unwrap();
        assert!(s.row(0)[1].is_nan());
        let mut out = Vec::new();
        write_csv(&s, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
