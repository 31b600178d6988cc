//! Series ingestion, synthetic generation, windowing, RevIN and patching.

mod patch;
mod revin;
mod synthetic;
mod time;
mod window;

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;

pub use patch::{patch_count, patchify, PatchSequence};
pub use revin::{revin_denormalize, revin_normalize, RevinStats, REVIN_EPS};
pub use synthetic::{day_amplitude, generate_synthetic, SyntheticSpec, DAY_AMPLITUDE_OFFSETS};
pub use time::{format_timestamp, parse_timestamp, Granularity, WindowSpan};
pub use window::{make_windows, make_windows_in, split_borders, Scaler, Split, TargetWindow, Window};

use crate::error::{Error, Result};

/// Uniformly sampled multivariate series: `values[i]` is variable `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub names: Vec<String>,
    pub start: NaiveDateTime,
    pub granularity: Granularity,
    pub values: Vec<Vec<f64>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.len()
    }

    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.granularity.advance(self.start, i as i64)
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        (0..self.len()).map(|i| self.timestamp(i)).collect()
    }

    /// Writes `date,<var>...` rows; `comment` lines are emitted first, each
    /// prefixed with `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(csv_io)?;
        for t in 0..self.len() {
            let mut rec = vec![format_timestamp(self.timestamp(t))];
            rec.extend(self.values.iter().map(|v| format!("{}", v[t])));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Loads a `date,<var1>,...` CSV. Lines starting with `#` are ignored. The
/// spacing between timestamps must be constant: either `granularity` or,
/// when `None`, the spacing of the first two rows.
pub fn load_csv(path: &Path, granularity: Option<Granularity>) -> Result<RawSeries> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    read_csv(file, granularity)
}

pub fn read_csv<R: Read>(input: R, granularity: Option<Granularity>) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingestion(format!("cannot read header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Ingestion(
            "header needs a timestamp column and at least one variable".into(),
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut values = vec![Vec::new(); names.len()];
    let mut stamps: Vec<NaiveDateTime> = Vec::new();
    let mut spacing = granularity;

    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Ingestion(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row: line,
                column: rec.len() + 1,
                detail: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).map_err(|detail| Error::Parse {
            row: line,
            column: 1,
            detail,
        })?;
        if let Some(&prev) = stamps.last() {
            let step = (ts - prev).num_seconds();
            if step <= 0 {
                return Err(Error::Ingestion(format!(
                    "timestamps not increasing at line {line}: {} follows {}",
                    format_timestamp(ts),
                    format_timestamp(prev)
                )));
            }
            match spacing {
                None => spacing = Some(Granularity::from_seconds(step)?),
                Some(g) if g.seconds() != step => {
                    return Err(Error::Ingestion(format!(
                        "gap at line {line}: {} follows {} but the granularity is {}",
                        format_timestamp(ts),
                        format_timestamp(prev),
                        g.label()
                    )));
                }
                Some(_) => {}
            }
        }
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: line,
                column: j + 2,
                detail: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: j + 2,
                    detail: format!("`{field}` is not finite"),
                });
            }
            values[j].push(v);
        }
        stamps.push(ts);
    }
    let start = *stamps
        .first()
        .ok_or_else(|| Error::Ingestion("no data rows".into()))?;
    let granularity = match spacing {
        Some(g) => g,
        None => {
            return Err(Error::Ingestion(
                "a single row does not determine the granularity".into(),
            ))
        }
    };
    Ok(RawSeries {
        names,
        start,
        granularity,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_hourly_rows() {
        let csv = "date,OT\n2017-01-01 00:00:00,1.0\n2017-01-01 01:00:00,2.5\n2017-01-01 02:00:00,-3\n";
        let s = read_csv(csv.as_bytes(), Some(Granularity::HOURLY)).unwrap();
        assert_eq!((s.len(), s.n_vars()), (3, 1));
        assert_eq!(s.values[0], vec![1.0, 2.5, -3.0]);
        assert_eq!(format_timestamp(s.timestamp(2)), "2017-01-01 02:00:00");
    }

    #[test]
    fn skipped_hour_is_rejected() {
        let csv = "date,OT\n2017-01-01 00:00:00,1\n2017-01-01 01:00:00,2\n2017-01-01 03:00:00,3\n";
        let err = read_csv(csv.as_bytes(), None).unwrap_err();
        match err {
            Error::Ingestion(msg) => assert!(msg.contains("gap") && msg.contains("03:00:00"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_monotone_is_rejected() {
        let csv = "date,x\n2017-01-01 01:00:00,1\n2017-01-01 00:00:00,2\n";
        assert!(matches!(read_csv(csv.as_bytes(), None), Err(Error::Ingestion(_))));
    }

    #[test]
    fn bad_cell_reports_location() {
        let csv = "date,a,b\n2017-01-01 00:00:00,1,2\n2017-01-01 01:00:00,3,oops\n";
        match read_csv(csv.as_bytes(), None).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_are_skipped_and_round_trip() {
        let s = RawSeries {
            names: vec!["a".into(), "b".into()],
            start: parse_timestamp("2020-02-28 22:00:00").unwrap(),
            granularity: Granularity::HOURLY,
            values: vec![vec![0.1, 0.2, 0.3, 1e-17], vec![5.0, -6.0, 7.5, 8.0]],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf, Some("generated\nseed = 3")).unwrap();
        let back = read_csv(buf.as_slice(), Some(Granularity::HOURLY)).unwrap();
        assert_eq!(back, s);
    }
}
