use std::fmt;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Accepts `YYYY-MM-DD HH:MM:SS`, the `T`-separated ISO form, `YYYY-MM-DD
/// HH:MM`, or a bare date.
pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = s.trim();
    for fmt in [TIMESTAMP_FORMAT, "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight is valid"))
        .map_err(|_| format!("`{s}` is not an ISO-8601 timestamp"))
}

/// Fixed sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Granularity {
    seconds: i64,
}

impl Granularity {
    pub const HOURLY: Granularity = Granularity { seconds: 3600 };
    pub const DAILY: Granularity = Granularity { seconds: 86_400 };
    pub const QUARTER_HOUR: Granularity = Granularity { seconds: 900 };

    pub fn from_seconds(seconds: i64) -> Result<Self> {
        if seconds <= 0 {
            return Err(Error::Config(format!("granularity of {seconds} s")));
        }
        Ok(Self { seconds })
    }

    pub fn seconds(self) -> i64 {
        self.seconds
    }

    pub fn advance(self, t: NaiveDateTime, steps: i64) -> NaiveDateTime {
        t + TimeDelta::seconds(self.seconds * steps)
    }

    /// Human-readable label used in temporal prompts.
    pub fn label(self) -> String {
        let s = self.seconds;
        match s {
            86_400 => "daily".into(),
            3600 => "hourly".into(),
            _ if s % 86_400 == 0 => format!("{}-day", s / 86_400),
            _ if s % 3600 == 0 => format!("{}-hour", s / 3600),
            _ if s % 60 == 0 => format!("{}-minute", s / 60),
            _ => format!("{s}-second"),
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let l = label.trim().to_ascii_lowercase();
        let fixed = match l.as_str() {
            "hourly" | "h" | "1h" => Some(3600),
            "daily" | "d" | "1d" => Some(86_400),
            "minutely" | "min" | "t" => Some(60),
            _ => None,
        };
        if let Some(s) = fixed {
            return Self::from_seconds(s);
        }
        let split = l.find(|c: char| !c.is_ascii_digit()).unwrap_or(l.len());
        let (num, unit) = l.split_at(split);
        let n: i64 = num
            .parse()
            .map_err(|_| Error::Config(format!("unknown granularity `{label}`")))?;
        let unit_secs = match unit.trim_start_matches('-') {
            "second" | "s" | "sec" => 1,
            "minute" | "min" | "t" => 60,
            "hour" | "h" => 3600,
            "day" | "d" => 86_400,
            _ => return Err(Error::Config(format!("unknown granularity `{label}`"))),
        };
        Self::from_seconds(n * unit_secs)
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl TryFrom<String> for Granularity {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<Granularity> for String {
    fn from(g: Granularity) -> String {
        g.label()
    }
}

/// Start of a window plus its sampling interval and length in steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpan {
    pub start: NaiveDateTime,
    pub granularity: Granularity,
    pub len: usize,
}

impl WindowSpan {
    pub fn new(start: NaiveDateTime, granularity: Granularity, len: usize) -> Self {
        Self {
            start,
            granularity,
            len,
        }
    }

    /// Timestamp of step `i` (may lie past the end of the window).
    pub fn at(&self, i: i64) -> NaiveDateTime {
        self.granularity.advance(self.start, i)
    }

    /// Timestamp of the final observed step.
    pub fn end(&self) -> NaiveDateTime {
        self.at(self.len as i64 - 1)
    }

    /// The same-length window shifted forward by `steps`.
    pub fn advanced(&self, steps: usize) -> Self {
        Self {
            start: self.at(steps as i64),
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for secs in [1, 60, 900, 3600, 7200, 86_400, 172_800] {
            let g = Granularity::from_seconds(secs).unwrap();
            assert_eq!(Granularity::parse(&g.label()).unwrap(), g);
        }
        assert_eq!(Granularity::QUARTER_HOUR.label(), "15-minute");
        assert_eq!(Granularity::parse("15min").unwrap(), Granularity::QUARTER_HOUR);
        assert!(Granularity::parse("fortnightly").is_err());
    }

    #[test]
    fn timestamp_forms() {
        let a = parse_timestamp("2017-01-01 00:00:00").unwrap();
        assert_eq!(parse_timestamp("2017-01-01T00:00:00").unwrap(), a);
        assert_eq!(parse_timestamp("2017-01-01").unwrap(), a);
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn window_span_end_and_advance() {
        let w = WindowSpan::new(parse_timestamp("2017-01-01").unwrap(), Granularity::HOURLY, 48);
        assert_eq!(format_timestamp(w.end()), "2017-01-02 23:00:00");
        assert_eq!(format_timestamp(w.advanced(24).start), "2017-01-02 00:00:00");
    }
}
