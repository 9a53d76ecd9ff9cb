//! Trip record CSV reader.

use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Region(String),
    Point { lon: f64, lat: f64 },
    /// Null in the source data. Such endpoints never resolve and are tallied
    /// as skipped during binning.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub origin: Endpoint,
    pub destination: Endpoint,
    /// Epoch seconds.
    pub start_time: i64,
    pub end_time: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TripCsvOptions {
    pub delimiter: char,
    /// Extra `chrono` format tried before the built-in ones, e.g.
    /// `"%m/%d/%Y %I:%M:%S %p"`.
    pub timestamp_format: Option<String>,
}

impl Default for TripCsvOptions {
    fn default() -> Self {
        TripCsvOptions {
            delimiter: ',',
            timestamp_format: None,
        }
    }
}

const BUILTIN_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
    "%m/%d/%Y %I:%M:%S %p",
];

/// Epoch seconds, RFC 3339, or a naive date-time (taken as UTC).
pub fn parse_timestamp(raw: &str, extra_format: Option<&str>) -> Option<i64> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    extra_format
        .into_iter()
        .chain(BUILTIN_FORMATS.iter().copied())
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|dt| dt.and_utc().timestamp())
}

struct Columns {
    origin_id: Option<usize>,
    dest_id: Option<usize>,
    origin_pt: Option<(usize, usize)>,
    dest_pt: Option<(usize, usize)>,
    start: usize,
    end: usize,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord, path: &Path) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let missing = |c: &str| Error::MissingColumn {
            path: path.into(),
            column: c.into(),
        };
        let pair = |a: &str, b: &str| find(a).zip(find(b));
        let cols = Columns {
            origin_id: find("origin_id"),
            dest_id: find("dest_id"),
            origin_pt: pair("origin_lon", "origin_lat"),
            dest_pt: pair("dest_lon", "dest_lat"),
            start: find("start_time").ok_or_else(|| missing("start_time"))?,
            end: find("end_time").ok_or_else(|| missing("end_time"))?,
        };
        if cols.origin_id.is_none() && cols.origin_pt.is_none() {
            return Err(missing(if find("origin_lon").is_some() { "origin_lat" } else { "origin_id" }));
        }
        if cols.dest_id.is_none() && cols.dest_pt.is_none() {
            return Err(missing(if find("dest_lon").is_some() { "dest_lat" } else { "dest_id" }));
        }
        Ok(cols)
    }

    fn endpoint(
        rec: &csv::StringRecord,
        id: Option<usize>,
        pt: Option<(usize, usize)>,
        what: &str,
    ) -> std::result::Result<Endpoint, String> {
        if let Some(v) = id.and_then(|i| rec.get(i)).map(str::trim) {
            if !v.is_empty() {
                return Ok(Endpoint::Region(v.to_string()));
            }
        }
        if let Some((ilon, ilat)) = pt {
            let lon = rec.get(ilon).map(str::trim).unwrap_or("");
            let lat = rec.get(ilat).map(str::trim).unwrap_or("");
            if lon.is_empty() || lat.is_empty() {
                return Ok(Endpoint::Unknown);
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| format!("{what}: cannot parse coordinate `{s}`"))
            };
            return Ok(Endpoint::Point {
                lon: parse(lon)?,
                lat: parse(lat)?,
            });
        }
        Ok(Endpoint::Unknown)
    }
}

/// Reads a delimited trip file with a header row. Empty endpoint cells become
/// [`Endpoint::Unknown`]; unparseable timestamps or coordinates are schema
/// errors carrying the line number.
pub fn read_trips(path: impl AsRef<Path>, opts: &TripCsvOptions) -> Result<Vec<TripRecord>> {
    let path = path.as_ref();
    if !opts.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter `{}` is not ASCII", opts.delimiter)));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter as u8)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema {
                path: path.into(),
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        // A zero-byte file has no header to validate and no trips.
        return Ok(Vec::new());
    }
    let cols = Columns::resolve(&headers, path)?;
    let fmt = opts.timestamp_format.as_deref();

    let mut trips = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Schema {
            path: path.into(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let schema = |message: String| Error::Schema {
            path: path.into(),
            line,
            message,
        };
        let time = |idx: usize, name: &str| {
            let raw = rec.get(idx).unwrap_or("");
            parse_timestamp(raw, fmt).ok_or_else(|| schema(format!("{name}: cannot parse `{raw}`")))
        };
        trips.push(TripRecord {
            origin: Columns::endpoint(&rec, cols.origin_id, cols.origin_pt, "origin").map_err(schema)?,
            destination: Columns::endpoint(&rec, cols.dest_id, cols.dest_pt, "destination")
                .map_err(schema)?,
            start_time: time(cols.start, "start_time")?,
            end_time: time(cols.end, "end_time")?,
        });
    }
    Ok(trips)
}
