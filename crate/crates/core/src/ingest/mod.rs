//! Trip records to hourly inbound/outbound count tensors.

mod geo;
mod trips;

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};

pub use geo::{spatial_join, RegionSet, RegionShape, Ring};
pub use trips::{parse_timestamp, read_trips, Endpoint, TripCsvOptions, TripRecord};

pub const INBOUND: usize = 0;
pub const OUTBOUND: usize = 1;
pub const BIN_SECONDS: i64 = 3600;

/// Hourly trip counts, `N x T x 2`. Channel [`INBOUND`] counts arrivals,
/// channel [`OUTBOUND`] departures.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilitySeries {
    pub counts: Array3<u32>,
    /// Epoch seconds of the start of bin 0.
    pub time_origin: i64,
    pub region_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinDiagnostics {
    pub trips_read: usize,
    pub unresolved_origin: usize,
    pub unresolved_destination: usize,
    pub start_outside_window: usize,
    pub end_outside_window: usize,
    /// Trips with `end_time < start_time`; skipped entirely.
    pub invalid_times: usize,
}

impl BinDiagnostics {
    fn absorb(&mut self, other: &BinDiagnostics) {
        self.trips_read += other.trips_read;
        self.unresolved_origin += other.unresolved_origin;
        self.unresolved_destination += other.unresolved_destination;
        self.start_outside_window += other.start_outside_window;
        self.end_outside_window += other.end_outside_window;
        self.invalid_times += other.invalid_times;
    }
}

fn resolve(ep: &Endpoint, regions: &RegionSet) -> Result<Option<usize>> {
    match ep {
        Endpoint::Region(id) => Ok(regions.position(id)),
        Endpoint::Point { lon, lat } => regions.locate(*lon, *lat),
        Endpoint::Unknown => Ok(None),
    }
}

fn hour_bin(ts: i64, start: i64, end: i64) -> Option<usize> {
    (start..end)
        .contains(&ts)
        .then(|| ((ts - start) / BIN_SECONDS) as usize)
}

/// Counts departures at the origin (by `start_time`) and arrivals at the
/// destination (by `end_time`) into hourly bins over `[window_start,
/// window_end)`. Each channel is filled independently: a trip that departs
/// inside the window but arrives after it still counts as a departure.
pub fn bin_trips(
    trips: &[TripRecord],
    regions: &RegionSet,
    window_start: i64,
    window_end: i64,
) -> Result<(MobilitySeries, BinDiagnostics)> {
    if window_end <= window_start {
        return Err(Error::arg("window end must be after window start"));
    }
    if (window_end - window_start) % BIN_SECONDS != 0 {
        return Err(Error::arg("window length must be a whole number of hours"));
    }
    let t = ((window_end - window_start) / BIN_SECONDS) as usize;
    let mut counts = Array3::<u32>::zeros((regions.len(), t, 2));
    let mut diag = BinDiagnostics::default();

    for trip in trips {
        diag.trips_read += 1;
        if trip.end_time < trip.start_time {
            diag.invalid_times += 1;
            continue;
        }
        match resolve(&trip.origin, regions)? {
            None => diag.unresolved_origin += 1,
            Some(r) => match hour_bin(trip.start_time, window_start, window_end) {
                Some(h) => counts[[r, h, OUTBOUND]] += 1,
                None => diag.start_outside_window += 1,
            },
        }
        match resolve(&trip.destination, regions)? {
            None => diag.unresolved_destination += 1,
            Some(r) => match hour_bin(trip.end_time, window_start, window_end) {
                Some(h) => counts[[r, h, INBOUND]] += 1,
                None => diag.end_outside_window += 1,
            },
        }
    }
    let series = MobilitySeries {
        counts,
        time_origin: window_start,
        region_ids: regions.ids().to_vec(),
    };
    Ok((series, diag))
}

/// Bins trip shards independently and merges by elementwise addition.
pub fn bin_trip_shards<'a, I>(
    shards: I,
    regions: &RegionSet,
    window_start: i64,
    window_end: i64,
) -> Result<(MobilitySeries, BinDiagnostics)>
where
    I: IntoIterator<Item = &'a [TripRecord]>,
{
    let (mut acc, mut diag) = bin_trips(&[], regions, window_start, window_end)?;
    for shard in shards {
        let (part, d) = bin_trips(shard, regions, window_start, window_end)?;
        acc.merge(&part)?;
        diag.absorb(&d);
    }
    Ok((acc, diag))
}

impl MobilitySeries {
    pub fn num_regions(&self) -> usize {
        self.counts.shape()[0]
    }

    pub fn num_steps(&self) -> usize {
        self.counts.shape()[1]
    }

    pub fn merge(&mut self, other: &MobilitySeries) -> Result<()> {
        if self.counts.shape() != other.counts.shape()
            || self.time_origin != other.time_origin
            || self.region_ids != other.region_ids
        {
            return Err(Error::arg("cannot merge series with different layouts"));
        }
        self.counts += &other.counts;
        Ok(())
    }

    pub fn as_f64(&self) -> Array3<f64> {
        self.counts.mapv(f64::from)
    }

    pub fn to_container(&self) -> Container {
        let (n, t, c) = self.counts.dim();
        let mut out = Container::new(
            "mobility_series",
            json!({
                "region_ids": self.region_ids,
                "time_origin": self.time_origin,
                "bin_seconds": BIN_SECONDS,
                "channels": ["inbound", "outbound"],
            }),
        );
        out.push(Tensor::u32("counts", &[n, t, c], self.counts.iter().copied().collect()));
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (region_ids, time_origin) = read_layout(c)?;
        let t = c.require("counts")?;
        let data = t
            .as_u32()
            .ok_or_else(|| Error::arg("`counts` must be u32"))?
            .to_vec();
        let shape = shape3(&t.shape)?;
        if shape.0 != region_ids.len() || shape.2 != 2 {
            return Err(Error::shape(format!("({}, T, 2)", region_ids.len()), format!("{shape:?}")));
        }
        Ok(MobilitySeries {
            counts: Array3::from_shape_vec(shape, data).expect("shape checked"),
            time_origin,
            region_ids,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load_kind(path, "mobility_series")?)
    }

    /// Long-format export: `region_id,hour,timestamp,inbound,outbound`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["region_id", "hour", "timestamp", "inbound", "outbound"])?;
        for (n, id) in self.region_ids.iter().enumerate() {
            for h in 0..self.num_steps() {
                out.write_record([
                    id.clone(),
                    h.to_string(),
                    (self.time_origin + h as i64 * BIN_SECONDS).to_string(),
                    self.counts[[n, h, INBOUND]].to_string(),
                    self.counts[[n, h, OUTBOUND]].to_string(),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn read_layout(c: &Container) -> Result<(Vec<String>, i64)> {
    let region_ids: Vec<String> = serde_json::from_value(c.meta["region_ids"].clone())?;
    let time_origin = c.meta["time_origin"]
        .as_i64()
        .ok_or_else(|| Error::arg("container is missing `time_origin`"))?;
    Ok((region_ids, time_origin))
}

fn shape3(s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape("rank-3 tensor", format!("{s:?}"))),
    }
}

/// Z-scored series plus the statistics used to produce it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub values: Array3<f64>,
    /// `N x 2` per-region, per-channel time means.
    pub means: Array2<f64>,
    /// `N x 2` population standard deviations.
    pub stds: Array2<f64>,
    pub region_ids: Vec<String>,
    pub time_origin: i64,
}

impl NormalizedSeries {
    pub fn num_regions(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_steps(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `idx` of the dataset, in that order.
    pub fn select(&self, idx: &[usize]) -> NormalizedSeries {
        NormalizedSeries {
            values: self.values.select(Axis(0), idx),
            means: self.means.select(Axis(0), idx),
            stds: self.stds.select(Axis(0), idx),
            region_ids: idx.iter().map(|&i| self.region_ids[i].clone()).collect(),
            time_origin: self.time_origin,
        }
    }

    pub fn to_container(&self) -> Container {
        let (n, t, c) = self.values.dim();
        let mut out = Container::new(
            "normalized_series",
            json!({
                "region_ids": self.region_ids,
                "time_origin": self.time_origin,
                "bin_seconds": BIN_SECONDS,
            }),
        );
        out.push(Tensor::f64("values", &[n, t, c], self.values.iter().copied().collect()));
        out.push(Tensor::f64("means", &[n, c], self.means.iter().copied().collect()));
        out.push(Tensor::f64("stds", &[n, c], self.stds.iter().copied().collect()));
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (region_ids, time_origin) = read_layout(c)?;
        let n = region_ids.len();
        let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = c.require(name)?;
            let data = t
                .as_f64()
                .ok_or_else(|| Error::arg(format!("`{name}` must be f64")))?;
            Ok((t.shape.clone(), data.to_vec()))
        };
        let (vshape, values) = get("values")?;
        let (t, ch) = match shape3(&vshape)? {
            (rows, t, 2) if rows == n => (t, 2),
            other => return Err(Error::shape(format!("({n}, T, 2)"), format!("{other:?}"))),
        };
        let stat = |name: &str| -> Result<Array2<f64>> {
            let (shape, data) = get(name)?;
            if shape != [n, ch] {
                return Err(Error::shape(format!("{name} ({n}, {ch})"), format!("{shape:?}")));
            }
            Ok(Array2::from_shape_vec((n, ch), data).expect("shape checked"))
        };
        Ok(NormalizedSeries {
            values: Array3::from_shape_vec((n, t, ch), values).expect("shape checked"),
            means: stat("means")?,
            stds: stat("stds")?,
            region_ids,
            time_origin,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load_kind(path, "normalized_series")?)
    }

    /// Loads either a normalized dataset or a raw count series, z-scoring the
    /// latter.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(path.as_ref())?;
        match c.kind.as_str() {
            "normalized_series" => Self::from_container(&c),
            "mobility_series" => Ok(zscore(&MobilitySeries::from_container(&c)?)),
            other => Err(Error::Container {
                path: path.as_ref().to_path_buf(),
                message: format!("expected a mobility dataset, found `{other}`"),
            }),
        }
    }

    /// The `T x 2` series of region `n`.
    pub fn region(&self, n: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), n)
    }

    /// Raw-series feature matrix: the listed channels laid end to end, so
    /// row `n` is `[x_n[.., c0], x_n[.., c1], ...]` (`N x T*len`).
    pub fn flattened(&self, channels: &[usize]) -> Result<Array2<f64>> {
        let (n, t, c) = self.values.dim();
        if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
            return Err(Error::arg(format!("channel {bad} out of range (series has {c})")));
        }
        let mut out = Array2::zeros((n, t * channels.len()));
        for (k, &ch) in channels.iter().enumerate() {
            out.slice_mut(ndarray::s![.., k * t..(k + 1) * t])
                .assign(&self.values.index_axis(Axis(2), ch));
        }
        Ok(out)
    }
}

/// Standard deviations at or below this fraction of `1 + |mean|` are treated
/// as zero, so float round-off in a constant channel cannot blow up into
/// unit-variance noise.
const ZERO_VARIANCE_REL: f64 = 1e-12;

/// Per-region, per-channel z-score over the time axis with population
/// standard deviation. Zero-variance channels become all zeros.
pub fn zscore_array(x: ArrayView3<f64>) -> (Array3<f64>, Array2<f64>, Array2<f64>) {
    let (n, t, c) = x.dim();
    assert!(t >= 1, "z-score needs at least one time step");
    let mut values = Array3::<f64>::zeros((n, t, c));
    let mut means = Array2::<f64>::zeros((n, c));
    let mut stds = Array2::<f64>::zeros((n, c));
    for r in 0..n {
        for ch in 0..c {
            let col = x.slice(s![r, .., ch]);
            let mean = col.sum() / t as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            let std = var.sqrt();
            means[[r, ch]] = mean;
            stds[[r, ch]] = std;
            if std > ZERO_VARIANCE_REL * (1.0 + mean.abs()) {
                values
                    .slice_mut(s![r, .., ch])
                    .assign(&col.mapv(|v| (v - mean) / std));
            }
        }
    }
    (values, means, stds)
}

pub fn zscore(series: &MobilitySeries) -> NormalizedSeries {
    let (values, means, stds) = zscore_array(series.as_f64().view());
    NormalizedSeries {
        values,
        means,
        stds,
        region_ids: series.region_ids.clone(),
        time_origin: series.time_origin,
    }
}
