//! The single run-config file shared by every command.
//!
//! A config is TOML. Every section is optional and falls back to the
//! defaults of the module it configures; unknown keys are rejected. Before
//! any work starts the config is [validated](RunConfig::validate) and a
//! resolved copy (all defaults filled in) is written next to the outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::ExperimentPlan;
use crate::ingest::{parse_timestamp, TripCsvOptions};
use crate::probe::ProbeConfig;
use crate::testkit::CitySpec;
use crate::trainer::TrainConfig;

/// Input locations. Paths are relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub trips: Option<PathBuf>,
    /// GeoJSON feature collection or a plain id list.
    pub regions: Option<PathBuf>,
    pub region_id_property: String,
    pub trip_csv: TripCsvOptions,
    /// First hour of the binning window (any format `ingest` understands).
    pub window_start: Option<String>,
    pub window_hours: usize,
    /// Binned or normalized series container.
    pub series: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    /// Target columns to probe; empty = every numeric column.
    pub target_columns: Vec<String>,
    pub checkpoint: Option<PathBuf>,
    /// Region embeddings (`.csv` or container) for `evaluate`.
    pub embeddings: Option<PathBuf>,
    /// Additional series containers, used as transfer targets.
    pub extra_series: Vec<PathBuf>,
    pub extra_targets: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            trips: None,
            regions: None,
            region_id_property: "id".into(),
            trip_csv: TripCsvOptions::default(),
            window_start: None,
            window_hours: 336,
            series: None,
            targets: None,
            target_columns: Vec::new(),
            checkpoint: None,
            embeddings: None,
            extra_series: Vec::new(),
            extra_targets: Vec::new(),
        }
    }
}

impl DataConfig {
    /// `[start, end)` of the binning window in epoch seconds.
    pub fn window(&self) -> Result<(i64, i64)> {
        let raw = self
            .window_start
            .as_deref()
            .ok_or_else(|| Error::Config("data.window_start is required for ingest".into()))?;
        let start = parse_timestamp(raw, self.trip_csv.timestamp_format.as_deref())
            .ok_or_else(|| Error::Config(format!("data.window_start: cannot parse `{raw}`")))?;
        Ok((start, start + self.window_hours as i64 * crate::ingest::BIN_SECONDS))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. When set it replaces `train.seed` and `synth.seed`.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Worker threads for experiment cells.
    pub workers: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub synth: CitySpec,
    #[serde(rename = "experiment")]
    pub experiments: Vec<ExperimentPlan>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: None,
            workers: 1,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            synth: CitySpec::default(),
            experiments: Vec::new(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies a `dotted.key=value` override. The value is read as a TOML
    /// literal when it parses as one and as a bare string otherwise, so
    /// `train.epochs=5`, `train.precision=f64` and `probe.alphas=[1.0]` all
    /// work.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::arg(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::arg(format!("override `{assignment}` has an empty key")));
        }
        let value = parse_literal(raw.trim());
        let mut doc = toml::Value::try_from(&*self).map_err(config_err)?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = doc.try_into().map_err(|e| Error::Config(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.probe.validate()?;
        self.synth.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.data.window_hours == 0 {
            return Err(Error::Config("data.window_hours must be positive".into()));
        }
        if self.data.extra_targets.len() > self.data.extra_series.len() {
            return Err(Error::Config("data.extra_targets has more entries than data.extra_series".into()));
        }
        for plan in &self.experiments {
            plan.validate()?;
        }
        Ok(())
    }

    /// Validated copy with the global seed pushed into every section.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut r = self.clone();
        if let Some(seed) = r.seed {
            r.train.seed = seed;
            r.synth.seed = seed;
        }
        r.seed = Some(r.train.seed);
        r.validate()?;
        Ok(r)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    /// Hash of the configuration, independent of where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        config_hash(&c)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// SHA-256 (hex) of the canonical JSON form of any serializable config.
/// Object keys are sorted, so field order never changes the hash.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let canonical = serde_json::to_value(config).map(|v| v.to_string()).unwrap_or_default();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}
