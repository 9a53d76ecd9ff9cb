//! Output directory handling. Every file a command writes goes through
//! [`Run`], which stamps it with the resolved-config hash: a `# config_hash`
//! comment line for delimited text, a `config_hash` field for JSON and
//! container metadata.

use std::fs;
use std::path::{Path, PathBuf};

use mobiclr::config::RunConfig;
use mobiclr::container::Container;
use serde_json::Value;

use crate::{CliError, CliResult, Global, OUT_ROOT_ENV};

pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    inputs: Vec<PathBuf>,
}

fn default_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl Run {
    /// Loads the config, applies `--set` overrides, then `shortcuts` (the
    /// command's own flags), then the global flags; validates; creates the
    /// output directory and writes `resolved_config.toml` into it.
    pub fn setup(
        g: &Global,
        command: &str,
        shortcuts: impl FnOnce(&mut RunConfig),
    ) -> CliResult<Run> {
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                mobiclr::Error::Io { .. } => CliError::usage(e.to_string()),
                other => other.into(),
            })?,
            None => RunConfig::default(),
        };
        for s in &g.overrides {
            cfg.set(s)?;
        }
        shortcuts(&mut cfg);
        if let Some(seed) = g.seed {
            cfg.seed = Some(seed);
        }
        if let Some(w) = g.workers {
            cfg.workers = w;
        }
        let out = g
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| default_root().join(command));
        cfg.out_dir = Some(out.clone());
        let config = cfg.resolved()?;
        let hash = config.hash();
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

        let mut run = Run { config, hash, out, inputs: Vec::new() };
        if let Some(p) = &g.config {
            run.input(p);
        }
        let text = format!("# config_hash = \"{}\"\n{}", run.hash, run.config.to_toml()?);
        run.write_bytes("resolved_config.toml", text.as_bytes())?;
        log::info!("{command}: config {} -> {}", &run.hash[..12], run.out.display());
        Ok(run)
    }

    /// Registers a file the command reads; outputs may never overwrite it.
    pub fn input(&mut self, path: &Path) {
        self.inputs.push(fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()));
    }

    fn target(&self, name: &str) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let resolved = fs::canonicalize(&path).unwrap_or_else(|_| path.clone());
        if self.inputs.contains(&resolved) {
            return Err(CliError::usage(format!(
                "refusing to overwrite input {}; choose another --out",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.target(name)?;
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        log::debug!("wrote {}", path.display());
        Ok(path)
    }

    /// Delimited text with a leading `# config_hash: ...` line.
    pub fn write_delimited(
        &self,
        name: &str,
        body: impl FnOnce(&mut Vec<u8>) -> mobiclr::Result<()>,
    ) -> CliResult<PathBuf> {
        let mut buf = format!("# config_hash: {}\n", self.hash).into_bytes();
        body(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_json(&self, name: &str, mut value: Value) -> CliResult<PathBuf> {
        if let Value::Object(map) = &mut value {
            map.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        let mut text = serde_json::to_string_pretty(&value).map_err(mobiclr::Error::from)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_container(&self, name: &str, mut c: Container) -> CliResult<PathBuf> {
        if let Value::Object(map) = &mut c.meta {
            map.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        let path = self.target(name)?;
        c.save(&path)?;
        log::debug!("wrote {}", path.display());
        Ok(path)
    }
}

/// `value` or a usage error naming both ways to supply it.
pub fn required(value: Option<PathBuf>, flag: &str, key: &str) -> CliResult<PathBuf> {
    value.ok_or_else(|| CliError::usage(format!("missing input: pass {flag} or set {key} in the config")))
}
