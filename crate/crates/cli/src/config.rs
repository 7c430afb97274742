//! `--config` merging, error classes and run manifests.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use hybridrank::fsutil;

/// Exit-code classes: usage problems exit 1, everything else exits 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl From<hybridrank::Error> for CliError {
    fn from(e: hybridrank::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_config_file(path: &Path, known: &[String]) -> CliResult<Map<String, Value>> {
    let bytes = fsutil::read_file(path)?;
    let value: Value = serde_json::from_slice(&bytes)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(obj) = value else {
        return Err(usage(format!("config {} must hold a JSON object", path.display())));
    };
    let mut out = Map::new();
    for (k, v) in obj {
        let key = k.replace('-', "_");
        if !known.contains(&key) {
            return Err(usage(format!("unknown key {k:?} in config {}", path.display())));
        }
        if !v.is_null() {
            out.insert(key, v);
        }
    }
    Ok(out)
}

/// Config-file values overlaid by explicitly given flags. Only keys in
/// `known` are accepted from the file.
pub fn merged(cli: &impl Serialize, config: Option<&Path>, known: &[String]) -> CliResult<Map<String, Value>> {
    let mut map = match config {
        Some(p) => read_config_file(p, known)?,
        None => Map::new(),
    };
    let Value::Object(flags) = serde_json::to_value(cli).map_err(anyhow::Error::from)? else {
        unreachable!("argument structs serialize to objects");
    };
    for (k, v) in flags {
        if !v.is_null() {
            map.insert(k, v);
        }
    }
    Ok(map)
}

/// Removes `keys` from `map` into a separate object.
pub fn take_keys(map: &mut Map<String, Value>, keys: &[&str]) -> Map<String, Value> {
    keys.iter()
        .filter_map(|&k| map.remove(k).map(|v| (k.to_string(), v)))
        .collect()
}

pub fn parse<T: DeserializeOwned>(map: Map<String, Value>, what: &str) -> CliResult<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| usage(format!("{what}: {e}")))
}

pub fn to_object(value: &impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

pub fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| usage(format!("missing required --{}", flag.replace('_', "-"))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command: `config` is accepted back by
/// `--config`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: Map<String, Value>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Map<String, Value>, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn record(path: &Path) -> CliResult<FileRecord> {
        Ok(FileRecord {
            path: path.display().to_string(),
            sha256: fsutil::sha256_file(path)?,
        })
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(Self::record(path)?);
        Ok(())
    }

    /// A JSON manifest plus every file it references.
    pub fn input_manifest(&mut self, path: &Path) -> CliResult<()> {
        self.input(path)?;
        for f in referenced_files(path)? {
            self.input(&f)?;
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.push(Self::record(path)?);
        Ok(())
    }

    pub fn output_manifest(&mut self, path: &Path) -> CliResult<()> {
        self.output(path)?;
        for f in referenced_files(path)? {
            self.output(&f)?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(anyhow::Error::from)?;
        bytes.push(b'\n');
        fsutil::write_atomic(path, &bytes)?;
        Ok(())
    }
}

/// Top-level string fields of a JSON manifest that name existing files
/// relative to it.
pub fn referenced_files(manifest: &Path) -> CliResult<Vec<PathBuf>> {
    let bytes = fsutil::read_file(manifest)?;
    let value: Value = serde_json::from_slice(&bytes).map_err(anyhow::Error::from)?;
    let dir = manifest.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    if let Value::Object(obj) = value {
        for (k, v) in obj {
            if k == "format" {
                continue;
            }
            if let Value::String(s) = v {
                let p = dir.join(&s);
                if p.is_file() {
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

/// `<path>.<suffix>` next to `path`.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
