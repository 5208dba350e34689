//! Output files and their metadata sidecars.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use learn2help::models::Checkpoint;
use learn2help::{Error, Scorer64};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub const VERSION: &str = concat!("learn2help-cli ", env!("CARGO_PKG_VERSION"));

/// Sidecar written next to every CSV/JSON artifact as `<stem>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub file: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

/// Where a run writes, plus the identity stamped on every file.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
}

impl Outputs {
    pub fn new(cfg: &ExperimentConfig) -> CliResult<Self> {
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        Ok(Self {
            dir: cfg.out_dir.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn meta_path(&self, name: &str) -> PathBuf {
        let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
        self.dir.join(format!("{stem}.meta.json"))
    }

    pub fn write_meta(&self, name: &str, command: &str) -> CliResult<()> {
        let meta = Meta {
            file: name.to_string(),
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            version: VERSION.to_string(),
        };
        write_json(&self.meta_path(name), &meta)
    }

    /// Writes a CSV from a header and pre-formatted rows, then its sidecar.
    pub fn write_csv(&self, name: &str, command: &str, header: &str, rows: &[Vec<String>]) -> CliResult<()> {
        let path = self.path(name);
        let io = |e| Error::io(&path, e);
        let mut w = std::io::BufWriter::new(fs::File::create(&path).map_err(io)?);
        writeln!(w, "{header}").map_err(io)?;
        for row in rows {
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.write_meta(name, command)
    }

    pub fn write_json<V: Serialize>(&self, name: &str, command: &str, value: &V) -> CliResult<()> {
        write_json(&self.path(name), value)?;
        self.write_meta(name, command)
    }

    /// Saves a scorer checkpoint with the run identity in its metadata.
    pub fn save_checkpoint(&self, name: &str, role: &str, scorer: &Scorer64, seed: u64) -> CliResult<()> {
        let mut ck = Checkpoint::of(scorer, seed);
        ck.metadata.insert("role".into(), role.into());
        ck.metadata
            .insert("config_hash".into(), self.config_hash.clone().into());
        ck.metadata.insert("experiment_seed".into(), self.seed.into());
        ck.metadata.insert("version".into(), VERSION.into());
        ck.save(&self.path(name))?;
        Ok(())
    }
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
