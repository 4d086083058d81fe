//! Provenance stamped into every file the pipeline writes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub format_version: u32,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self { config_hash: config_hash.into(), seed, format_version: FORMAT_VERSION }
    }

    /// `# config_hash=..,seed=..,format_version=..`, the first line of CSVs.
    pub fn comment_line(&self) -> String {
        format!(
            "# config_hash={},seed={},format_version={}",
            self.config_hash, self.seed, self.format_version
        )
    }

    pub fn parse_comment_line(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| Error::Format("missing provenance line".into()))?;
        let (mut hash, mut seed, mut version) = (None, None, None);
        for field in body.trim().split(',') {
            match field.split_once('=') {
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("format_version", v)) => version = v.parse().ok(),
                _ => {}
            }
        }
        match (hash, seed, version) {
            (Some(config_hash), Some(seed), Some(format_version)) => Ok(Self { config_hash, seed, format_version }),
            _ => Err(Error::Format(format!("malformed provenance line {line:?}"))),
        }
    }
}

/// CSV writer whose first line is the provenance comment.
pub(crate) fn csv_writer(path: &Path, provenance: &Provenance) -> Result<csv::Writer<std::fs::File>> {
    let mut file = std::fs::File::create(path).at(path)?;
    writeln!(file, "{}", provenance.comment_line()).at(path)?;
    Ok(csv::Writer::from_writer(file))
}

/// Reader that skips the provenance comment.
pub fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).at(path)?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

/// Provenance from the first line of a CSV artifact.
pub fn read_provenance(path: &Path) -> Result<Provenance> {
    let text = std::fs::read_to_string(path).at(path)?;
    Provenance::parse_comment_line(text.lines().next().unwrap_or(""))
}
