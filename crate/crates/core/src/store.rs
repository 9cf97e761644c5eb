//! On-disk artifacts: network datasets and expert buffer sets.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::ExpertBuffer;
use crate::netgen::{NetworkConfig, NetworkState};
use crate::seed::sha256_hex;

pub const DATASET_FORMAT: &str = "diffalloc.networks";
pub const BUFFERS_FORMAT: &str = "diffalloc.buffers";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub network_id: usize,
    pub split: Split,
    pub seed: u64,
    pub state: NetworkState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    pub version: u32,
    /// Network parameters with the calibrated `f_min` filled in.
    pub network: NetworkConfig,
    pub networks: Vec<NetworkRecord>,
}

impl Dataset {
    pub fn new(network: NetworkConfig, networks: Vec<NetworkRecord>) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: FORMAT_VERSION,
            network,
            networks,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &NetworkRecord> {
        self.networks.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, network_id: usize) -> Option<&NetworkRecord> {
        self.networks.iter().find(|r| r.network_id == network_id)
    }

    fn check(&self) -> Result<()> {
        check_header(&self.format, self.version, DATASET_FORMAT)?;
        self.network.validate()?;
        for r in &self.networks {
            r.state.check()?;
            if r.state.n() != self.network.n_pairs {
                return Err(Error::Format(format!("network {} has the wrong size", r.network_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSet {
    pub format: String,
    pub version: u32,
    /// Digest of the dataset file the buffers were computed from.
    pub dataset_digest: String,
    pub buffers: Vec<ExpertBuffer>,
}

impl BufferSet {
    pub fn new(dataset_digest: String, buffers: Vec<ExpertBuffer>) -> Self {
        Self {
            format: BUFFERS_FORMAT.into(),
            version: FORMAT_VERSION,
            dataset_digest,
            buffers,
        }
    }

    pub fn get(&self, network_id: usize) -> Option<&ExpertBuffer> {
        self.buffers.iter().find(|b| b.network_id == network_id)
    }

    /// The buffer of `network_id`, or a contract error naming it.
    pub fn require(&self, network_id: usize) -> Result<&ExpertBuffer> {
        self.get(network_id)
            .ok_or_else(|| Error::Contract(format!("no expert buffer for network {network_id}")))
    }

    fn check(&self) -> Result<()> {
        check_header(&self.format, self.version, BUFFERS_FORMAT)?;
        for b in &self.buffers {
            if b.samples.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "buffer {} holds non-finite powers",
                    b.network_id
                )));
            }
        }
        Ok(())
    }
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected || version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "expected {expected} v{FORMAT_VERSION}, found {format} v{version}"
        )));
    }
    Ok(())
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Writes pretty JSON and returns the digest of the written bytes.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let d: Dataset = read_json(path)?;
    d.check()?;
    Ok(d)
}

pub fn read_buffers(path: &Path) -> Result<BufferSet> {
    let b: BufferSet = read_json(path)?;
    b.check()?;
    Ok(b)
}

/// Reads a buffer set and verifies it was computed from the dataset at `dataset_path`.
pub fn read_buffers_for(path: &Path, dataset_path: &Path) -> Result<BufferSet> {
    let buffers = read_buffers(path)?;
    let digest = file_digest(dataset_path)?;
    if buffers.dataset_digest != digest {
        return Err(Error::Integrity(format!(
            "{} was computed from a different dataset than {}",
            path.display(),
            dataset_path.display()
        )));
    }
    Ok(buffers)
}
