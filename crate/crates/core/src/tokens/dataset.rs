//! Trajectory dataset directories.
//!
//! Layout on disk:
//!
//! ```text
//! <dataset>/
//!   manifest.json
//!   samples/<id>/tokens.qtns      (T, X, Y, Z, C) float64
//!   samples/<id>/control.qtns     (T,) float64
//!   samples/<id>/boundary.qtns    (T, 2) float64, field systems only
//! ```
//!
//! The manifest lists every tensor file with a SHA-256 checksum; reads verify
//! them. Normalization statistics are computed over the training split only.

use super::qtns::{self, QtnsTensor};
use super::{ChannelLayout, GridDims, NormStats, TokenGrid};
use crate::error::{Error, Result};
use crate::qstate::C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the dataset root.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// One of: train, val, test, ood1..ood5.
    pub split: String,
    /// Sampled generation parameters (t_off, t0, t_on, ...).
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
    pub files: BTreeMap<String, FileEntry>,
    /// Set when the solver failed for this sample; tensors are then absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// System identifier: "qubit" or "eit".
    pub system: String,
    pub grid: GridDims,
    pub layout: ChannelLayout,
    pub channel_names: Vec<String>,
    /// Per-channel statistics over the training split, when one exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormStats>,
    /// Desk-scale factor applied to the full-scale sample counts.
    pub scale_factor: f64,
    pub dataset_seed: u64,
    /// Simulator configuration and derived physical constants, recorded so
    /// the learning task is self-describing.
    pub generation: BTreeMap<String, serde_json::Value>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split_ids(&self, split: &str) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split && s.failure.is_none())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn splits(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.samples {
            if !seen.contains(&s.split) {
                seen.push(s.split.clone());
            }
        }
        seen
    }

    /// Stable content hash of the manifest (metrics reports cite it).
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex_digest(&bytes)
    }
}

/// One trajectory held in memory.
#[derive(Clone, Debug)]
pub struct SampleData {
    pub tokens: TokenGrid,
    /// Control profile per stored time step.
    pub control: Vec<f64>,
    /// Probe boundary series at z = 0, when the system has a field.
    pub boundary: Option<Vec<C64>>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Option<SampleData>>,
}

impl TrajectoryDataset {
    pub fn sample(&self, idx: usize) -> Result<&SampleData> {
        self.samples
            .get(idx)
            .and_then(|s| s.as_ref())
            .ok_or_else(|| Error::data(format!("sample {idx} is missing or failed")))
    }

    /// Compute normalization statistics from the training split and store
    /// them in the manifest.
    pub fn finalize_norm_stats(&mut self) -> Result<()> {
        let train = self.manifest.split_ids("train");
        if train.is_empty() {
            return Ok(());
        }
        let grids: Vec<&TokenGrid> = train
            .iter()
            .map(|&i| self.sample(i).map(|s| &s.tokens))
            .collect::<Result<_>>()?;
        self.manifest.norm_stats = Some(NormStats::compute(&grids)?);
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensor_checked(
    root: &Path,
    rel: &str,
    tensor: &QtnsTensor,
) -> Result<FileEntry> {
    let bytes = qtns::encode(tensor)?;
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, &bytes)?;
    Ok(FileEntry { path: rel.to_string(), sha256: hex_digest(&bytes) })
}

/// Write a dataset directory. Sample records in the manifest are completed
/// with file entries and checksums; `overwrite` guards an existing manifest.
pub fn write_dataset(
    dataset: &mut TrajectoryDataset,
    root: &Path,
    overwrite: bool,
) -> Result<()> {
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() && !overwrite {
        return Err(Error::invalid(format!(
            "{} already exists (pass force to overwrite)",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(root)?;
    for (idx, data) in dataset.samples.iter().enumerate() {
        let record = &mut dataset.manifest.samples[idx];
        let Some(data) = data else { continue };
        let dir = format!("samples/{}", record.id);
        let g = &data.tokens;
        let token_tensor = QtnsTensor::f64(
            g.shape().iter().map(|&d| d as u64).collect(),
            g.data.clone(),
        );
        record.files.insert(
            "tokens".into(),
            write_tensor_checked(root, &format!("{dir}/tokens.qtns"), &token_tensor)?,
        );
        let control_tensor =
            QtnsTensor::f64(vec![data.control.len() as u64], data.control.clone());
        record.files.insert(
            "control".into(),
            write_tensor_checked(root, &format!("{dir}/control.qtns"), &control_tensor)?,
        );
        if let Some(boundary) = &data.boundary {
            let mut flat = Vec::with_capacity(boundary.len() * 2);
            for v in boundary {
                flat.push(v.re);
                flat.push(v.im);
            }
            let tensor = QtnsTensor::f64(vec![boundary.len() as u64, 2], flat);
            record.files.insert(
                "boundary".into(),
                write_tensor_checked(root, &format!("{dir}/boundary.qtns"), &tensor)?,
            );
        }
    }
    let json = serde_json::to_vec_pretty(&dataset.manifest)?;
    fs::write(&manifest_path, json)?;
    Ok(())
}

fn read_tensor_checked(root: &Path, entry: &FileEntry) -> Result<QtnsTensor> {
    let path = root.join(&entry.path);
    let bytes = fs::read(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let digest = hex_digest(&bytes);
    if digest != entry.sha256 {
        return Err(Error::data(format!(
            "checksum mismatch for {}: manifest {} vs file {digest}",
            entry.path, entry.sha256
        )));
    }
    qtns::decode(&bytes)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(root.join("manifest.json"))
        .map_err(|e| Error::data(format!("{}: {e}", root.join("manifest.json").display())))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::data(format!(
            "manifest format version {} is not supported (expected {MANIFEST_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Read a dataset directory back, verifying every checksum.
pub fn read_dataset(root: &Path) -> Result<TrajectoryDataset> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        if record.failure.is_some() {
            samples.push(None);
            continue;
        }
        let tokens_entry = record
            .files
            .get("tokens")
            .ok_or_else(|| Error::data(format!("sample {} lists no token file", record.id)))?;
        let raw = read_tensor_checked(root, tokens_entry)?;
        if raw.dims.len() != 5 {
            return Err(Error::data(format!(
                "sample {}: token tensor must be rank 5, got {:?}",
                record.id, raw.dims
            )));
        }
        let dims = GridDims::new(
            raw.dims[0] as usize,
            raw.dims[1] as usize,
            raw.dims[2] as usize,
            raw.dims[3] as usize,
        );
        if dims != manifest.grid || raw.dims[4] as usize != manifest.layout.channels() {
            return Err(Error::data(format!(
                "sample {}: tensor shape {:?} disagrees with the manifest grid",
                record.id, raw.dims
            )));
        }
        let tokens = TokenGrid { dims, layout: manifest.layout, data: raw.data };

        let control_entry = record
            .files
            .get("control")
            .ok_or_else(|| Error::data(format!("sample {} lists no control file", record.id)))?;
        let control = read_tensor_checked(root, control_entry)?.data;

        let boundary = match record.files.get("boundary") {
            Some(entry) => {
                let raw = read_tensor_checked(root, entry)?;
                Some(
                    raw.data
                        .chunks_exact(2)
                        .map(|c| C64::new(c[0], c[1]))
                        .collect::<Vec<_>>(),
                )
            }
            None => None,
        };
        samples.push(Some(SampleData { tokens, control, boundary }));
    }
    Ok(TrajectoryDataset { manifest, samples })
}

/// Recursively hash a dataset directory (manifest plus tensors) so tests can
/// assert byte-identical regeneration.
pub fn tree_digest(root: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        hasher.update(fs::read(&f)?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
