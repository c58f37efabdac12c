//! File formats and dataset directory layout.
//!
//! A dataset directory holds one subdirectory per subject containing
//! `pd.ovol`, `t2.ovol` and optionally `t1.ovol`, plus a `manifest.json`
//! listing the train/val/test splits.

pub mod checkpoint;
pub mod montage;
pub mod ovol;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::phantom::{contrast_file, DatasetManifest, Split, MANIFEST_FILE};
use crate::pipeline::{Contrast, SubjectVolumes};
use crate::volume::{normalize_volume, Volume};

pub use ovol::{read_volume, write_volume, Sidecar};

/// Reads a volume, rescaling it to `[0, 1]` when its maximum exceeds 1.
pub fn read_unit_volume(path: &Path) -> Result<Volume> {
    let v = read_volume(path)?;
    if v.max() > 1.0 {
        Ok(normalize_volume(&v)?.0)
    } else if v.min() < 0.0 {
        Err(Error::InvalidVolume(format!("{} has negative intensities", path.display())))
    } else {
        Ok(v)
    }
}

/// Loads `dir/{pd,t2}.ovol` and, when present, `dir/t1.ovol`.
pub fn load_subject(dir: &Path) -> Result<SubjectVolumes> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut sources = BTreeMap::new();
    for c in [Contrast::Pd, Contrast::T2] {
        sources.insert(c, read_unit_volume(&dir.join(contrast_file(c)))?);
    }
    let t1 = dir.join(contrast_file(Contrast::T1));
    let target = if t1.exists() {
        Some(read_unit_volume(&t1)?)
    } else {
        None
    };
    SubjectVolumes::new(&id, sources, target)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let p = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<SubjectVolumes>> {
    manifest
        .split(split)
        .iter()
        .map(|e| load_subject(&root.join(&e.id)))
        .collect()
}

/// Subdirectories of `root` that contain `file`, sorted by name.
pub fn subject_dirs(root: &Path, file: &str) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && path.join(file).exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
