//! Dataset manifest: JSON lines, one record per directed lesion pair.
//! Volume names are resolved relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Lesion, LesionPair, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// First volume of the pair is the template.
    Forward,
    /// Second volume of the pair is the template.
    Backward,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub template_volume: String,
    pub search_volume: String,
    pub template_center_mm: Vec3,
    pub template_radius_mm: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_center_mm: Option<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_radius_mm: Option<Vec3>,
    #[serde(default)]
    pub pair_id: String,
    #[serde(default = "default_direction")]
    pub direction: Direction,
}

fn default_direction() -> Direction {
    Direction::Forward
}

impl ManifestRecord {
    pub fn to_pair(&self) -> Result<LesionPair> {
        let search_lesion = match (self.search_center_mm, self.search_radius_mm) {
            (Some(c), Some(r)) => Some(Lesion::new(c, r)?),
            _ => None,
        };
        Ok(LesionPair {
            template_volume_id: self.template_volume.clone(),
            search_volume_id: self.search_volume.clone(),
            template_lesion: Lesion::new(self.template_center_mm, self.template_radius_mm)?,
            search_lesion,
        })
    }

    pub fn template_path(&self, root: &Path) -> PathBuf {
        root.join(&self.template_volume)
    }

    pub fn search_path(&self, root: &Path) -> PathBuf {
        root.join(&self.search_volume)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}
