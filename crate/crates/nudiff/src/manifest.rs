//! Dataset manifests: CSV with header `image_path,instance_path,origin`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Real,
    Synthetic,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Origin::Real),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(format!("unknown origin {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub instance_path: PathBuf,
    pub origin: Origin,
}

const HEADER: [&str; 3] = ["image_path", "instance_path", "origin"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, format!("CSV: {e}"))
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    for e in entries {
        let origin = e.origin.to_string();
        let row = [&*e.image_path.to_string_lossy(), &*e.instance_path.to_string_lossy(), &origin];
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::format(path, format!("expected header {}", HEADER.join(","))));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            if rec.len() != 3 {
                return Err(Error::format(path, "expected 3 columns"));
            }
            Ok(ManifestEntry {
                image_path: rec[0].into(),
                instance_path: rec[1].into(),
                origin: rec[2].parse().map_err(|m: String| Error::format(path, m))?,
            })
        })
        .collect()
}

/// Joins a real subset with synthetic pairs. Every referenced file must
/// exist.
pub fn assemble_augmented(real: &[ManifestEntry], synthetic: &[ManifestEntry]) -> Result<Vec<ManifestEntry>> {
    let all: Vec<ManifestEntry> = real.iter().chain(synthetic).cloned().collect();
    for e in &all {
        for p in [&e.image_path, &e.instance_path] {
            if !p.is_file() {
                return Err(Error::Invalid(format!("missing file {}", p.display())));
            }
        }
    }
    Ok(all)
}
