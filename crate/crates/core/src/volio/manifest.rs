//! Dataset manifest: one JSON object per line with `path`, `subject_id`,
//! optional `split` and optional `mask`. Relative paths are resolved
//! against the manifest's directory.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Reads a JSON-lines manifest; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        e.path = base.join(&e.path);
        e.mask = e.mask.map(|m| base.join(m));
        entries.push(e);
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !ids.insert(e.subject_id.as_str())) {
        return Err(Error::Config(format!("duplicate subject_id {:?} in {}", dup.subject_id, path.display())));
    }
    Ok(entries)
}

/// Writes entries as JSON lines (paths are written as given).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
