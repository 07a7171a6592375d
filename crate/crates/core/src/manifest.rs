//! Dataset manifest: one JSON object per line describing a video (or a
//! single still image treated as a one-frame video). Frame paths are stored
//! relative to the manifest's directory and kept verbatim so a load/save
//! cycle is byte-identical.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub class: String,
    pub split: Split,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<VideoRecord>,
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<VideoRecord>, root: PathBuf) -> Self {
        DatasetManifest { records, root }
    }

    /// Directory that frame paths are resolved against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn frame_path(&self, record: &VideoRecord, frame: usize) -> PathBuf {
        self.root.join(&record.frames[frame])
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Loads and validates a manifest. Every class name must belong to
/// `concepts`; video ids must be unique and every record must list at least
/// one frame.
pub fn load_manifest(path: &Path, concepts: &[String]) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::Manifest(format!(
                "{}:{}: blank line",
                path.display(),
                lineno + 1
            )));
        }
        let record: VideoRecord = serde_json::from_str(line).map_err(|e| {
            Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if record.video_id.is_empty() {
            return Err(Error::Manifest(format!(
                "{}:{}: empty video_id",
                path.display(),
                lineno + 1
            )));
        }
        if !seen.insert(record.video_id.clone()) {
            return Err(Error::Manifest(format!(
                "{}:{}: duplicate video_id `{}`",
                path.display(),
                lineno + 1,
                record.video_id
            )));
        }
        if !concepts.contains(&record.class) {
            return Err(Error::Manifest(format!(
                "{}:{}: class `{}` not in vocabulary {concepts:?}",
                path.display(),
                lineno + 1,
                record.class
            )));
        }
        if record.frames.is_empty() {
            return Err(Error::Manifest(format!(
                "{}:{}: video `{}` lists no frames",
                path.display(),
                lineno + 1,
                record.video_id
            )));
        }
        if record.frames.iter().any(|f| f.is_empty()) {
            return Err(Error::Manifest(format!(
                "{}:{}: video `{}` has an empty frame path",
                path.display(),
                lineno + 1,
                record.video_id
            )));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!("{}: no records", path.display())));
    }
    Ok(DatasetManifest { records, root })
}

/// Writes records as JSON lines. Field order is fixed by the struct, so
/// saving loaded records reproduces the file byte for byte.
pub fn save_manifest(records: &[VideoRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
        out.push_str(&line);
        out.push('\n');
    }
    crate::bytesio::write_file(path, out.as_bytes())
}
