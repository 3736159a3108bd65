//! JSONL manifests with inline frames or a sidecar frames archive.
//!
//! Each line is an object with `id`, `reference`, `dataset`, optional `dialect`, and exactly one
//! of `frames` (array of rows) or `frames_path` (archive file relative to the manifest). An
//! archive is `"DFKF" | version: u32 LE` followed by one rank-2 tensor per utterance, named by id.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Utterance};
use crate::model::checkpoint::canonical_json;
use crate::model::Mat;
use crate::tensorfile::{read_tensors, write_tensor, Cursor};

pub const FRAMES_MAGIC: &[u8; 4] = b"DFKF";
pub const FRAMES_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    reference: String,
    dataset: String,
    #[serde(default)]
    dialect: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames_path: Option<String>,
}

/// Where [`write_manifest`] puts frame data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FramesStorage {
    Inline,
    /// Archive file name, written next to the manifest.
    Sidecar(String),
}

pub fn frames_archive_bytes<'a>(items: impl IntoIterator<Item = (&'a str, &'a Mat)>) -> Vec<u8> {
    let mut sorted: Vec<(&str, &Mat)> = items.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = Vec::new();
    out.extend_from_slice(FRAMES_MAGIC);
    out.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    for (id, m) in sorted {
        write_tensor(&mut out, id, &[m.rows, m.cols], &m.data);
    }
    out
}

pub fn parse_frames_archive(buf: &[u8]) -> Result<BTreeMap<String, Mat>, String> {
    let mut cur = Cursor::new(buf);
    if cur.take(4, "magic")? != FRAMES_MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = cur.u32("version")?;
    if version != FRAMES_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut out = BTreeMap::new();
    for (name, t) in read_tensors(&mut cur)? {
        let [rows, cols] = t.dims[..] else {
            return Err(format!("tensor {name} is not rank 2"));
        };
        let data = t.values().map_err(|e| format!("tensor {name}: {e}"))?;
        out.insert(name, Mat::from_vec(rows, cols, data));
    }
    Ok(out)
}

fn to_mat(rows: &[Vec<f64>]) -> Result<Mat, String> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err("frame rows have different lengths".into());
    }
    Ok(Mat::from_vec(rows.len(), cols, rows.concat()))
}

/// Parses manifest text. Sidecar archives are resolved against `base_dir`; without one, records
/// using `frames_path` are schema violations.
pub fn parse_manifest(text: &str, base_dir: Option<&Path>) -> Result<Vec<Utterance>, DataError> {
    let mut archives: HashMap<PathBuf, BTreeMap<String, Mat>> = HashMap::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DataError::SchemaViolation { line, message };
        let rec: Record = serde_json::from_str(raw).map_err(|e| schema(e.to_string()))?;
        let frames = match (&rec.frames, &rec.frames_path) {
            (Some(rows), None) => to_mat(rows).map_err(schema)?,
            (None, Some(p)) => {
                let base = base_dir.ok_or_else(|| schema("frames_path needs a manifest directory".into()))?;
                let path = base.join(p);
                if !archives.contains_key(&path) {
                    let bytes = std::fs::read(&path)?;
                    let parsed = parse_frames_archive(&bytes)
                        .map_err(|message| DataError::CorruptFrames { path: path.display().to_string(), message })?;
                    archives.insert(path.clone(), parsed);
                }
                archives[&path]
                    .get(&rec.id)
                    .cloned()
                    .ok_or_else(|| schema(format!("no frames for {:?} in {p}", rec.id)))?
            }
            _ => return Err(schema("exactly one of `frames` and `frames_path` is required".into())),
        };
        if first_line.insert(rec.id.clone(), line).is_some() {
            return Err(DataError::DuplicateId { id: rec.id, line });
        }
        let u = Utterance { id: rec.id, reference: rec.reference, dataset: rec.dataset, dialect: rec.dialect, frames };
        u.validate().map_err(schema)?;
        out.push(u);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, Some(path.parent().unwrap_or(Path::new("."))))
}

/// Manifest text in id order with sorted keys. For sidecar storage, the frames live elsewhere
/// (see [`write_manifest`]).
pub fn manifest_text(data: &[Utterance], storage: &FramesStorage) -> String {
    let mut sorted: Vec<&Utterance> = data.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    for u in sorted {
        let (frames, frames_path) = match storage {
            FramesStorage::Inline => ((0..u.frames.rows).map(|r| u.frames.row(r).to_vec()).collect::<Vec<_>>().into(), None),
            FramesStorage::Sidecar(name) => (None, Some(name.clone())),
        };
        let rec = Record {
            id: u.id.clone(),
            reference: u.reference.clone(),
            dataset: u.dataset.clone(),
            dialect: u.dialect.clone(),
            frames,
            frames_path,
        };
        out.push_str(&canonical_json(&rec));
        out.push('\n');
    }
    out
}

/// Writes `path` and, for sidecar storage, the frames archive next to it.
pub fn write_manifest(path: impl AsRef<Path>, data: &[Utterance], storage: &FramesStorage) -> Result<(), DataError> {
    let path = path.as_ref();
    if let FramesStorage::Sidecar(name) = storage {
        let dir = path.parent().unwrap_or(Path::new("."));
        let bytes = frames_archive_bytes(data.iter().map(|u| (u.id.as_str(), &u.frames)));
        std::fs::write(dir.join(name), bytes)?;
    }
    std::fs::write(path, manifest_text(data, storage))?;
    Ok(())
}
