//! Line-delimited JSON manifests.
//!
//! The first line is a header `{"schema": "qbye-manifest", "version": 1}`;
//! every following line is one [`ManifestRecord`]. Audio paths are relative
//! to the manifest's directory unless absolute.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use qbye_core::data::{ManifestRecord, Split, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MANIFEST_SCHEMA: &str = "qbye-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const VOCABULARY_FILE: &str = "vocabulary.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
}

impl Default for ManifestHeader {
    fn default() -> Self {
        ManifestHeader {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
        }
    }
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

pub fn to_jsonl(records: &[ManifestRecord]) -> AppResult<String> {
    let mut out = serde_json::to_string(&ManifestHeader::default())?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> AppResult<()> {
    let mut f =
        fs::File::create(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(to_jsonl(records)?.as_bytes())?;
    Ok(())
}

/// Parses a manifest; diagnostics name the offending line.
pub fn parse_manifest(text: &str, origin: &str) -> AppResult<Vec<ManifestRecord>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| AppError::Data(format!("{origin}: empty manifest")))?;
    let header: ManifestHeader = serde_json::from_str(first)
        .map_err(|e| AppError::Data(format!("{origin}:1: bad manifest header: {e}")))?;
    if header.schema != MANIFEST_SCHEMA || header.version != MANIFEST_VERSION {
        return Err(AppError::Data(format!(
            "{origin}:1: unsupported manifest {} v{} (expected {MANIFEST_SCHEMA} v{MANIFEST_VERSION})",
            header.schema, header.version
        )));
    }
    lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AppError::Data(format!("{origin}:{}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> AppResult<Vec<ManifestRecord>> {
    let text =
        fs::read_to_string(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Records of `split`, or an empty list when its manifest does not exist.
pub fn read_split(dir: &Path, split: Split) -> AppResult<Vec<ManifestRecord>> {
    let path = manifest_path(dir, split);
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_manifest(&path)
}

pub fn resolve_audio(dir: &Path, record: &ManifestRecord) -> PathBuf {
    let p = Path::new(&record.audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

pub fn write_vocabulary(dir: &Path, vocab: &Vocabulary) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(vocab)?;
    text.push('\n');
    fs::write(dir.join(VOCABULARY_FILE), text)?;
    Ok(())
}

pub fn read_vocabulary(dir: &Path) -> AppResult<Vocabulary> {
    let path = dir.join(VOCABULARY_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
