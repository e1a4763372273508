//! Append-only JSON-lines record store.
//!
//! Line 1 is a header carrying the schema version, config hash and the
//! questionnaire text. Each completed sample is then appended as its answer
//! records followed by a `sample_done` marker, written and synced as one
//! batch. On reopen, anything after the last marker is an interrupted batch
//! and is cut off before new samples are appended.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{AnswerRecord, Cell, Completeness, RunError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub schema_version: u32,
    pub config_hash: String,
    pub created_at: DateTime<Utc>,
    pub seed: Option<u64>,
    pub reask_limit: u32,
    /// Questionnaire file text the run used.
    pub questionnaire: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMarker {
    pub cell: Cell,
    pub sample_index: u32,
    pub completeness: Completeness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StoreLine {
    Header(StoreHeader),
    Answer(AnswerRecord),
    SampleDone(SampleMarker),
}

/// Everything readable from a store file.
#[derive(Debug, Clone, Default)]
pub struct StoreContents {
    pub header: Option<StoreHeader>,
    pub records: Vec<AnswerRecord>,
    pub markers: Vec<SampleMarker>,
    /// 1-based line numbers that failed to parse and were skipped.
    pub skipped_lines: Vec<usize>,
}

/// Reads a store, skipping (and reporting) lines that do not parse.
pub fn read_store(path: &Path) -> Result<StoreContents, RunError> {
    let mut text = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut text))
        .map_err(|e| RunError::io(path, e))?;
    let text = String::from_utf8_lossy(&text);
    let mut out = StoreContents::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StoreLine>(line) {
            Ok(StoreLine::Header(h)) => {
                if out.header.is_none() {
                    out.header = Some(h);
                }
            }
            Ok(StoreLine::Answer(r)) => out.records.push(r),
            Ok(StoreLine::SampleDone(m)) => out.markers.push(m),
            Err(e) => {
                tracing::warn!("{}: skipping unreadable line {}: {e}", path.display(), i + 1);
                out.skipped_lines.push(i + 1);
            }
        }
    }
    Ok(out)
}

/// Single writer for a store file.
#[derive(Debug)]
pub struct StoreWriter {
    path: PathBuf,
    file: File,
    header: StoreHeader,
    done: BTreeSet<(Cell, u32)>,
}

impl StoreWriter {
    /// Opens `path` for appending, creating it with `header` if absent. An
    /// existing store must carry the same config hash.
    pub fn open(path: &Path, header: StoreHeader) -> Result<Self, RunError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| RunError::io(path, e))?;

        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| RunError::io(path, e))?;

        let mut existing: Option<StoreHeader> = None;
        let mut done = BTreeSet::new();
        let mut committed = 0usize;
        let mut offset = 0usize;
        for chunk in bytes.split_inclusive(|b| *b == b'\n') {
            offset += chunk.len();
            if chunk.last() != Some(&b'\n') {
                break;
            }
            let Ok(line) = std::str::from_utf8(chunk) else {
                break;
            };
            match serde_json::from_str::<StoreLine>(line.trim_end()) {
                Ok(StoreLine::Header(h)) if existing.is_none() => {
                    existing = Some(h);
                    committed = offset;
                }
                Ok(StoreLine::SampleDone(m)) if existing.is_some() => {
                    done.insert((m.cell, m.sample_index));
                    committed = offset;
                }
                Ok(StoreLine::Answer(_)) if existing.is_some() => {}
                Ok(_) | Err(_) => break,
            }
        }

        let header = match existing {
            Some(h) => {
                if h.config_hash != header.config_hash {
                    return Err(RunError::Store(format!(
                        "{} was written by a different configuration (hash {} != {})",
                        path.display(),
                        h.config_hash,
                        header.config_hash
                    )));
                }
                if h.schema_version != SCHEMA_VERSION {
                    return Err(RunError::Store(format!(
                        "{} has schema version {}, expected {SCHEMA_VERSION}",
                        path.display(),
                        h.schema_version
                    )));
                }
                h
            }
            None => {
                if !bytes.is_empty() && !bytes.iter().all(u8::is_ascii_whitespace) {
                    return Err(RunError::Store(format!(
                        "{} exists but is not a record store",
                        path.display()
                    )));
                }
                committed = 0;
                header
            }
        };

        if committed < bytes.len() {
            tracing::warn!(
                "{}: discarding {} bytes of an interrupted sample",
                path.display(),
                bytes.len() - committed
            );
        }
        file.set_len(committed as u64).map_err(|e| RunError::io(path, e))?;
        let mut writer = StoreWriter {
            path: path.to_path_buf(),
            file,
            header,
            done,
        };
        if committed == 0 {
            let line = StoreLine::Header(writer.header.clone());
            writer.write_batch(&[line])?;
        }
        Ok(writer)
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn is_done(&self, cell: &Cell, sample_index: u32) -> bool {
        self.done.contains(&(cell.clone(), sample_index))
    }

    pub fn done_count(&self) -> usize {
        self.done.len()
    }

    /// Appends one sample's answer records and its completion marker.
    pub fn append_sample(&mut self, records: &[AnswerRecord], marker: SampleMarker) -> Result<(), RunError> {
        let key = (marker.cell.clone(), marker.sample_index);
        if self.done.contains(&key) {
            return Err(RunError::Store(format!(
                "sample {} of {} already recorded",
                marker.sample_index, marker.cell
            )));
        }
        let mut lines: Vec<StoreLine> = records.iter().cloned().map(StoreLine::Answer).collect();
        lines.push(StoreLine::SampleDone(marker));
        self.write_batch(&lines)?;
        self.done.insert(key);
        Ok(())
    }

    fn write_batch(&mut self, lines: &[StoreLine]) -> Result<(), RunError> {
        let mut buf = Vec::new();
        for line in lines {
            serde_json::to_writer(&mut buf, line).map_err(|e| RunError::Store(e.to_string()))?;
            buf.push(b'\n');
        }
        use std::io::Seek;
        self.file
            .seek(std::io::SeekFrom::End(0))
            .and_then(|_| self.file.write_all(&buf))
            .and_then(|_| self.file.sync_data())
            .map_err(|e| RunError::io(&self.path, e))
    }
}
