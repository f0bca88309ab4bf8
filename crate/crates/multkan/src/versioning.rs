//! Checkpoint store with rewind semantics for hypothesis testing.
//!
//! Every mutating step of an experiment commits a full snapshot under a
//! `major.minor` version. Rewinding to an earlier version restores it
//! bit-exact and renames it into a fresh major, so the abandoned line stays
//! in the tree and a new branch grows from the shared prefix.
//!
//! Store layout: `<dir>/index.jsonl` (append-only journal, one entry per
//! version, last line is the active leaf) plus one
//! `<dir>/v<major>.<minor>.model.json` snapshot per version.

use crate::model::{ModelError, MultKanModel};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VersionError {
    #[error("unknown version {0}")]
    UnknownVersion(String),
    #[error("cannot parse version `{0}`, expected major.minor")]
    BadVersionString(String),
    #[error("index line {line}: {reason}")]
    CorruptIndex { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Version label. Minor counts commits within a line of work, major counts
/// rewinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VersionId {
    pub major: u32,
    pub minor: u32,
}

impl VersionId {
    pub fn new(major: u32, minor: u32) -> Self {
        VersionId { major, minor }
    }
}

impl fmt::Display for VersionId {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(w, "{}.{}", self.major, self.minor)
    }
}

impl FromStr for VersionId {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, VersionError> {
        let bad = || VersionError::BadVersionString(s.to_string());
        let (major, minor) = s.split_once('.').ok_or_else(bad)?;
        Ok(VersionId {
            major: major.parse().map_err(|_| bad())?,
            minor: minor.parse().map_err(|_| bad())?,
        })
    }
}

impl From<VersionId> for String {
    fn from(id: VersionId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for VersionId {
    type Error = VersionError;

    fn try_from(s: String) -> Result<Self, VersionError> {
        s.parse()
    }
}

/// One journal line. The snapshot field repeats the derived file name so the
/// index is self-describing when read by other tools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: VersionId,
    pub parent: Option<VersionId>,
    pub op: String,
    pub snapshot: String,
    pub timestamp: u64,
}

#[derive(Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    entries: Vec<IndexEntry>,
}

impl CheckpointStore {
    /// Open a store, creating the directory for a fresh one. An existing
    /// journal is replayed and validated: ids unique, parents already
    /// present, first entry a root.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, VersionError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let index = dir.join("index.jsonl");
        let mut entries: Vec<IndexEntry> = Vec::new();
        if index.exists() {
            for (n, raw) in fs::read_to_string(&index)?.lines().enumerate() {
                let line = n + 1;
                if raw.trim().is_empty() {
                    continue;
                }
                let entry: IndexEntry =
                    serde_json::from_str(raw).map_err(|e| VersionError::CorruptIndex {
                        line,
                        reason: e.to_string(),
                    })?;
                if entries.iter().any(|e| e.id == entry.id) {
                    return Err(VersionError::CorruptIndex {
                        line,
                        reason: format!("duplicate version {}", entry.id),
                    });
                }
                match entry.parent {
                    None if !entries.is_empty() => {
                        return Err(VersionError::CorruptIndex {
                            line,
                            reason: "only the first version may lack a parent".into(),
                        })
                    }
                    Some(p) if !entries.iter().any(|e| e.id == p) => {
                        return Err(VersionError::CorruptIndex {
                            line,
                            reason: format!("parent {p} not seen yet"),
                        })
                    }
                    _ => {}
                }
                entries.push(entry);
            }
        }
        Ok(CheckpointStore { dir, entries })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Active leaf: the most recently committed or rewound version.
    pub fn current(&self) -> Option<VersionId> {
        self.entries.last().map(|e| e.id)
    }

    pub fn snapshot_path(&self, id: VersionId) -> PathBuf {
        self.dir.join(format!("v{}.{}.model.json", id.major, id.minor))
    }

    /// Save a snapshot of `model` as the next minor version of the current
    /// major. A fresh store starts at 0.0.
    pub fn commit(
        &mut self,
        model: &MultKanModel,
        op_label: &str,
    ) -> Result<VersionId, VersionError> {
        let id = match self.current() {
            None => VersionId::new(0, 0),
            Some(c) => VersionId::new(c.major, c.minor + 1),
        };
        // Snapshot lands before the journal line; a crash in between leaves
        // the previous index valid and the orphan file is harmless.
        model.save(&self.snapshot_path(id))?;
        self.append(IndexEntry {
            id,
            parent: self.current(),
            op: op_label.to_string(),
            snapshot: snapshot_name(id),
            timestamp: now(),
        })?;
        Ok(id)
    }

    /// Restore `target` bit-exact and rename it into a fresh major (one past
    /// the largest major on record), keeping its minor. Later commits grow
    /// from the renamed version.
    pub fn rewind(
        &mut self,
        target: VersionId,
    ) -> Result<(MultKanModel, VersionId), VersionError> {
        if !self.entries.iter().any(|e| e.id == target) {
            return Err(VersionError::UnknownVersion(target.to_string()));
        }
        let bytes = fs::read(self.snapshot_path(target))?;
        let model = MultKanModel::from_json(std::str::from_utf8(&bytes).map_err(|e| {
            VersionError::CorruptIndex { line: 0, reason: format!("snapshot not utf-8: {e}") }
        })?)?;
        let top_major = self.entries.iter().map(|e| e.id.major).max().unwrap_or(0);
        let id = VersionId::new(top_major + 1, target.minor);
        fs::write(self.snapshot_path(id), &bytes)?;
        self.append(IndexEntry {
            id,
            parent: Some(target),
            op: "rewind".to_string(),
            snapshot: snapshot_name(id),
            timestamp: now(),
        })?;
        Ok((model, id))
    }

    pub fn load(&self, id: VersionId) -> Result<MultKanModel, VersionError> {
        if !self.entries.iter().any(|e| e.id == id) {
            return Err(VersionError::UnknownVersion(id.to_string()));
        }
        Ok(MultKanModel::load(&self.snapshot_path(id))?)
    }

    /// Journal in append order, which is also topological order: parents
    /// precede their children.
    pub fn history(&self) -> &[IndexEntry] {
        &self.entries
    }

    fn append(&mut self, entry: IndexEntry) -> Result<(), VersionError> {
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("index.jsonl"))?;
        writeln!(file, "{}", serde_json::to_string(&entry)?)?;
        self.entries.push(entry);
        Ok(())
    }
}

fn snapshot_name(id: VersionId) -> String {
    format!("v{}.{}.model.json", id.major, id.minor)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
