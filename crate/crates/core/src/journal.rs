//! Append-only event journal.
//!
//! One JSON object per line: `{"seq": n, "at": <RFC 3339>, "kind": ...,
//! "payload": ...}`. Sequence numbers start at 1 and are gapless. Each append
//! is flushed and fsynced before it returns, so an acknowledged event
//! survives a crash. A final line without its terminating newline is the
//! signature of a crash mid-write; it is discarded (and truncated away) on
//! open. Any other malformed line is corruption and refuses to load.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::service::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry<E> {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: E,
}

#[derive(Debug)]
pub struct Journal<E> {
    path: PathBuf,
    file: File,
    next_seq: u64,
    sync: bool,
    _event: PhantomData<fn(E)>,
}

impl<E: Serialize + DeserializeOwned> Journal<E> {
    /// Open (creating if needed) and return the journal with every stored
    /// entry, oldest first.
    pub fn open(path: &Path) -> Result<(Self, Vec<JournalEntry<E>>)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;

        let complete_len = text.rfind('\n').map(|i| i + 1).unwrap_or(0);
        if complete_len < text.len() {
            tracing::warn!(
                path = %path.display(),
                bytes = text.len() - complete_len,
                "discarding incomplete trailing journal record"
            );
            file.set_len(complete_len as u64)
                .map_err(|e| Error::io(path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        }
        let entries = parse_entries(path, &text[..complete_len])?;
        let next_seq = entries.last().map(|e| e.seq + 1).unwrap_or(1);
        Ok((
            Journal {
                path: path.to_path_buf(),
                file,
                next_seq,
                sync: true,
                _event: PhantomData,
            },
            entries,
        ))
    }

    /// Skip fsync after each append. Only meant for tests and benchmarks.
    pub fn without_sync(mut self) -> Self {
        self.sync = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Durably append one event and return the stored entry.
    pub fn append(&mut self, at: DateTime<Utc>, event: E) -> Result<JournalEntry<E>> {
        let entry = JournalEntry {
            seq: self.next_seq,
            at,
            event,
        };
        let mut line = serde_json::to_string(&entry).expect("journal entries serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        if self.sync {
            self.file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        }
        self.next_seq += 1;
        Ok(entry)
    }
}

/// Read every complete entry of a journal without opening it for writing.
pub fn read_entries<E: DeserializeOwned>(path: &Path) -> Result<Vec<JournalEntry<E>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete_len = text.rfind('\n').map(|i| i + 1).unwrap_or(0);
    parse_entries(path, &text[..complete_len])
}

fn parse_entries<E: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<JournalEntry<E>>> {
    let mut entries: Vec<JournalEntry<E>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let entry: JournalEntry<E> =
            serde_json::from_str(line).map_err(|e| Error::parse(path, n + 1, e))?;
        let expected = entries.last().map(|e| e.seq + 1).unwrap_or(1);
        if entry.seq != expected {
            return Err(ServiceError::CorruptJournal(format!(
                "{}:{}: sequence {} where {expected} was expected",
                path.display(),
                n + 1,
                entry.seq
            ))
            .into());
        }
        entries.push(entry);
    }
    Ok(entries)
}
