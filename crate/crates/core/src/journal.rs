//! Append-only journal of framed mutation records plus a periodic snapshot.
//!
//! Both files use the wire framing: `u32 big-endian length | UTF-8 JSON`.
//! A snapshot holds one frame with the full state; replay loads the snapshot
//! and applies every journal record whose sequence number is newer.

use crate::error::{GvfError, Result};
use crate::wire::{read_frame, write_frame};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

/// Anything carrying the catalog-wide sequence number it was written at.
pub trait Sequenced {
    fn seq(&self) -> u64;
}

pub struct Journal {
    journal_path: PathBuf,
    snapshot_path: PathBuf,
    file: File,
    fsync: bool,
    since_snapshot: usize,
}

pub struct Recovered<S, R> {
    pub snapshot: Option<S>,
    pub records: Vec<R>,
}

impl Journal {
    /// Opens (or creates) `<dir>/<name>.journal` and returns everything needed to
    /// rebuild state. A torn trailing record left by a crash is cut off.
    pub fn open<S, R>(dir: &Path, name: &str, fsync: bool) -> Result<(Journal, Recovered<S, R>)>
    where
        S: DeserializeOwned + Sequenced,
        R: DeserializeOwned + Sequenced,
    {
        fs::create_dir_all(dir)?;
        let journal_path = dir.join(format!("{name}.journal"));
        let snapshot_path = dir.join(format!("{name}.snapshot"));

        let snapshot: Option<S> = read_single_framed(&snapshot_path)?;
        let floor = snapshot.as_ref().map_or(0, |s| s.seq());

        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&journal_path)?;
        let (records, good_len) = scan_records::<R>(&file)?;
        if good_len < file.metadata()?.len() {
            log::warn!(
                "{}: truncating torn tail at byte {good_len}",
                journal_path.display()
            );
            file.set_len(good_len)?;
            file.sync_data()?;
        }
        file.seek(SeekFrom::End(0))?;
        let since_snapshot = records.len();
        let records = records.into_iter().filter(|r| r.seq() > floor).collect();
        Ok((
            Journal {
                journal_path,
                snapshot_path,
                file,
                fsync,
                since_snapshot,
            },
            Recovered { snapshot, records },
        ))
    }

    /// Durably appends one record. Returns only once the record would survive a crash
    /// of this process (and of the machine, when fsync is on).
    pub fn append<R: Serialize>(&mut self, record: &R) -> Result<()> {
        let payload = serde_json::to_vec(record)?;
        let mut buf = Vec::with_capacity(payload.len() + 4);
        write_frame(&mut buf, &payload)?;
        self.file.write_all(&buf)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.since_snapshot += 1;
        Ok(())
    }

    pub fn records_since_snapshot(&self) -> usize {
        self.since_snapshot
    }

    /// Writes a snapshot of the full state, then resets the journal.
    pub fn snapshot<S: Serialize>(&mut self, state: &S) -> Result<()> {
        write_single_framed(&self.snapshot_path, state)?;
        // Records at or below the snapshot's seq are skipped on replay, so a crash
        // between these two steps is harmless.
        let tmp = self.journal_path.with_extension("journal.tmp");
        File::create(&tmp)?.sync_all()?;
        fs::rename(&tmp, &self.journal_path)?;
        sync_dir(&self.journal_path);
        self.file = OpenOptions::new().append(true).read(true).open(&self.journal_path)?;
        self.since_snapshot = 0;
        Ok(())
    }
}

fn scan_records<R: DeserializeOwned>(file: &File) -> Result<(Vec<R>, u64)> {
    let mut reader = BufReader::new(file);
    reader.seek(SeekFrom::Start(0))?;
    let mut out = Vec::new();
    let mut good = 0u64;
    loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => match serde_json::from_slice::<R>(&frame) {
                Ok(r) => {
                    out.push(r);
                    good += 4 + frame.len() as u64;
                }
                Err(_) => break,
            },
            Ok(None) => break,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof || e.kind() == io::ErrorKind::InvalidData => {
                break
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((out, good))
}

fn sync_dir(path: &Path) {
    if let Some(parent) = path.parent() {
        if let Ok(d) = File::open(parent) {
            let _ = d.sync_all();
        }
    }
}

/// Atomically replaces `path` with a file holding exactly one frame.
pub fn write_single_framed<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let payload = serde_json::to_vec(value)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        write_frame(&mut f, &payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    sync_dir(path);
    Ok(())
}

pub fn read_single_framed<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    let mut f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let frame = read_frame(&mut f)?
        .ok_or_else(|| GvfError::unavail(format!("{}: empty state file", path.display())))?;
    Ok(Some(serde_json::from_slice(&frame).map_err(|e| {
        GvfError::unavail(format!("{}: corrupt state file: {e}", path.display()))
    })?))
}
