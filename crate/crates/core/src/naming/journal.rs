//! Durability backends for the naming service: a pluggable journal of
//! accepted mutations. The in-memory variant backs tests; the file variant
//! gives a single-machine durable deployment. Both expose the same
//! strictly consistent store through replay.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::PathBuf;

use super::protocol::AcceptedMutation;
use super::NamingError;
use crate::wire::{WireDecode, WireEncode};

pub trait Journal: Send {
    /// Appends one accepted mutation durably; the mutation may be
    /// acknowledged only after this returns.
    fn append(&mut self, mutation: &AcceptedMutation) -> Result<(), NamingError>;

    /// All mutations accepted so far, in order.
    fn load(&mut self) -> Result<Vec<AcceptedMutation>, NamingError>;
}

#[derive(Default)]
pub struct MemJournal {
    entries: Vec<AcceptedMutation>,
}

impl MemJournal {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Journal for MemJournal {
    fn append(&mut self, mutation: &AcceptedMutation) -> Result<(), NamingError> {
        self.entries.push(mutation.clone());
        Ok(())
    }

    fn load(&mut self) -> Result<Vec<AcceptedMutation>, NamingError> {
        Ok(self.entries.clone())
    }
}

/// Append-only file journal with length-prefixed frames, synced per
/// append. A torn final frame is discarded on load.
pub struct FileJournal {
    path: PathBuf,
    file: File,
}

impl FileJournal {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, NamingError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(FileJournal { path, file })
    }
}

fn io_err(e: std::io::Error) -> NamingError {
    NamingError::BadRequest(format!("journal i/o: {e}"))
}

impl Journal for FileJournal {
    fn append(&mut self, mutation: &AcceptedMutation) -> Result<(), NamingError> {
        let body = mutation.encode();
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        self.file.write_all(&frame).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)?;
        Ok(())
    }

    fn load(&mut self) -> Result<Vec<AcceptedMutation>, NamingError> {
        let mut bytes = Vec::new();
        File::open(&self.path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err)?;
        let mut entries = Vec::new();
        let mut pos = 0usize;
        while pos + 4 <= bytes.len() {
            let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            if pos + 4 + len > bytes.len() {
                log::warn!("naming journal has a torn final frame; discarding");
                break;
            }
            match AcceptedMutation::decode(&bytes[pos + 4..pos + 4 + len]) {
                Ok(entry) => entries.push(entry),
                Err(e) => {
                    log::warn!("naming journal frame failed to decode ({e}); stopping replay");
                    break;
                }
            }
            pos += 4 + len;
        }
        Ok(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EntityId;
    use crate::naming::protocol::NamingOp;

    fn mutation(v: u64) -> AcceptedMutation {
        AcceptedMutation {
            log_version: v,
            caller: EntityId::client("admin").unwrap(),
            op: NamingOp::Tombstone {
                id: EntityId::node("gone").unwrap(),
            },
            secret: None,
        }
    }

    #[test]
    fn file_journal_round_trips_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("naming.journal");
        {
            let mut j = FileJournal::open(&path).unwrap();
            j.append(&mutation(1)).unwrap();
            j.append(&mutation(2)).unwrap();
        }
        let mut j = FileJournal::open(&path).unwrap();
        let loaded = j.load().unwrap();
        assert_eq!(loaded, vec![mutation(1), mutation(2)]);
    }
}
