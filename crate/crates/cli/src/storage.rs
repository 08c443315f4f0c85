//! Real storage backend and wall clock for non-simulated runs.
//!
//! `FileStorage` services swaps against a file through a background IO
//! thread: issue calls enqueue work and return immediately, wait blocks
//! on the transfer's completion notification. Completion times are wall
//! nanoseconds on the same clock the engine reads.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Instant;

use anyhow::{Context, Result};
use memprog_core::sim::{ExecClock, StorageBackend, StorageError, Token};

/// Wall-time clock: compute charging is ignored (real time passes on its
/// own); `now` is nanoseconds since construction.
pub struct WallClock {
    epoch: Instant,
}

impl WallClock {
    pub fn new() -> WallClock {
        WallClock {
            epoch: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock::new()
    }
}

impl ExecClock for WallClock {
    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn advance(&mut self, _ns: u64) {}

    fn settle(&mut self, _to_ns: u64) {}
}

enum IoRequest {
    Read {
        offset: u64,
        len: usize,
        done: Sender<(Vec<u8>, u64)>,
    },
    Write {
        offset: u64,
        data: Vec<u8>,
        done: Sender<u64>,
    },
}

enum PendingIo {
    Read(Receiver<(Vec<u8>, u64)>),
    Write(Receiver<u64>),
}

/// Swap storage backed by a file, one IO service thread, asynchronous at
/// issue.
pub struct FileStorage {
    queue: Sender<IoRequest>,
    pending: std::collections::BTreeMap<u64, PendingIo>,
    next_token: u64,
    page_bytes: usize,
}

impl FileStorage {
    pub fn open(path: &Path, page_bytes: usize, epoch: Instant) -> Result<FileStorage> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .with_context(|| format!("opening swap file {}", path.display()))?;
        let (tx, rx) = channel::<IoRequest>();
        std::thread::Builder::new()
            .name("swap-io".into())
            .spawn(move || io_service(file, rx, epoch))
            .context("spawning swap IO thread")?;
        Ok(FileStorage {
            queue: tx,
            pending: std::collections::BTreeMap::new(),
            next_token: 0,
            page_bytes,
        })
    }

    fn token(&mut self) -> Token {
        let t = Token(self.next_token);
        self.next_token += 1;
        t
    }
}

fn io_service(file: File, rx: Receiver<IoRequest>, epoch: Instant) {
    while let Ok(req) = rx.recv() {
        match req {
            IoRequest::Read { offset, len, done } => {
                let mut buf = vec![0u8; len];
                // Reads past the current end yield zeros, like a fresh
                // swap region.
                let _ = file.read_at(&mut buf, offset);
                let _ = done.send((buf, epoch.elapsed().as_nanos() as u64));
            }
            IoRequest::Write { offset, data, done } => {
                let _ = file.write_all_at(&data, offset);
                let _ = file.sync_data();
                let _ = done.send(epoch.elapsed().as_nanos() as u64);
            }
        }
    }
}

impl StorageBackend for FileStorage {
    fn issue_read(
        &mut self,
        storage_frame: u64,
        len: usize,
        _now_ns: u64,
    ) -> Result<Token, StorageError> {
        let (done_tx, done_rx) = channel();
        self.queue
            .send(IoRequest::Read {
                offset: storage_frame * self.page_bytes as u64,
                len,
                done: done_tx,
            })
            .map_err(|e| StorageError::Backend(e.to_string()))?;
        let token = self.token();
        self.pending.insert(token.0, PendingIo::Read(done_rx));
        Ok(token)
    }

    fn issue_write(
        &mut self,
        storage_frame: u64,
        data: &[u8],
        _now_ns: u64,
    ) -> Result<Token, StorageError> {
        let (done_tx, done_rx) = channel();
        self.queue
            .send(IoRequest::Write {
                offset: storage_frame * self.page_bytes as u64,
                data: data.to_vec(),
                done: done_tx,
            })
            .map_err(|e| StorageError::Backend(e.to_string()))?;
        let token = self.token();
        self.pending.insert(token.0, PendingIo::Write(done_rx));
        Ok(token)
    }

    fn wait(
        &mut self,
        token: Token,
        dest: Option<&mut [u8]>,
        _now_ns: u64,
    ) -> Result<u64, StorageError> {
        match self
            .pending
            .remove(&token.0)
            .ok_or(StorageError::UnknownToken(token.0))?
        {
            PendingIo::Read(rx) => {
                let (data, at) = rx
                    .recv()
                    .map_err(|e| StorageError::Backend(e.to_string()))?;
                let dest = dest.ok_or(StorageError::SizeMismatch {
                    expected: data.len(),
                    got: 0,
                })?;
                if dest.len() != data.len() {
                    return Err(StorageError::SizeMismatch {
                        expected: data.len(),
                        got: dest.len(),
                    });
                }
                dest.copy_from_slice(&data);
                Ok(at)
            }
            PendingIo::Write(rx) => rx
                .recv()
                .map_err(|e| StorageError::Backend(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_storage_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("swap.bin");
        let epoch = Instant::now();
        let mut storage = FileStorage::open(&path, 64, epoch).unwrap();
        let w = storage.issue_write(3, &[9u8; 64], 0).unwrap();
        storage.wait(w, None, 0).unwrap();
        let r = storage.issue_read(3, 64, 0).unwrap();
        let mut buf = vec![0u8; 64];
        storage.wait(r, Some(&mut buf), 0).unwrap();
        assert_eq!(buf, vec![9u8; 64]);
    }

    #[test]
    fn double_wait_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("swap.bin");
        let mut storage = FileStorage::open(&path, 16, Instant::now()).unwrap();
        let w = storage.issue_write(0, &[1u8; 16], 0).unwrap();
        storage.wait(w, None, 0).unwrap();
        assert!(matches!(
            storage.wait(w, None, 0),
            Err(StorageError::UnknownToken(_))
        ));
    }
}
