//! Deterministic storage simulation and the virtual clock.
//!
//! Simulated time is integer nanoseconds, so identical runs produce
//! identical timings on every platform. The device serializes transfers: a
//! transfer issued at time `t` completes at
//! `max(t, device_free) + latency + size/bandwidth`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Clock driving the engine's notion of time. The simulator advances it by
/// modeled compute costs; a wall-clock implementation can ignore
/// `advance`/`settle` and report real elapsed time.
pub trait ExecClock {
    fn now_ns(&self) -> u64;
    /// Account compute work.
    fn advance(&mut self, ns: u64);
    /// Jump forward to a completion time (stalling); never moves backward.
    fn settle(&mut self, to_ns: u64);
}

#[derive(Default)]
pub struct VirtualClock {
    now: u64,
}

impl VirtualClock {
    pub fn new() -> VirtualClock {
        VirtualClock { now: 0 }
    }
}

impl ExecClock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now
    }

    fn advance(&mut self, ns: u64) {
        self.now += ns;
    }

    fn settle(&mut self, to_ns: u64) {
        self.now = self.now.max(to_ns);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageError {
    UnknownToken(u64),
    SizeMismatch { expected: usize, got: usize },
    Backend(String),
}

impl fmt::Display for StorageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StorageError::UnknownToken(t) => {
                write!(f, "wait on unknown or already-completed token {t}")
            }
            StorageError::SizeMismatch { expected, got } => {
                write!(f, "transfer size mismatch: expected {expected}, got {got}")
            }
            StorageError::Backend(e) => write!(f, "storage backend: {e}"),
        }
    }
}

impl core::error::Error for StorageError {}

/// Handle for an in-flight transfer; waiting twice on one token is an
/// error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token(pub u64);

/// Asynchronous page storage. `issue_*` must not block; the transfer's
/// memory effects become visible when `wait` returns. Write data is
/// captured at issue time (the caller keeps the source region stable until
/// the finish directive anyway).
pub trait StorageBackend {
    fn issue_read(&mut self, storage_frame: u64, len: usize, now_ns: u64)
        -> Result<Token, StorageError>;
    fn issue_write(
        &mut self,
        storage_frame: u64,
        data: &[u8],
        now_ns: u64,
    ) -> Result<Token, StorageError>;
    /// Completes a transfer, copying read data into `dest`. Returns the
    /// transfer's completion time; a completion after `now_ns` means the
    /// caller stalled.
    fn wait(
        &mut self,
        token: Token,
        dest: Option<&mut [u8]>,
        now_ns: u64,
    ) -> Result<u64, StorageError>;
}

enum PendingKind {
    Read { frame: u64, len: usize },
    Write,
}

struct Pending {
    kind: PendingKind,
    completion_ns: u64,
}

/// Deterministic in-memory storage device with a configurable latency and
/// bandwidth and a single serial queue.
pub struct SimulatedStorage {
    latency_ns: u64,
    bandwidth_bytes_per_sec: u64,
    page_bytes: usize,
    backing: Vec<u8>,
    device_free_ns: u64,
    next_token: u64,
    pending: BTreeMap<u64, Pending>,
}

impl SimulatedStorage {
    pub fn new(page_bytes: usize, latency_ns: u64, bandwidth_bytes_per_sec: u64) -> Self {
        assert!(bandwidth_bytes_per_sec > 0);
        SimulatedStorage {
            latency_ns,
            bandwidth_bytes_per_sec,
            page_bytes,
            backing: Vec::new(),
            device_free_ns: 0,
            next_token: 0,
            pending: BTreeMap::new(),
        }
    }

    /// End-to-end time for one transfer on an idle device: latency plus
    /// size over bandwidth.
    pub fn transfer_ns(&self, len: usize) -> u64 {
        self.latency_ns + self.occupancy_ns(len)
    }

    fn occupancy_ns(&self, len: usize) -> u64 {
        let bytes = len as u128 * 1_000_000_000u128;
        (bytes / self.bandwidth_bytes_per_sec as u128) as u64
    }

    fn frame_range(&mut self, frame: u64, len: usize) -> core::ops::Range<usize> {
        let start = frame as usize * self.page_bytes;
        let end = start + len;
        if self.backing.len() < end {
            self.backing.resize(end, 0);
        }
        start..end
    }

    /// Transfers queue on bandwidth; latency pipelines across queued
    /// transfers (several can be in their latency phase at once, which is
    /// what a prefetch buffer exploits).
    fn schedule(&mut self, now_ns: u64, len: usize) -> u64 {
        let start = now_ns.max(self.device_free_ns);
        self.device_free_ns = start + self.occupancy_ns(len);
        start + self.latency_ns + self.occupancy_ns(len)
    }

    fn take_token(&mut self) -> Token {
        let t = Token(self.next_token);
        self.next_token += 1;
        t
    }
}

impl StorageBackend for SimulatedStorage {
    fn issue_read(
        &mut self,
        storage_frame: u64,
        len: usize,
        now_ns: u64,
    ) -> Result<Token, StorageError> {
        if len > self.page_bytes {
            return Err(StorageError::SizeMismatch {
                expected: self.page_bytes,
                got: len,
            });
        }
        let completion_ns = self.schedule(now_ns, len);
        let token = self.take_token();
        self.pending.insert(
            token.0,
            Pending {
                kind: PendingKind::Read {
                    frame: storage_frame,
                    len,
                },
                completion_ns,
            },
        );
        Ok(token)
    }

    fn issue_write(
        &mut self,
        storage_frame: u64,
        data: &[u8],
        now_ns: u64,
    ) -> Result<Token, StorageError> {
        if data.len() > self.page_bytes {
            return Err(StorageError::SizeMismatch {
                expected: self.page_bytes,
                got: data.len(),
            });
        }
        let completion_ns = self.schedule(now_ns, data.len());
        let range = self.frame_range(storage_frame, data.len());
        self.backing[range].copy_from_slice(data);
        let token = self.take_token();
        self.pending.insert(
            token.0,
            Pending {
                kind: PendingKind::Write,
                completion_ns,
            },
        );
        Ok(token)
    }

    fn wait(
        &mut self,
        token: Token,
        dest: Option<&mut [u8]>,
        _now_ns: u64,
    ) -> Result<u64, StorageError> {
        let pending = self
            .pending
            .remove(&token.0)
            .ok_or(StorageError::UnknownToken(token.0))?;
        if let PendingKind::Read { frame, len } = pending.kind {
            let dest = dest.ok_or(StorageError::SizeMismatch {
                expected: len,
                got: 0,
            })?;
            if dest.len() != len {
                return Err(StorageError::SizeMismatch {
                    expected: len,
                    got: dest.len(),
                });
            }
            let range = self.frame_range(frame, len);
            dest.copy_from_slice(&self.backing[range]);
        }
        Ok(pending.completion_ns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn transfers_serialize_on_bandwidth_with_pipelined_latency() {
        // 1 us latency, 1 byte/ns bandwidth, 100-byte pages.
        let mut s = SimulatedStorage::new(100, 1000, 1_000_000_000);
        let a = s.issue_write(0, &[1u8; 100], 0).unwrap();
        let b = s.issue_write(1, &[2u8; 100], 0).unwrap();
        // First: 0 + 1000 + 100. The second queues behind the first's
        // bandwidth occupancy (100 ns) but its latency overlaps.
        assert_eq!(s.wait(a, None, 0).unwrap(), 1100);
        assert_eq!(s.wait(b, None, 0).unwrap(), 100 + 1000 + 100);
    }

    #[test]
    fn read_returns_written_data() {
        let mut s = SimulatedStorage::new(8, 10, 1_000_000_000);
        let w = s.issue_write(3, &[7u8; 8], 0).unwrap();
        s.wait(w, None, 0).unwrap();
        let r = s.issue_read(3, 8, 50).unwrap();
        let mut buf = vec![0u8; 8];
        let done = s.wait(r, Some(&mut buf), 50).unwrap();
        assert_eq!(buf, [7u8; 8]);
        assert!(done > 50);
    }

    #[test]
    fn double_wait_is_an_error() {
        let mut s = SimulatedStorage::new(8, 10, 1_000_000_000);
        let w = s.issue_write(0, &[0u8; 8], 0).unwrap();
        s.wait(w, None, 0).unwrap();
        assert_eq!(
            s.wait(w, None, 0).unwrap_err(),
            StorageError::UnknownToken(0)
        );
    }

    #[test]
    fn idle_device_gives_latency_plus_transfer() {
        let mut s = SimulatedStorage::new(1000, 500, 2_000_000_000); // 2 bytes/ns
        let w = s.issue_write(0, &[0u8; 1000], 10_000).unwrap();
        assert_eq!(s.wait(w, None, 10_000).unwrap(), 10_000 + 500 + 500);
    }

    #[test]
    fn virtual_clock_settles_forward_only() {
        let mut c = VirtualClock::new();
        c.advance(100);
        c.settle(50);
        assert_eq!(c.now_ns(), 100);
        c.settle(250);
        assert_eq!(c.now_ns(), 250);
    }
}
