//! Worker channel transports: in-process queues and TCP sockets.
//!
//! Both satisfy the same contract the engine builds barriers on: reliable,
//! ordered delivery per peer pair. The in-process hub is the default and
//! keeps multi-worker runs deterministic and self-contained; TCP framing
//! is an 8-byte little-endian length prefix per message.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use memprog_core::engine::{ChannelError, WorkerChannel};

/// One worker's endpoint of the in-process mesh.
pub struct InProcessChannel {
    worker_id: u32,
    senders: BTreeMap<u32, Sender<Vec<u8>>>,
    receivers: BTreeMap<u32, Receiver<Vec<u8>>>,
}

/// Builds a full mesh of queue pairs for `workers` workers.
pub fn in_process_mesh(workers: u32) -> Vec<InProcessChannel> {
    let mut endpoints: Vec<InProcessChannel> = (0..workers)
        .map(|id| InProcessChannel {
            worker_id: id,
            senders: BTreeMap::new(),
            receivers: BTreeMap::new(),
        })
        .collect();
    for a in 0..workers {
        for b in 0..workers {
            if a == b {
                continue;
            }
            let (tx, rx) = channel();
            endpoints[a as usize].senders.insert(b, tx);
            endpoints[b as usize].receivers.insert(a, rx);
        }
    }
    endpoints
}

impl WorkerChannel for InProcessChannel {
    fn send(&mut self, peer: u32, data: &[u8]) -> Result<(), ChannelError> {
        let tx = self
            .senders
            .get(&peer)
            .ok_or(ChannelError::Closed(peer))?;
        tx.send(data.to_vec())
            .map_err(|_| ChannelError::Closed(peer))
    }

    fn recv(&mut self, peer: u32) -> Result<Vec<u8>, ChannelError> {
        let rx = self
            .receivers
            .get(&peer)
            .ok_or(ChannelError::Closed(peer))?;
        rx.recv().map_err(|_| ChannelError::Closed(peer))
    }
}

impl InProcessChannel {
    pub fn worker_id(&self) -> u32 {
        self.worker_id
    }
}

/// Pairwise TCP connections among workers. Worker `i` listens; workers
/// `j > i` connect and identify themselves with a 4-byte worker id.
pub struct TcpChannel {
    streams: BTreeMap<u32, TcpStream>,
}

impl TcpChannel {
    pub fn connect(
        worker_id: u32,
        addrs: &BTreeMap<u32, String>,
        workers: u32,
    ) -> Result<TcpChannel> {
        let mut streams = BTreeMap::new();
        let my_addr = addrs
            .get(&worker_id)
            .with_context(|| format!("no address configured for worker {worker_id}"))?;
        let listener = if worker_id < workers - 1 {
            Some(TcpListener::bind(my_addr).with_context(|| format!("binding {my_addr}"))?)
        } else {
            None
        };
        // Lower-numbered peers accept us; we accept higher-numbered peers.
        for peer in 0..worker_id {
            let addr = addrs
                .get(&peer)
                .with_context(|| format!("no address configured for worker {peer}"))?;
            let mut stream = connect_with_retry(addr)?;
            stream.write_all(&worker_id.to_le_bytes())?;
            stream.set_nodelay(true).ok();
            streams.insert(peer, stream);
        }
        if let Some(listener) = listener {
            for _ in worker_id + 1..workers {
                let (mut stream, _) = listener.accept().context("accepting peer connection")?;
                let mut id = [0u8; 4];
                stream.read_exact(&mut id)?;
                let peer = u32::from_le_bytes(id);
                if peer <= worker_id || peer >= workers {
                    bail!("unexpected peer id {peer}");
                }
                stream.set_nodelay(true).ok();
                streams.insert(peer, stream);
            }
        }
        Ok(TcpChannel { streams })
    }
}

fn connect_with_retry(addr: &str) -> Result<TcpStream> {
    let deadline = std::time::Instant::now() + Duration::from_secs(30);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if std::time::Instant::now() < deadline => {
                let _ = e;
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e).with_context(|| format!("connecting to {addr}")),
        }
    }
}

impl WorkerChannel for TcpChannel {
    fn send(&mut self, peer: u32, data: &[u8]) -> Result<(), ChannelError> {
        let stream = self
            .streams
            .get_mut(&peer)
            .ok_or(ChannelError::Closed(peer))?;
        let len = (data.len() as u64).to_le_bytes();
        stream
            .write_all(&len)
            .and_then(|_| stream.write_all(data))
            .map_err(|e| ChannelError::Transport(e.to_string()))
    }

    fn recv(&mut self, peer: u32) -> Result<Vec<u8>, ChannelError> {
        let stream = self
            .streams
            .get_mut(&peer)
            .ok_or(ChannelError::Closed(peer))?;
        let mut len = [0u8; 8];
        stream
            .read_exact(&mut len)
            .map_err(|e| ChannelError::Transport(e.to_string()))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut data = vec![0u8; len];
        stream
            .read_exact(&mut data)
            .map_err(|e| ChannelError::Transport(e.to_string()))?;
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_delivers_in_order() {
        let mut mesh = in_process_mesh(2);
        let mut w1 = mesh.pop().unwrap();
        let mut w0 = mesh.pop().unwrap();
        w0.send(1, b"first").unwrap();
        w0.send(1, b"second").unwrap();
        assert_eq!(w1.recv(0).unwrap(), b"first");
        assert_eq!(w1.recv(0).unwrap(), b"second");
    }

    #[test]
    fn tcp_pair_roundtrip() {
        let mut addrs = BTreeMap::new();
        addrs.insert(0, "127.0.0.1:17871".to_string());
        addrs.insert(1, "127.0.0.1:17872".to_string());
        let addrs2 = addrs.clone();
        let t = std::thread::spawn(move || {
            let mut ch = TcpChannel::connect(1, &addrs2, 2).unwrap();
            ch.send(0, b"hello from 1").unwrap();
            assert_eq!(ch.recv(0).unwrap(), b"reply");
        });
        let mut ch = TcpChannel::connect(0, &addrs, 2).unwrap();
        assert_eq!(ch.recv(1).unwrap(), b"hello from 1");
        ch.send(1, b"reply").unwrap();
        t.join().unwrap();
    }
}
