//! Run configuration: a flat YAML-style `key: value` text file.
//!
//! Lines are `key: value`; `#` starts a comment. Per-worker settings use
//! dotted keys (`worker.0.addr: 127.0.0.1:7100`) and fall back to the
//! global value. The full schema with defaults is in the repository
//! README; unknown keys are errors so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memprog_core::bytecode::DriverId;
use memprog_core::drivers::{
    DEFAULT_BASE_RELIN, DEFAULT_BASE_UNRELIN, DEFAULT_DIMENSION, DEFAULT_MAX_LEVEL,
    DEFAULT_WIRE_BYTES,
};
use memprog_core::engine::CostModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum StorageKind {
    Sim,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ChannelKind {
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub driver: DriverId,
    /// Pages hold 2^page_shift address units (wires or bytes).
    pub page_shift: u8,
    pub workers: u32,
    /// Per-worker memory budget in bytes; None plans as unbounded.
    pub memory_limit_bytes: Option<u64>,
    pub lookahead: u64,
    pub prefetch_frames: u64,
    pub storage: StorageKind,
    pub channel: ChannelKind,
    pub sim_latency_ns: u64,
    pub sim_bandwidth_bytes_per_sec: u64,
    pub cost: CostModel,
    /// Seed for the bit-wire driver's padding pattern.
    pub program_seed: u64,
    pub wire_bytes: usize,
    pub max_level: u8,
    pub dimension: usize,
    pub base_relin_bytes: u64,
    pub base_unrelin_bytes: u64,
    /// Per-worker swap file for the file storage backend.
    pub swap_paths: BTreeMap<u32, PathBuf>,
    /// Per-worker TCP listen addresses for the tcp channel.
    pub addrs: BTreeMap<u32, String>,
}

impl RunConfig {
    /// Defaults for a driver, matching the reference parameter sets:
    /// 64 KiB pages / lookahead 10000 / 256 prefetch frames for bit-wire
    /// and 2 MiB pages / lookahead 100 / 16 prefetch frames for batch.
    pub fn defaults(driver: DriverId) -> RunConfig {
        let (page_shift, lookahead, prefetch_frames) = match driver {
            // Wire-addressed: 2^12 wires * 16 B = 64 KiB pages.
            DriverId::BitWire => (12, 10_000, 256),
            // Byte-addressed: 2 MiB pages.
            DriverId::LeveledBatch => (21, 100, 16),
        };
        RunConfig {
            driver,
            page_shift,
            workers: 1,
            memory_limit_bytes: None,
            lookahead,
            prefetch_frames,
            storage: StorageKind::Sim,
            channel: ChannelKind::InProcess,
            sim_latency_ns: 400_000,
            sim_bandwidth_bytes_per_sec: 1_000_000_000,
            cost: CostModel::default(),
            program_seed: 0x0b5e55ed,
            wire_bytes: DEFAULT_WIRE_BYTES,
            max_level: DEFAULT_MAX_LEVEL,
            dimension: DEFAULT_DIMENSION,
            base_relin_bytes: DEFAULT_BASE_RELIN,
            base_unrelin_bytes: DEFAULT_BASE_UNRELIN,
            swap_paths: BTreeMap::new(),
            addrs: BTreeMap::new(),
        }
    }

    pub fn unit_bytes(&self) -> usize {
        match self.driver {
            DriverId::BitWire => self.wire_bytes,
            DriverId::LeveledBatch => 1,
        }
    }

    pub fn page_bytes(&self) -> u64 {
        (1u64 << self.page_shift) * self.unit_bytes() as u64
    }

    /// Frames a memory limit buys, prefetch buffer included.
    pub fn total_frames(&self) -> Option<u64> {
        self.memory_limit_bytes.map(|b| b / self.page_bytes())
    }

    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once(':') else {
                bail!("{}:{}: expected `key: value`", path.display(), no + 1);
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let driver = match pairs.iter().find(|(k, _)| k == "driver") {
            Some((_, v)) => match v.as_str() {
                "bitwire" => DriverId::BitWire,
                "batch" => DriverId::LeveledBatch,
                other => bail!("{}: unknown driver `{other}`", path.display()),
            },
            None => bail!("{}: missing required key `driver`", path.display()),
        };
        let mut cfg = RunConfig::defaults(driver);
        for (key, value) in pairs {
            let parse_u64 = || -> Result<u64> {
                value
                    .parse::<u64>()
                    .with_context(|| format!("{}: bad value for {key}: `{value}`", path.display()))
            };
            match key.as_str() {
                "driver" => {}
                "page_shift" => cfg.page_shift = parse_u64()? as u8,
                "workers" => cfg.workers = parse_u64()? as u32,
                "memory_limit_bytes" => cfg.memory_limit_bytes = Some(parse_u64()?),
                "lookahead" => cfg.lookahead = parse_u64()?,
                "prefetch_frames" => cfg.prefetch_frames = parse_u64()?,
                "storage" => {
                    cfg.storage = match value.as_str() {
                        "sim" => StorageKind::Sim,
                        "file" => StorageKind::File,
                        other => bail!("{}: unknown storage `{other}`", path.display()),
                    }
                }
                "channel" => {
                    cfg.channel = match value.as_str() {
                        "inproc" => ChannelKind::InProcess,
                        "tcp" => ChannelKind::Tcp,
                        other => bail!("{}: unknown channel `{other}`", path.display()),
                    }
                }
                "sim_latency_ns" => cfg.sim_latency_ns = parse_u64()?,
                "sim_bandwidth_bytes_per_sec" => cfg.sim_bandwidth_bytes_per_sec = parse_u64()?,
                "bit_gate_ns" => cfg.cost.bit_gate_ns = parse_u64()?,
                "batch_op_ns" => cfg.cost.batch_op_ns = parse_u64()?,
                "page_copy_ns" => cfg.cost.page_copy_ns = parse_u64()?,
                "instruction_base_ns" => cfg.cost.instruction_base_ns = parse_u64()?,
                "program_seed" => cfg.program_seed = parse_u64()?,
                "wire_bytes" => cfg.wire_bytes = parse_u64()? as usize,
                "max_level" => cfg.max_level = parse_u64()? as u8,
                "dimension" => cfg.dimension = parse_u64()? as usize,
                "base_relin_bytes" => cfg.base_relin_bytes = parse_u64()?,
                "base_unrelin_bytes" => cfg.base_unrelin_bytes = parse_u64()?,
                _ => {
                    if let Some(rest) = key.strip_prefix("worker.") {
                        let Some((idx, field)) = rest.split_once('.') else {
                            bail!("{}: bad worker key `{key}`", path.display());
                        };
                        let idx: u32 = idx
                            .parse()
                            .with_context(|| format!("{}: bad worker index in `{key}`", path.display()))?;
                        match field {
                            "swap_path" => {
                                cfg.swap_paths.insert(idx, PathBuf::from(&value));
                            }
                            "addr" => {
                                cfg.addrs.insert(idx, value.clone());
                            }
                            other => bail!("{}: unknown worker field `{other}`", path.display()),
                        }
                    } else {
                        bail!("{}: unknown key `{key}`", path.display());
                    }
                }
            }
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::parse(&text, path)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.lookahead > 0 && self.prefetch_frames == 0 {
            bail!(
                "{}: lookahead > 0 requires prefetch_frames >= 1",
                path.display()
            );
        }
        if !self.workers.is_power_of_two() {
            bail!("{}: workers must be a power of two", path.display());
        }
        if let Some(total) = self.total_frames() {
            let needed = self.prefetch_frames + 2;
            if total < needed {
                bail!(
                    "{}: memory limit of {} bytes buys only {total} frames of {} bytes; \
                     at least {needed} are needed (prefetch buffer + working frames)",
                    path.display(),
                    self.memory_limit_bytes.unwrap(),
                    self.page_bytes()
                );
            }
        }
        if self.driver == DriverId::LeveledBatch {
            let largest = self.base_unrelin_bytes * (self.max_level as u64 + 1);
            if largest > self.page_bytes() {
                bail!(
                    "{}: largest ciphertext ({largest} B) exceeds the page size ({} B); \
                     raise page_shift",
                    path.display(),
                    self.page_bytes()
                );
            }
            if self.base_relin_bytes < 8 + self.dimension as u64 * 8 {
                bail!(
                    "{}: size table too small for dimension {}",
                    path.display(),
                    self.dimension
                );
            }
        }
        Ok(())
    }

    pub fn batch_driver(&self) -> memprog_core::drivers::LeveledBatchDriver {
        memprog_core::drivers::LeveledBatchDriver::new(
            self.max_level,
            self.dimension,
            self.base_relin_bytes,
            self.base_unrelin_bytes,
        )
    }

    pub fn bit_driver(&self) -> memprog_core::drivers::BitWireDriver {
        memprog_core::drivers::BitWireDriver::new(self.wire_bytes, self.program_seed)
    }

    pub fn profile(&self) -> memprog_core::dsl::DriverProfile {
        match self.driver {
            DriverId::BitWire => memprog_core::dsl::DriverProfile::BitWire,
            DriverId::LeveledBatch => {
                memprog_core::dsl::DriverProfile::Batch(self.batch_driver())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys_and_worker_overrides() {
        let text = "\
# storage setup
driver: bitwire
page_shift: 10
workers: 2
memory_limit_bytes: 4194304
lookahead: 128
prefetch_frames: 8
worker.0.addr: 127.0.0.1:7100
worker.1.addr: 127.0.0.1:7101
worker.1.swap_path: /tmp/w1.swap
";
        let cfg = RunConfig::parse(text, Path::new("test.yaml")).unwrap();
        assert_eq!(cfg.driver, DriverId::BitWire);
        assert_eq!(cfg.page_shift, 10);
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.page_bytes(), 1024 * 16);
        assert_eq!(cfg.total_frames(), Some(256));
        assert_eq!(cfg.addrs[&1], "127.0.0.1:7101");
        assert_eq!(cfg.swap_paths[&1], PathBuf::from("/tmp/w1.swap"));
    }

    #[test]
    fn defaults_match_reference_parameters() {
        let bit = RunConfig::defaults(DriverId::BitWire);
        assert_eq!(bit.page_bytes(), 64 * 1024);
        assert_eq!(bit.lookahead, 10_000);
        assert_eq!(bit.prefetch_frames, 256);
        let batch = RunConfig::defaults(DriverId::LeveledBatch);
        assert_eq!(batch.page_bytes(), 2 * 1024 * 1024);
        assert_eq!(batch.lookahead, 100);
        assert_eq!(batch.prefetch_frames, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("driver: bitwire\nlookahed: 3\n", Path::new("x")).unwrap_err();
        assert!(format!("{err}").contains("unknown key"));
    }

    #[test]
    fn tiny_memory_limit_rejected() {
        let text = "driver: batch\nmemory_limit_bytes: 1000000\n";
        let err = RunConfig::parse(text, Path::new("x")).unwrap_err();
        assert!(format!("{err}").contains("at least"));
    }
}
