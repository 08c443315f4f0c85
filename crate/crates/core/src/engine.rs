//! The interpreter: executes a memory program against a flat memory array.
//!
//! Protocol instructions are expanded into driver calls (a ripple-carry
//! adder chain for `IntAdd`, a borrow chain for comparisons, and so on for
//! the bit-wire engine; one-to-one calls for the batch engine). Directives
//! never touch the driver: swaps go to the storage backend, prefetch
//! copies move pages inside the array, network directives go to the
//! worker channel.
//!
//! All intra-instruction temporaries live in a bounded scratch area, so
//! the engine's footprint is the memory array plus a constant.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::bytecode::{
    AddressUnit, BytecodeError, Dialect, DriverId, Instruction, OpCode, ProgramHeader,
};
use crate::drivers::{BitWireDriver, Ciphertext, DriverError, LeveledBatchDriver};
use crate::sim::{ExecClock, StorageBackend, StorageError, Token};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecError {
    Bytecode(BytecodeError),
    Driver(DriverError),
    Storage(StorageError),
    Channel(String),
    /// Input stream exhausted or malformed.
    Input(String),
    Output(String),
    CorruptProgram { index: u64, reason: &'static str },
    Incompatible { opcode: OpCode, driver: DriverId },
    OutOfBounds { index: u64, addr: u64 },
    HeaderMismatch(&'static str),
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecError::Bytecode(e) => write!(f, "bytecode: {e}"),
            ExecError::Driver(e) => write!(f, "driver: {e}"),
            ExecError::Storage(e) => write!(f, "storage: {e}"),
            ExecError::Channel(e) => write!(f, "channel: {e}"),
            ExecError::Input(e) => write!(f, "input: {e}"),
            ExecError::Output(e) => write!(f, "output: {e}"),
            ExecError::CorruptProgram { index, reason } => {
                write!(f, "corrupt program at instruction {index}: {reason}")
            }
            ExecError::Incompatible { opcode, driver } => write!(
                f,
                "instruction {} is not supported by the {driver:?} engine",
                opcode.mnemonic()
            ),
            ExecError::OutOfBounds { index, addr } => {
                write!(f, "instruction {index} references address {addr:#x} out of bounds")
            }
            ExecError::HeaderMismatch(what) => write!(f, "program header mismatch: {what}"),
        }
    }
}

impl core::error::Error for ExecError {}

impl From<BytecodeError> for ExecError {
    fn from(e: BytecodeError) -> Self {
        ExecError::Bytecode(e)
    }
}

impl From<DriverError> for ExecError {
    fn from(e: DriverError) -> Self {
        ExecError::Driver(e)
    }
}

impl From<StorageError> for ExecError {
    fn from(e: StorageError) -> Self {
        ExecError::Storage(e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelError {
    Closed(u32),
    Transport(String),
}

impl fmt::Display for ChannelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelError::Closed(p) => write!(f, "channel to worker {p} is closed"),
            ChannelError::Transport(e) => write!(f, "transport: {e}"),
        }
    }
}

impl core::error::Error for ChannelError {}

/// Message transport between workers: reliable and ordered per peer pair.
/// The engine implements the directive semantics on top (posted receives
/// are filled, in posting order, when a barrier runs).
pub trait WorkerChannel {
    fn send(&mut self, peer: u32, data: &[u8]) -> Result<(), ChannelError>;
    /// Blocking receive of the next message from `peer`.
    fn recv(&mut self, peer: u32) -> Result<Vec<u8>, ChannelError>;
}

/// Channel for single-worker programs; any use is a program bug.
pub struct NoChannel;

impl WorkerChannel for NoChannel {
    fn send(&mut self, peer: u32, _data: &[u8]) -> Result<(), ChannelError> {
        Err(ChannelError::Closed(peer))
    }

    fn recv(&mut self, peer: u32) -> Result<Vec<u8>, ChannelError> {
        Err(ChannelError::Closed(peer))
    }
}

/// Per-call simulated compute costs, in nanoseconds. A bit-wire driver
/// call is one gate; a batch driver call is one ciphertext operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CostModel {
    pub bit_gate_ns: u64,
    pub batch_op_ns: u64,
    /// One page moved between a prefetch slot and its frame.
    pub page_copy_ns: u64,
    /// Dispatch overhead charged once per protocol instruction.
    pub instruction_base_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            bit_gate_ns: 50,
            batch_op_ns: 100_000,
            page_copy_ns: 5_000,
            instruction_base_ns: 1_000,
        }
    }
}

/// Execution counters. Under the simulator `total_virtual_time_ns` equals
/// `compute_time_ns + stall_time_ns` exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ExecStats {
    pub instructions_executed: u64,
    pub driver_calls: u64,
    pub swap_ins: u64,
    pub swap_outs: u64,
    pub finish_swapin_stalls: u64,
    pub stall_time_ns: u64,
    pub compute_time_ns: u64,
    pub total_virtual_time_ns: u64,
    /// Distinct frames the program ever touched; bounded by the header's
    /// frame_count + prefetch_frames.
    pub resident_highwater_frames: u64,
    pub network_bytes: u64,
    pub output_values: u64,
    /// Virtual times at which PrintStats directives ran.
    pub snapshots: Vec<u64>,
}

/// Values consumed by Input instructions, in emission order.
pub trait ValueSource {
    fn next_int(&mut self) -> Result<u128, String>;
    fn next_row(&mut self, dimension: usize) -> Result<Vec<i64>, String>;
}

/// Values produced by Output instructions, in emission order.
pub trait ValueSink {
    fn push_int(&mut self, width: u16, value: u128) -> Result<(), String>;
    fn push_row(&mut self, row: &[i64]) -> Result<(), String>;
}

#[derive(Default)]
pub struct VecValueSource {
    pub ints: alloc::collections::VecDeque<u128>,
    pub rows: alloc::collections::VecDeque<Vec<i64>>,
}

impl ValueSource for VecValueSource {
    fn next_int(&mut self) -> Result<u128, String> {
        self.ints.pop_front().ok_or_else(|| String::from("input underrun"))
    }

    fn next_row(&mut self, dimension: usize) -> Result<Vec<i64>, String> {
        let row = self
            .rows
            .pop_front()
            .ok_or_else(|| String::from("input underrun"))?;
        if row.len() != dimension {
            return Err(format!("input row has {} values, expected {dimension}", row.len()));
        }
        Ok(row)
    }
}

#[derive(Default)]
pub struct VecValueSink {
    pub ints: Vec<u128>,
    pub rows: Vec<Vec<i64>>,
}

impl ValueSink for VecValueSink {
    fn push_int(&mut self, _width: u16, value: u128) -> Result<(), String> {
        self.ints.push(value);
        Ok(())
    }

    fn push_row(&mut self, row: &[i64]) -> Result<(), String> {
        self.rows.push(row.to_vec());
        Ok(())
    }
}

/// Everything one worker's execution needs, besides the driver.
pub struct ExecEnv<'a> {
    pub storage: &'a mut dyn StorageBackend,
    pub channel: &'a mut dyn WorkerChannel,
    pub clock: &'a mut dyn ExecClock,
    pub cost: CostModel,
    pub input: &'a mut dyn ValueSource,
    pub output: &'a mut dyn ValueSink,
}

struct Core<'a, 'b> {
    env: &'a mut ExecEnv<'b>,
    memory: Vec<u8>,
    unit_bytes: usize,
    page_units: u64,
    page_bytes: usize,
    total_frames: u64,
    stats: ExecStats,
    touched: Vec<bool>,
    inflight_in: BTreeMap<u64, Token>,
    inflight_out: BTreeMap<u64, Token>,
    /// Posted receives awaiting the next barrier: (peer, offset, len).
    pending_recv: Vec<(u32, usize, usize)>,
    index: u64,
}

impl<'a, 'b> Core<'a, 'b> {
    fn new(header: &ProgramHeader, unit_bytes: usize, env: &'a mut ExecEnv<'b>) -> Result<Self, ExecError> {
        let total_frames = header.total_frames();
        let page_units = header.page_units();
        let bytes = total_frames
            .checked_mul(page_units)
            .and_then(|u| u.checked_mul(unit_bytes as u64))
            .filter(|&b| b <= usize::MAX as u64)
            .ok_or(ExecError::HeaderMismatch("memory array too large"))? as usize;
        Ok(Core {
            env,
            memory: vec![0u8; bytes],
            unit_bytes,
            page_units,
            page_bytes: page_units as usize * unit_bytes,
            total_frames,
            stats: ExecStats::default(),
            touched: vec![false; total_frames as usize],
            inflight_in: BTreeMap::new(),
            inflight_out: BTreeMap::new(),
            pending_recv: Vec::new(),
            index: 0,
        })
    }

    fn touch_frame(&mut self, frame: u64) -> Result<(), ExecError> {
        if frame >= self.total_frames {
            return Err(ExecError::OutOfBounds {
                index: self.index,
                addr: frame << 32, // frame-number context; not a unit address
            });
        }
        if !self.touched[frame as usize] {
            self.touched[frame as usize] = true;
            self.stats.resident_highwater_frames += 1;
        }
        Ok(())
    }

    /// Byte range of `span` units at unit address `addr`; the span must
    /// stay inside one frame.
    fn range(&mut self, addr: u64, span: u64) -> Result<core::ops::Range<usize>, ExecError> {
        if span == 0 {
            return Err(ExecError::CorruptProgram {
                index: self.index,
                reason: "zero-length operand",
            });
        }
        let frame = addr / self.page_units;
        let last = (addr + span - 1) / self.page_units;
        if frame != last {
            return Err(ExecError::CorruptProgram {
                index: self.index,
                reason: "operand straddles a frame boundary",
            });
        }
        self.touch_frame(frame)?;
        let start = addr as usize * self.unit_bytes;
        let end = start + span as usize * self.unit_bytes;
        if end > self.memory.len() {
            return Err(ExecError::OutOfBounds {
                index: self.index,
                addr,
            });
        }
        Ok(start..end)
    }

    fn frame_bytes(&mut self, frame: u64) -> Result<core::ops::Range<usize>, ExecError> {
        self.touch_frame(frame)?;
        let start = frame as usize * self.page_bytes;
        Ok(start..start + self.page_bytes)
    }

    fn charge(&mut self, calls: u64, per_call_ns: u64) {
        self.stats.driver_calls += calls;
        let ns = calls * per_call_ns;
        self.stats.compute_time_ns += ns;
        self.env.clock.advance(ns);
    }

    /// Handles a directive; returns true on Halt.
    fn directive(&mut self, inst: &Instruction) -> Result<bool, ExecError> {
        match inst.opcode {
            OpCode::IssueSwapIn => {
                let frame = inst.output;
                self.touch_frame(frame)?;
                if self.inflight_in.contains_key(&frame) {
                    return Err(ExecError::CorruptProgram {
                        index: self.index,
                        reason: "swap-in issued into a frame with one in flight",
                    });
                }
                let now = self.env.clock.now_ns();
                let token = self
                    .env
                    .storage
                    .issue_read(inst.immediate, self.page_bytes, now)?;
                self.inflight_in.insert(frame, token);
                self.stats.swap_ins += 1;
            }
            OpCode::FinishSwapIn => {
                let frame = inst.output;
                let token = self.inflight_in.remove(&frame).ok_or(ExecError::CorruptProgram {
                    index: self.index,
                    reason: "finish-swap-in without a matching issue",
                })?;
                let range = self.frame_bytes(frame)?;
                let now = self.env.clock.now_ns();
                let done = self
                    .env
                    .storage
                    .wait(token, Some(&mut self.memory[range]), now)?;
                if done > now {
                    self.stats.finish_swapin_stalls += 1;
                    self.stats.stall_time_ns += done - now;
                    self.env.clock.settle(done);
                }
            }
            OpCode::IssueSwapOut => {
                let frame = inst.output;
                if self.inflight_out.contains_key(&inst.immediate) {
                    return Err(ExecError::CorruptProgram {
                        index: self.index,
                        reason: "two writes in flight for one storage frame",
                    });
                }
                let range = self.frame_bytes(frame)?;
                let now = self.env.clock.now_ns();
                let token = self
                    .env
                    .storage
                    .issue_write(inst.immediate, &self.memory[range], now)?;
                self.inflight_out.insert(inst.immediate, token);
                self.stats.swap_outs += 1;
            }
            OpCode::FinishSwapOut => {
                let token =
                    self.inflight_out
                        .remove(&inst.immediate)
                        .ok_or(ExecError::CorruptProgram {
                            index: self.index,
                            reason: "finish-swap-out without a matching issue",
                        })?;
                let now = self.env.clock.now_ns();
                let done = self.env.storage.wait(token, None, now)?;
                if done > now {
                    self.stats.stall_time_ns += done - now;
                    self.env.clock.settle(done);
                }
            }
            OpCode::CopyFromPrefetch | OpCode::CopyToPrefetch => {
                let dst = inst.output;
                let src = inst.inputs[0];
                if dst == src {
                    return Err(ExecError::CorruptProgram {
                        index: self.index,
                        reason: "prefetch copy onto itself",
                    });
                }
                let src_range = self.frame_bytes(src)?;
                let dst_range = self.frame_bytes(dst)?;
                self.memory.copy_within(src_range, dst_range.start);
                self.stats.compute_time_ns += self.env.cost.page_copy_ns;
                self.env.clock.advance(self.env.cost.page_copy_ns);
            }
            OpCode::NetworkPostSend => {
                let len = inst.network_size();
                let range = self.range(inst.inputs[0], len)?;
                let bytes = &self.memory[range];
                self.env
                    .channel
                    .send(inst.network_peer(), bytes)
                    .map_err(|e| ExecError::Channel(format!("{e}")))?;
                self.stats.network_bytes += len * self.unit_bytes as u64;
            }
            OpCode::NetworkPostReceive => {
                let len = inst.network_size();
                let range = self.range(inst.output, len)?;
                self.pending_recv
                    .push((inst.network_peer(), range.start, range.len()));
            }
            OpCode::NetworkBarrier => {
                // Fill posted receives in posting order; sends need no
                // completion of our own.
                let pending = core::mem::take(&mut self.pending_recv);
                for (peer, offset, len) in pending {
                    let data = self
                        .env
                        .channel
                        .recv(peer)
                        .map_err(|e| ExecError::Channel(format!("{e}")))?;
                    if data.len() != len {
                        return Err(ExecError::Channel(format!(
                            "received {} bytes from worker {peer}, expected {len}",
                            data.len()
                        )));
                    }
                    self.memory[offset..offset + len].copy_from_slice(&data);
                    self.stats.network_bytes += len as u64;
                }
            }
            OpCode::PrintStats => {
                self.stats.snapshots.push(self.env.clock.now_ns());
            }
            OpCode::Halt => return Ok(true),
            _ => unreachable!("not a directive"),
        }
        Ok(false)
    }

    fn finish(mut self) -> Result<ExecStats, ExecError> {
        if !self.inflight_in.is_empty() || !self.inflight_out.is_empty() {
            return Err(ExecError::CorruptProgram {
                index: self.index,
                reason: "transfers still in flight at program end",
            });
        }
        self.stats.total_virtual_time_ns = self.env.clock.now_ns();
        Ok(self.stats)
    }
}

// ---------------------------------------------------------------------------
// Bit-wire engine

/// Scratch wires for subcircuit temporaries; they never live in the
/// memory array.
struct Wires {
    driver: BitWireDriver,
    one: Vec<u8>,
}

impl Wires {
    fn new(driver: &BitWireDriver) -> Wires {
        let wb = driver.wire_bytes();
        let mut one = vec![0u8; wb];
        driver.constant(true, &mut one);
        Wires {
            driver: driver.clone(),
            one,
        }
    }
}

pub fn run_bit_program(
    header: &ProgramHeader,
    program: impl Iterator<Item = Result<Instruction, ExecError>>,
    driver: &BitWireDriver,
    env: &mut ExecEnv<'_>,
) -> Result<ExecStats, ExecError> {
    if header.driver != DriverId::BitWire {
        return Err(ExecError::HeaderMismatch("program wants the batch driver"));
    }
    if header.dialect != Dialect::Physical {
        return Err(ExecError::HeaderMismatch("engine runs memory programs only"));
    }
    if header.address_unit != AddressUnit::Wire {
        return Err(ExecError::HeaderMismatch("bit-wire programs are wire-addressed"));
    }
    let mut core = Core::new(header, driver.wire_bytes(), env)?;
    let mut wires = Wires::new(driver);
    let wb = driver.wire_bytes();
    // The constant wire above counts like any other gate output.
    let gate_ns = core.env.cost.bit_gate_ns;
    core.charge(1, gate_ns);

    for item in program {
        let inst = item?;
        if inst.opcode.is_directive() {
            if core.directive(&inst)? {
                break;
            }
        } else {
            let base = core.env.cost.instruction_base_ns;
            core.stats.compute_time_ns += base;
            core.env.clock.advance(base);
            exec_bit_instruction(&mut core, &mut wires, wb, &inst)?;
        }
        core.stats.instructions_executed += 1;
        core.index += 1;
    }
    core.finish()
}

fn exec_bit_instruction(
    core: &mut Core<'_, '_>,
    w: &mut Wires,
    wb: usize,
    inst: &Instruction,
) -> Result<(), ExecError> {
    let width = inst.width as u64;
    if width == 0 || width > 128 {
        return Err(ExecError::CorruptProgram {
            index: core.index,
            reason: "bad width",
        });
    }
    let gate_ns = core.env.cost.bit_gate_ns;
    // Wire ranges are validated up front; all gates then address bytes.
    // Comparisons carry their operand width; their output is one wire.
    let out_span = match inst.opcode {
        OpCode::IntCompareGe | OpCode::IntCompareEq => 1,
        _ => width,
    };
    let out = if inst.opcode.writes_output() {
        Some(core.range(inst.output, out_span)?.start)
    } else {
        None
    };
    let mut ins = [0usize; 3];
    for (k, &addr) in inst.inputs().iter().enumerate() {
        let span = if inst.opcode == OpCode::Mux && k == 0 { 1 } else { width };
        ins[k] = core.range(addr, span)?.start;
    }

    let mut calls = 0u64;
    // Wire `i` of the operand based at byte offset `base`.
    macro_rules! wire {
        ($base:expr, $i:expr) => {{
            let at = $base + ($i as usize) * wb;
            &core.memory[at..at + wb]
        }};
    }
    macro_rules! gate {
        (and $a:expr, $b:expr => $out:expr) => {{
            w.driver.gate_and($a, $b, $out).map_err(ExecError::Driver)?;
            calls += 1;
        }};
        (xor $a:expr, $b:expr => $out:expr) => {{
            w.driver.gate_xor($a, $b, $out).map_err(ExecError::Driver)?;
            calls += 1;
        }};
    }
    // Write scratch wire `src` into memory wire `i` of the output operand.
    macro_rules! store {
        ($base:expr, $i:expr, $src:expr) => {{
            let at = $base + ($i as usize) * wb;
            core.memory[at..at + wb].copy_from_slice($src);
        }};
    }
    // Per-instruction scratch; subcircuit temporaries never touch the
    // memory array.
    let mut s1 = vec![0u8; wb];
    let mut s2 = vec![0u8; wb];
    let mut s3 = vec![0u8; wb];
    let mut s4 = vec![0u8; wb];
    let mut carry = vec![0u8; wb];

    match inst.opcode {
        OpCode::Input => {
            let v = core.env.input.next_int().map_err(ExecError::Input)?;
            if width < 128 && (v >> width) != 0 {
                return Err(ExecError::Input(format!(
                    "input value {v} does not fit in {width} bits"
                )));
            }
            let base = out.unwrap();
            for i in 0..width {
                w.driver.input((v >> i) & 1 == 1, &mut s1);
                calls += 1;
                store!(base, i, &s1);
            }
        }
        OpCode::Output => {
            let base = ins[0];
            let mut v: u128 = 0;
            for i in 0..width {
                let bit = w.driver.reveal(wire!(base, i)).map_err(ExecError::Driver)?;
                calls += 1;
                v |= (bit as u128) << i;
            }
            core.env
                .output
                .push_int(inst.width, v)
                .map_err(ExecError::Output)?;
            core.stats.output_values += 1;
        }
        OpCode::PublicConstant => {
            let base = out.unwrap();
            for i in 0..width {
                let bit = if i < 64 { (inst.immediate >> i) & 1 == 1 } else { false };
                w.driver.constant(bit, &mut s1);
                calls += 1;
                store!(base, i, &s1);
            }
        }
        OpCode::IntAdd => {
            // Ripple-carry full adders: sum = a^b^c, c' = (a&b)^((a^b)&c).
            let (a0, b0, o) = (ins[0], ins[1], out.unwrap());
            for i in 0..width {
                gate!(xor wire!(a0, i), wire!(b0, i) => &mut s1); // a^b
                if i == 0 {
                    store!(o, i, &s1);
                } else {
                    gate!(xor &s1, &carry => &mut s2); // sum
                    store!(o, i, &s2);
                }
                if i + 1 < width {
                    gate!(and wire!(a0, i), wire!(b0, i) => &mut s3); // a&b
                    if i == 0 {
                        carry.copy_from_slice(&s3);
                    } else {
                        gate!(and &s1, &carry => &mut s4); // (a^b)&c
                        gate!(xor &s3, &s4 => &mut carry);
                    }
                }
            }
        }
        OpCode::IntSub | OpCode::IntCompareGe => {
            // Borrow chain: d = a^b^bor, bor' = (!a & b) ^ (!(a^b) & bor).
            let (a0, b0) = (ins[0], ins[1]);
            let write_diff = inst.opcode == OpCode::IntSub;
            for i in 0..width {
                gate!(xor wire!(a0, i), wire!(b0, i) => &mut s1); // a^b
                if write_diff {
                    let o = out.unwrap();
                    if i == 0 {
                        store!(o, i, &s1);
                    } else {
                        gate!(xor &s1, &carry => &mut s2);
                        store!(o, i, &s2);
                    }
                }
                gate!(xor wire!(a0, i), &w.one => &mut s3); // !a
                gate!(and &s3, wire!(b0, i) => &mut s4); // !a & b
                if i == 0 {
                    carry.copy_from_slice(&s4);
                } else {
                    gate!(xor &s1, &w.one => &mut s2); // !(a^b)
                    gate!(and &s2, &carry => &mut s1);
                    gate!(xor &s4, &s1 => &mut s2);
                    carry.copy_from_slice(&s2);
                }
            }
            if inst.opcode == OpCode::IntCompareGe {
                // a >= b iff subtraction produces no final borrow.
                gate!(xor &carry, &w.one => &mut s1);
                store!(out.unwrap(), 0u64, &s1);
            }
        }
        OpCode::IntCompareEq => {
            let (a0, b0, o) = (ins[0], ins[1], out.unwrap());
            carry.copy_from_slice(&w.one); // running conjunction
            for i in 0..width {
                gate!(xor wire!(a0, i), wire!(b0, i) => &mut s1);
                gate!(xor &s1, &w.one => &mut s2); // bits equal
                gate!(and &carry, &s2 => &mut s3);
                carry.copy_from_slice(&s3);
            }
            store!(o, 0u64, &carry);
        }
        OpCode::IntIncrement => {
            // Half adders with carry-in 1.
            let (a0, o) = (ins[0], out.unwrap());
            carry.copy_from_slice(&w.one);
            for i in 0..width {
                gate!(xor wire!(a0, i), &carry => &mut s1);
                if i + 1 < width {
                    gate!(and wire!(a0, i), &carry => &mut s2);
                    carry.copy_from_slice(&s2);
                }
                store!(o, i, &s1);
            }
        }
        OpCode::BitAnd | OpCode::BitXor | OpCode::BitOr => {
            let (a0, b0, o) = (ins[0], ins[1], out.unwrap());
            for i in 0..width {
                match inst.opcode {
                    OpCode::BitAnd => gate!(and wire!(a0, i), wire!(b0, i) => &mut s1),
                    OpCode::BitXor => gate!(xor wire!(a0, i), wire!(b0, i) => &mut s1),
                    OpCode::BitOr => {
                        // a | b = (a ^ b) ^ (a & b)
                        gate!(xor wire!(a0, i), wire!(b0, i) => &mut s2);
                        gate!(and wire!(a0, i), wire!(b0, i) => &mut s3);
                        gate!(xor &s2, &s3 => &mut s1);
                    }
                    _ => unreachable!(),
                }
                store!(o, i, &s1);
            }
        }
        OpCode::BitNot => {
            let (a0, o) = (ins[0], out.unwrap());
            for i in 0..width {
                gate!(xor wire!(a0, i), &w.one => &mut s1);
                store!(o, i, &s1);
            }
        }
        OpCode::ShiftLeftConst | OpCode::ShiftRightConst => {
            let (a0, o) = (ins[0], out.unwrap());
            let k = inst.immediate;
            if k >= width {
                return Err(ExecError::CorruptProgram {
                    index: core.index,
                    reason: "shift amount exceeds width",
                });
            }
            let left = inst.opcode == OpCode::ShiftLeftConst;
            // Shifts relabel wires; vacated positions get constant zeros.
            let mut buf = vec![0u8; width as usize * wb];
            for i in 0..width {
                let src = if left {
                    (i >= k).then(|| i - k)
                } else {
                    (i + k < width).then(|| i + k)
                };
                let dst = i as usize * wb;
                match src {
                    Some(s) => buf[dst..dst + wb].copy_from_slice(wire!(a0, s)),
                    None => {
                        w.driver.constant(false, &mut buf[dst..dst + wb]);
                        calls += 1;
                    }
                }
            }
            core.memory[o..o + width as usize * wb].copy_from_slice(&buf);
        }
        OpCode::Mux => {
            // Per bit: out = ((t ^ f) & s) ^ f.
            let (sel0, t0, f0, o) = (ins[0], ins[1], ins[2], out.unwrap());
            s4.copy_from_slice(wire!(sel0, 0u64));
            for i in 0..width {
                gate!(xor wire!(t0, i), wire!(f0, i) => &mut s1);
                gate!(and &s1, &s4 => &mut s2);
                gate!(xor &s2, wire!(f0, i) => &mut s3);
                store!(o, i, &s3);
            }
        }
        OpCode::Copy => {
            let (a0, o) = (ins[0], out.unwrap());
            let len = width as usize * wb;
            core.memory.copy_within(a0..a0 + len, o);
        }
        op if op.is_batch() => {
            return Err(ExecError::Incompatible {
                opcode: op,
                driver: DriverId::BitWire,
            })
        }
        _ => {
            return Err(ExecError::CorruptProgram {
                index: core.index,
                reason: "unhandled opcode",
            })
        }
    }
    core.charge(calls, gate_ns);
    Ok(())
}

// ---------------------------------------------------------------------------
// Batch engine

pub fn run_batch_program(
    header: &ProgramHeader,
    program: impl Iterator<Item = Result<Instruction, ExecError>>,
    driver: &LeveledBatchDriver,
    env: &mut ExecEnv<'_>,
) -> Result<ExecStats, ExecError> {
    if header.driver != DriverId::LeveledBatch {
        return Err(ExecError::HeaderMismatch("program wants the bit-wire driver"));
    }
    if header.dialect != Dialect::Physical {
        return Err(ExecError::HeaderMismatch("engine runs memory programs only"));
    }
    if header.address_unit != AddressUnit::Byte {
        return Err(ExecError::HeaderMismatch("batch programs are byte-addressed"));
    }
    let mut core = Core::new(header, 1, env)?;
    for item in program {
        let inst = item?;
        if inst.opcode.is_directive() {
            if core.directive(&inst)? {
                break;
            }
        } else {
            let base = core.env.cost.instruction_base_ns;
            core.stats.compute_time_ns += base;
            core.env.clock.advance(base);
            exec_batch_instruction(&mut core, driver, &inst)?;
        }
        core.stats.instructions_executed += 1;
        core.index += 1;
    }
    core.finish()
}

fn read_ct(
    core: &mut Core<'_, '_>,
    driver: &LeveledBatchDriver,
    addr: u64,
) -> Result<Ciphertext, ExecError> {
    let peek = core.range(addr, 8)?;
    let size = driver.peek_size(&core.memory[peek])?;
    let range = core.range(addr, size)?;
    Ok(driver.read_record(&core.memory[range])?)
}

fn write_ct(
    core: &mut Core<'_, '_>,
    driver: &LeveledBatchDriver,
    addr: u64,
    ct: &Ciphertext,
) -> Result<(), ExecError> {
    let size = driver.size_of(ct.level, ct.relinearized)?;
    let range = core.range(addr, size)?;
    let mut buf = vec![0u8; range.len()];
    driver.write_record(ct, &mut buf)?;
    core.memory[range].copy_from_slice(&buf);
    Ok(())
}

fn exec_batch_instruction(
    core: &mut Core<'_, '_>,
    driver: &LeveledBatchDriver,
    inst: &Instruction,
) -> Result<(), ExecError> {
    let op_ns = core.env.cost.batch_op_ns;
    match inst.opcode {
        OpCode::Input => {
            let row = core
                .env
                .input
                .next_row(driver.dimension)
                .map_err(ExecError::Input)?;
            let ct = driver.fresh(row)?;
            write_ct(core, driver, inst.output, &ct)?;
            core.charge(1, op_ns);
        }
        OpCode::Output => {
            let ct = read_ct(core, driver, inst.inputs[0])?;
            core.env.output.push_row(&ct.slots).map_err(ExecError::Output)?;
            core.stats.output_values += 1;
            core.charge(1, op_ns);
        }
        OpCode::BatchAdd | OpCode::BatchMulNoRelin => {
            let a = read_ct(core, driver, inst.inputs[0])?;
            let b = read_ct(core, driver, inst.inputs[1])?;
            let r = if inst.opcode == OpCode::BatchAdd {
                driver.add(&a, &b)?
            } else {
                driver.mul_no_relin(&a, &b)?
            };
            write_ct(core, driver, inst.output, &r)?;
            core.charge(1, op_ns);
        }
        OpCode::BatchRelinRescale => {
            let a = read_ct(core, driver, inst.inputs[0])?;
            let r = driver.relin_rescale(&a)?;
            write_ct(core, driver, inst.output, &r)?;
            core.charge(1, op_ns);
        }
        OpCode::BatchAddPlain | OpCode::BatchMulPlain => {
            let a = read_ct(core, driver, inst.inputs[0])?;
            let plain = inst.immediate as i64;
            let r = if inst.opcode == OpCode::BatchAddPlain {
                driver.add_plain(&a, plain)?
            } else {
                driver.mul_plain(&a, plain)?
            };
            write_ct(core, driver, inst.output, &r)?;
            core.charge(1, op_ns);
        }
        OpCode::Copy => {
            let ct = read_ct(core, driver, inst.inputs[0])?;
            write_ct(core, driver, inst.output, &ct)?;
            core.charge(1, op_ns);
        }
        op if op.is_int() || op == OpCode::PublicConstant => {
            return Err(ExecError::Incompatible {
                opcode: op,
                driver: DriverId::LeveledBatch,
            })
        }
        _ => {
            return Err(ExecError::CorruptProgram {
                index: core.index,
                reason: "unhandled opcode",
            })
        }
    }
    Ok(())
}
