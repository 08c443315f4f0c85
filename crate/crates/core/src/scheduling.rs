//! Stage 3 of the planner: turning synchronous swaps into asynchronous
//! issue/finish pairs routed through a prefetch buffer.
//!
//! The replacement stage emits each swap as an adjacent issue+finish pair,
//! which the engine executes synchronously. This stage rewrites them:
//!
//! - A swap-in of storage frame `s` into data frame `f` becomes an
//!   `IssueSwapIn` into a free prefetch slot hoisted up to `lookahead`
//!   records earlier, plus a `FinishSwapIn` and a `CopyFromPrefetch` into
//!   `f` immediately before the original point of use.
//! - A swap-out becomes a `CopyToPrefetch` plus `IssueSwapOut` at the
//!   original eviction point; its `FinishSwapOut` is deferred until a
//!   prefetch-slot allocation would otherwise fail, at which point the
//!   oldest outstanding swap-out is finished and its slot reclaimed.
//!
//! The replacement stage must have been planned with a capacity of
//! `frame_count` data frames; the `prefetch_frames` slots appended after
//! them belong to this stage alone. Dataflow is untouched: data still
//! reaches its planned frame before use, just via the buffer.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::bytecode::{Instruction, InstructionSink, OpCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SchedulerConfig {
    /// How many output records early a swap-in is issued.
    pub lookahead: u64,
    /// Prefetch buffer slots; slot `k` is frame `frame_count + k`.
    pub prefetch_frames: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchedError {
    /// `prefetch_frames` must be at least 1 whenever `lookahead` is.
    NoBuffer,
    BadInput { index: u64, reason: &'static str },
    Source(String),
    Sink(String),
}

impl fmt::Display for SchedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedError::NoBuffer => {
                write!(f, "lookahead > 0 requires at least one prefetch frame")
            }
            SchedError::BadInput { index, reason } => {
                write!(f, "bad scheduler input at record {index}: {reason}")
            }
            SchedError::Source(e) => write!(f, "program source error: {e}"),
            SchedError::Sink(e) => write!(f, "program sink error: {e}"),
        }
    }
}

impl core::error::Error for SchedError {}

/// Recommended prefetch-buffer size from Little's law: the transfers in
/// flight over one storage round trip, in pages.
pub fn little_law_buffer(bandwidth_bytes_per_sec: u64, latency_ns: u64, page_bytes: u64) -> u64 {
    assert!(page_bytes > 0);
    let bytes_in_flight = bandwidth_bytes_per_sec as u128 * latency_ns as u128;
    let den = 1_000_000_000u128 * page_bytes as u128;
    bytes_in_flight.div_ceil(den) as u64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SchedStats {
    pub swap_ins: u64,
    pub swap_outs: u64,
    /// Finish-swap-outs forced by prefetch-slot exhaustion rather than
    /// deferred to the end of the program.
    pub forced_finishes: u64,
    pub instructions_out: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Position {
    Emitted,
    Item(u64),
}

struct SlotState {
    /// Earliest point new work may claim this slot.
    usable_after: Position,
    /// Outstanding swap-out occupying the slot, if any.
    outbound: Option<u64>,
}

struct PendingItem {
    id: u64,
    inst: Instruction,
}

/// An issue/finish pair still subject to the hoist bound: inserts between
/// the two may consume `slack` before they must land past the finish.
struct Pair {
    issue: Position,
    finish_id: u64,
    slack: u64,
}

struct Scheduler<'a> {
    lookahead: usize,
    data_frames: u64,
    pending: VecDeque<PendingItem>,
    next_id: u64,
    slots: Vec<SlotState>,
    /// Outstanding swap-outs, oldest first: (slot, storage, issue item id).
    outbound_fifo: VecDeque<(usize, u64, u64)>,
    /// Last write completion per storage frame, so a swap-in never reads a
    /// frame before the directive that filled it.
    storage_ready: alloc::collections::BTreeMap<u64, Position>,
    pairs: Vec<Pair>,
    stats: SchedStats,
    sink: &'a mut dyn InstructionSink,
}

impl<'a> Scheduler<'a> {
    fn index_of(&self, id: u64) -> Option<usize> {
        self.pending.iter().position(|it| it.id == id)
    }

    fn position_index(&self, pos: Position) -> Option<usize> {
        match pos {
            Position::Emitted => None,
            Position::Item(id) => self.index_of(id),
        }
    }

    fn emit_front(&mut self) -> Result<(), SchedError> {
        let item = self.pending.pop_front().expect("pending nonempty");
        self.sink
            .emit(&item.inst)
            .map_err(|e| SchedError::Sink(alloc::format!("{e}")))?;
        self.stats.instructions_out += 1;
        // Pairs whose finish just emitted no longer constrain inserts.
        self.pairs.retain(|p| p.finish_id != item.id);
        Ok(())
    }

    fn flush_to(&mut self, target: usize) -> Result<(), SchedError> {
        while self.pending.len() > target {
            self.emit_front()?;
        }
        Ok(())
    }

    fn push_back(&mut self, inst: Instruction) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.pending.push_back(PendingItem { id, inst });
        id
    }

    fn insert_at(&mut self, index: usize, inst: Instruction) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.pending.insert(index, PendingItem { id, inst });
        id
    }

    /// Finds the lowest insert index >= `min_index` that keeps every
    /// outstanding hoist pair within its slack when `group` records land
    /// there, then charges the straddled pairs.
    fn insert_point(&mut self, min_index: usize, group: u64) -> usize {
        let mut index = min_index;
        loop {
            let mut pushed = None;
            for pair in &self.pairs {
                let issue_idx = self.position_index(pair.issue);
                let finish_idx = match self.index_of(pair.finish_id) {
                    Some(i) => i,
                    None => continue,
                };
                let straddles = match issue_idx {
                    None => index <= finish_idx,
                    Some(i) => i < index && index <= finish_idx,
                };
                if straddles && pair.slack < group {
                    pushed = Some(pushed.map_or(finish_idx + 1, |p: usize| p.max(finish_idx + 1)));
                }
            }
            match pushed {
                Some(p) => index = p,
                None => break,
            }
        }
        let charged: Vec<usize> = (0..self.pairs.len())
            .filter(|&k| {
                let pair = &self.pairs[k];
                let issue_idx = self.position_index(pair.issue);
                match (issue_idx, self.index_of(pair.finish_id)) {
                    (None, Some(f)) => index <= f,
                    (Some(i), Some(f)) => i < index && index <= f,
                    _ => false,
                }
            })
            .collect();
        for k in charged {
            self.pairs[k].slack -= group;
        }
        index
    }

    /// Places the finish for an outstanding swap-out no earlier than its
    /// issue, freeing its slot. Returns the index just past the finish.
    fn place_finish_out(&mut self, slot: usize, at_least: usize) -> usize {
        let (s, storage, issue_id) = {
            let entry = self
                .outbound_fifo
                .iter()
                .position(|&(sl, _, _)| sl == slot)
                .expect("slot has an outstanding swap-out");
            self.outbound_fifo.remove(entry).unwrap()
        };
        debug_assert_eq!(s, slot);
        let min = match self.index_of(issue_id) {
            Some(i) => (i + 1).max(at_least),
            None => at_least,
        };
        let index = self.insert_point(min, 1);
        let fswo = Instruction::new(OpCode::FinishSwapOut, 0, self.slot_frame(slot), &[], storage);
        let id = self.insert_at(index, fswo);
        self.slots[slot].outbound = None;
        self.slots[slot].usable_after = Position::Item(id);
        self.storage_ready.insert(storage, Position::Item(id));
        self.stats.forced_finishes += 1;
        index + 1
    }

    fn slot_frame(&self, slot: usize) -> u64 {
        self.data_frames + slot as u64
    }

    fn handle_swap_in(&mut self, storage: u64, dest_frame: u64) -> Result<(), SchedError> {
        self.stats.swap_ins += 1;
        // Keep room so the issue-to-finish distance stays within the bound.
        self.flush_to(self.lookahead.saturating_sub(1))?;
        // Issue below the full lookahead by one slot per outstanding pair:
        // each pair typically sees one later issue land between its issue
        // and finish, and this slack keeps a saturated window from pushing
        // every subsequent issue past the outstanding finishes.
        let headroom = self.pairs.len().min(self.pending.len());
        // The read must follow the write that populated this storage frame.
        let mut min_index = match self.storage_ready.get(&storage).copied() {
            Some(Position::Emitted) | None => headroom,
            Some(Position::Item(id)) => match self.index_of(id) {
                Some(i) => (i + 1).max(headroom),
                None => headroom,
            },
        };
        // If that write is still outstanding, finish it first.
        if let Some(&(slot, _, _)) = self
            .outbound_fifo
            .iter()
            .find(|&&(_, s, _)| s == storage)
        {
            min_index = self.place_finish_out(slot, min_index);
        }
        // Pick the slot usable earliest at or after min_index; on a tie the
        // lowest-numbered slot wins.
        let mut choice: Option<(usize, usize)> = None; // (insert index, slot)
        for (slot, state) in self.slots.iter().enumerate() {
            if state.outbound.is_some() {
                continue;
            }
            let usable = match state.usable_after {
                Position::Emitted => 0,
                Position::Item(id) => match self.index_of(id) {
                    Some(i) => i + 1,
                    None => 0,
                },
            };
            let at = usable.max(min_index);
            if choice.map_or(true, |(best, _)| at < best) {
                choice = Some((at, slot));
            }
        }
        let (index, slot) = match choice {
            Some(c) => c,
            None => {
                // Every slot holds an outstanding swap-out: finish the
                // oldest one and reclaim its slot.
                let (slot, _, _) = *self.outbound_fifo.front().expect("slots all outbound");
                let index = self.place_finish_out(slot, min_index);
                (index, slot)
            }
        };
        let index = self.insert_point(index, 1);
        let frame = self.slot_frame(slot);
        let issue = Instruction::new(OpCode::IssueSwapIn, 0, frame, &[], storage);
        let issue_id = self.insert_at(index, issue);
        let finish = Instruction::new(OpCode::FinishSwapIn, 0, frame, &[], storage);
        let finish_id = self.push_back(finish);
        let copy = Instruction::new(OpCode::CopyFromPrefetch, 0, dest_frame, &[frame], 0);
        let copy_id = self.push_back(copy);
        let distance = self.index_of(finish_id).unwrap() - index;
        self.pairs.push(Pair {
            issue: Position::Item(issue_id),
            finish_id,
            slack: (self.lookahead as u64).saturating_sub(distance as u64),
        });
        self.slots[slot].usable_after = Position::Item(copy_id);
        self.flush_to(self.lookahead)?;
        Ok(())
    }

    fn handle_swap_out(&mut self, src_frame: u64, storage: u64) -> Result<(), SchedError> {
        self.stats.swap_outs += 1;
        // Find a slot usable at the tail; inbound slots whose copy is
        // pending qualify because the new work lands after that copy.
        let slot = match self
            .slots
            .iter()
            .position(|s| s.outbound.is_none())
        {
            Some(slot) => slot,
            None => {
                let (slot, _, _) = *self.outbound_fifo.front().expect("slots all outbound");
                self.place_finish_out(slot, 0);
                slot
            }
        };
        let frame = self.slot_frame(slot);
        let copy = Instruction::new(OpCode::CopyToPrefetch, 0, frame, &[src_frame], 0);
        self.push_back(copy);
        let issue = Instruction::new(OpCode::IssueSwapOut, 0, frame, &[], storage);
        let issue_id = self.push_back(issue);
        self.slots[slot].outbound = Some(storage);
        self.outbound_fifo.push_back((slot, storage, issue_id));
        self.storage_ready.insert(storage, Position::Item(issue_id));
        self.flush_to(self.lookahead)?;
        Ok(())
    }

    fn finish(mut self) -> Result<SchedStats, SchedError> {
        self.flush_to(0)?;
        // Writes with no later allocation pressure finish at the very end.
        while let Some((slot, storage, _)) = self.outbound_fifo.pop_front() {
            let fswo =
                Instruction::new(OpCode::FinishSwapOut, 0, self.slot_frame(slot), &[], storage);
            self.sink
                .emit(&fswo)
                .map_err(|e| SchedError::Sink(alloc::format!("{e}")))?;
            self.stats.instructions_out += 1;
        }
        Ok(self.stats)
    }
}

/// Rewrites a synchronous-swap memory program into its prefetching form.
/// `data_frames` is the replacement capacity the program was planned with;
/// prefetch slots occupy frames `data_frames..data_frames + prefetch_frames`.
pub fn schedule(
    data_frames: u64,
    cfg: SchedulerConfig,
    input: impl Iterator<Item = Result<Instruction, SchedError>>,
    sink: &mut dyn InstructionSink,
) -> Result<SchedStats, SchedError> {
    let mut input = input;
    if cfg.lookahead == 0 {
        // Nothing to hoist: the program passes through untouched.
        let mut stats = SchedStats::default();
        for item in input {
            let inst = item?;
            sink.emit(&inst)
                .map_err(|e| SchedError::Sink(alloc::format!("{e}")))?;
            stats.instructions_out += 1;
        }
        return Ok(stats);
    }
    if cfg.prefetch_frames == 0 {
        return Err(SchedError::NoBuffer);
    }
    let mut sched = Scheduler {
        lookahead: cfg.lookahead as usize,
        data_frames,
        pending: VecDeque::new(),
        next_id: 0,
        slots: (0..cfg.prefetch_frames)
            .map(|_| SlotState {
                usable_after: Position::Emitted,
                outbound: None,
            })
            .collect(),
        outbound_fifo: VecDeque::new(),
        storage_ready: alloc::collections::BTreeMap::new(),
        pairs: Vec::new(),
        stats: SchedStats::default(),
        sink,
    };
    let mut index = 0u64;
    while let Some(item) = input.next() {
        let inst = item?;
        match inst.opcode {
            OpCode::IssueSwapIn | OpCode::IssueSwapOut => {
                let finish = input
                    .next()
                    .ok_or(SchedError::BadInput {
                        index,
                        reason: "issue directive without its synchronous finish",
                    })??;
                let want = if inst.opcode == OpCode::IssueSwapIn {
                    OpCode::FinishSwapIn
                } else {
                    OpCode::FinishSwapOut
                };
                if finish.opcode != want
                    || finish.output != inst.output
                    || finish.immediate != inst.immediate
                {
                    return Err(SchedError::BadInput {
                        index,
                        reason: "issue directive not followed by its matching finish",
                    });
                }
                if inst.opcode == OpCode::IssueSwapIn {
                    sched.handle_swap_in(inst.immediate, inst.output)?;
                } else {
                    sched.handle_swap_out(inst.output, inst.immediate)?;
                }
                index += 2;
            }
            OpCode::FinishSwapIn | OpCode::FinishSwapOut => {
                return Err(SchedError::BadInput {
                    index,
                    reason: "stray finish directive",
                })
            }
            OpCode::CopyFromPrefetch | OpCode::CopyToPrefetch => {
                return Err(SchedError::BadInput {
                    index,
                    reason: "program is already scheduled",
                })
            }
            _ => {
                sched.push_back(inst);
                sched.flush_to(sched.lookahead)?;
                index += 1;
            }
        }
    }
    sched.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::VecSink;
    use alloc::vec;
    use alloc::vec::Vec;

    fn nop(i: u64) -> Instruction {
        // Distinct harmless instructions to fill space (constant writes).
        Instruction::new(OpCode::PublicConstant, 1, i, &[], i)
    }

    fn sync_swap_in(storage: u64, frame: u64) -> [Instruction; 2] {
        [
            Instruction::new(OpCode::IssueSwapIn, 0, frame, &[], storage),
            Instruction::new(OpCode::FinishSwapIn, 0, frame, &[], storage),
        ]
    }

    fn sync_swap_out(frame: u64, storage: u64) -> [Instruction; 2] {
        [
            Instruction::new(OpCode::IssueSwapOut, 0, frame, &[], storage),
            Instruction::new(OpCode::FinishSwapOut, 0, frame, &[], storage),
        ]
    }

    fn run(
        data_frames: u64,
        cfg: SchedulerConfig,
        prog: Vec<Instruction>,
    ) -> (SchedStats, Vec<Instruction>) {
        let (mut sink, shared) = VecSink::new();
        let stats = schedule(data_frames, cfg, prog.into_iter().map(Ok), &mut sink).unwrap();
        let out = shared.borrow().clone();
        (stats, out)
    }

    #[test]
    fn little_law_matches_reported_figure() {
        // 10 GB/s at 1 ms with 64 KiB pages: 10 MB in flight, 153 frames.
        assert_eq!(little_law_buffer(10_000_000_000, 1_000_000, 64 * 1024), 153);
        assert_eq!(little_law_buffer(0, 1_000_000, 64 * 1024), 0);
        // 1 GB/s at 100 us with 2 MiB pages rounds up to a single frame.
        assert_eq!(little_law_buffer(1_000_000_000, 100_000, 2 * 1024 * 1024), 1);
    }

    #[test]
    fn swap_in_hoisted_by_lookahead() {
        // Ten fillers, then a swap-in pair, then the use.
        let mut prog: Vec<Instruction> = (0..10).map(nop).collect();
        prog.extend(sync_swap_in(7, 2));
        prog.push(nop(10));
        let cfg = SchedulerConfig {
            lookahead: 3,
            prefetch_frames: 1,
        };
        let (stats, out) = run(8, cfg, prog);
        assert_eq!(stats.swap_ins, 1);
        let issue = out
            .iter()
            .position(|i| i.opcode == OpCode::IssueSwapIn)
            .unwrap();
        let finish = out
            .iter()
            .position(|i| i.opcode == OpCode::FinishSwapIn)
            .unwrap();
        let copy = out
            .iter()
            .position(|i| i.opcode == OpCode::CopyFromPrefetch)
            .unwrap();
        // Issued exactly lookahead records before the finish, which sits
        // with the copy immediately before the use.
        assert_eq!(finish - issue, 3);
        assert_eq!(copy, finish + 1);
        assert_eq!(out[copy].output, 2, "copy lands in the planned frame");
        assert_eq!(out[issue].output, 8, "transfer goes through the prefetch slot");
        assert_eq!(out[copy + 1], nop(10), "use follows immediately");
    }

    #[test]
    fn hoist_clamped_at_program_start() {
        let mut prog: Vec<Instruction> = vec![nop(0)];
        prog.extend(sync_swap_in(3, 1));
        prog.push(nop(1));
        let cfg = SchedulerConfig {
            lookahead: 10,
            prefetch_frames: 2,
        };
        let (_, out) = run(4, cfg, prog);
        assert_eq!(out[0].opcode, OpCode::IssueSwapIn);
    }

    #[test]
    fn overlapping_swap_outs_finish_oldest_first() {
        // B = 1: the second swap-out must finish the first to reclaim the
        // only slot.
        let mut prog: Vec<Instruction> = Vec::new();
        prog.extend(sync_swap_out(0, 5));
        prog.push(nop(0));
        prog.extend(sync_swap_out(1, 6));
        prog.push(nop(1));
        let cfg = SchedulerConfig {
            lookahead: 4,
            prefetch_frames: 1,
        };
        let (stats, out) = run(4, cfg, prog);
        assert_eq!(stats.swap_outs, 2);
        let ops: Vec<OpCode> = out.iter().map(|i| i.opcode).collect();
        let first_fswo = ops.iter().position(|&o| o == OpCode::FinishSwapOut).unwrap();
        let second_cptp = ops
            .iter()
            .enumerate()
            .filter(|(_, &o)| o == OpCode::CopyToPrefetch)
            .nth(1)
            .unwrap()
            .0;
        assert!(
            first_fswo < second_cptp,
            "second copy-to-prefetch is preceded by finishing the oldest swap-out"
        );
        assert_eq!(out[first_fswo].immediate, 5);
    }

    #[test]
    fn swap_out_finish_deferred_to_end_without_pressure() {
        let mut prog: Vec<Instruction> = Vec::new();
        prog.extend(sync_swap_out(0, 9));
        prog.push(nop(0));
        prog.push(nop(1));
        let cfg = SchedulerConfig {
            lookahead: 2,
            prefetch_frames: 2,
        };
        let (stats, out) = run(4, cfg, prog);
        assert_eq!(stats.forced_finishes, 0);
        assert_eq!(out.last().unwrap().opcode, OpCode::FinishSwapOut);
    }

    #[test]
    fn swap_in_after_swap_out_of_same_storage_frame_waits() {
        // Evict frame 0 to storage 4, then bring storage 4 back into frame
        // 1 shortly after: the issue cannot be hoisted past the write.
        let mut prog: Vec<Instruction> = Vec::new();
        prog.extend(sync_swap_out(0, 4));
        prog.push(nop(0));
        prog.extend(sync_swap_in(4, 1));
        prog.push(nop(1));
        let cfg = SchedulerConfig {
            lookahead: 8,
            prefetch_frames: 2,
        };
        let (_, out) = run(4, cfg, prog);
        let fswo = out
            .iter()
            .position(|i| i.opcode == OpCode::FinishSwapOut && i.immediate == 4)
            .unwrap();
        let iswi = out
            .iter()
            .position(|i| i.opcode == OpCode::IssueSwapIn && i.immediate == 4)
            .unwrap();
        assert!(fswo < iswi, "read of storage 4 follows completed write");
    }

    #[test]
    fn hoist_bound_never_exceeded() {
        // A stream with many swap-ins through a small buffer; verify that
        // no issue sits more than lookahead records before its finish.
        let mut prog: Vec<Instruction> = Vec::new();
        for k in 0..20u64 {
            prog.extend(sync_swap_in(k, k % 4));
            prog.push(nop(k));
            prog.push(nop(100 + k));
        }
        let cfg = SchedulerConfig {
            lookahead: 5,
            prefetch_frames: 2,
        };
        let (_, out) = run(4, cfg, prog);
        for (i, inst) in out.iter().enumerate() {
            if inst.opcode == OpCode::IssueSwapIn {
                let finish = out[i..]
                    .iter()
                    .position(|j| {
                        j.opcode == OpCode::FinishSwapIn
                            && j.output == inst.output
                            && j.immediate == inst.immediate
                    })
                    .unwrap();
                assert!(finish <= 5, "issue at {i} is {finish} records early");
            }
        }
    }

    #[test]
    fn zero_lookahead_is_identity() {
        let mut prog: Vec<Instruction> = vec![nop(0)];
        prog.extend(sync_swap_in(1, 0));
        prog.push(nop(1));
        let cfg = SchedulerConfig {
            lookahead: 0,
            prefetch_frames: 0,
        };
        let (_, out) = run(4, cfg, prog.clone());
        assert_eq!(out, prog);
    }

    #[test]
    fn buffer_required_when_hoisting() {
        let cfg = SchedulerConfig {
            lookahead: 4,
            prefetch_frames: 0,
        };
        let (mut sink, _) = VecSink::new();
        let err = schedule(4, cfg, core::iter::empty(), &mut sink).unwrap_err();
        assert_eq!(err, SchedError::NoBuffer);
    }

    #[test]
    fn already_scheduled_input_rejected() {
        let cfg = SchedulerConfig {
            lookahead: 2,
            prefetch_frames: 1,
        };
        let prog = vec![Instruction::new(OpCode::CopyFromPrefetch, 0, 0, &[4], 0)];
        let (mut sink, _) = VecSink::new();
        let err = schedule(4, cfg, prog.into_iter().map(Ok), &mut sink).unwrap_err();
        assert!(matches!(err, SchedError::BadInput { .. }));
    }
}
