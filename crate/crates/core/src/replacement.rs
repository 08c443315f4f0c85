//! Stage 2 of the planner: next-use annotation and page replacement.
//!
//! A backward pass annotates every operand access with the instruction
//! index of the page's next use. A forward pass then runs the replacement
//! policy, translating virtual addresses to physical frames and inserting
//! synchronous swap directives (an `IssueSwapIn`/`FinishSwapIn` pair or the
//! swap-out equivalent, emitted adjacently) where pages must move.
//!
//! The default policy is MIN: evict the resident page whose next use is
//! farthest in the future. Because the planner sees the whole access
//! pattern, MIN is directly realizable here. LRU and FIFO are provided as
//! demand-paging baselines, and an exhaustive-search oracle gives exact
//! optima on small traces.
//!
//! Bookkeeping rules shared by every policy:
//! - The first materialization of a page claims a frame without a swap-in:
//!   there is nothing in storage to read.
//! - Only dirty pages are written back on eviction; a clean page whose
//!   storage copy is still valid just drops its frame.
//! - Under MIN, a page whose next use is never is dropped without a
//!   write-back even if dirty: no one will read it. The demand baselines
//!   do not know the future and always write dirty pages back.
//! - A page with outstanding asynchronous network I/O is never stolen
//!   without an intervening network barrier.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::bytecode::{join_addr, split_addr, Instruction, InstructionSink, OpCode, NEVER};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanError {
    /// An instruction touches more distinct pages than there are frames.
    Infeasible {
        instruction: u64,
        footprint: u64,
        capacity: u64,
    },
    BadProgram {
        instruction: u64,
        reason: &'static str,
    },
    /// Instance exceeds the exhaustive oracle's tractability bounds.
    OracleTooLarge,
    Source(String),
    Sink(String),
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::Infeasible {
                instruction,
                footprint,
                capacity,
            } => write!(
                f,
                "instruction {instruction} touches {footprint} pages but only {capacity} frames fit"
            ),
            PlanError::BadProgram { instruction, reason } => {
                write!(f, "bad planner input at instruction {instruction}: {reason}")
            }
            PlanError::OracleTooLarge => {
                write!(f, "instance too large for the exhaustive oracle")
            }
            PlanError::Source(e) => write!(f, "program source error: {e}"),
            PlanError::Sink(e) => write!(f, "program sink error: {e}"),
        }
    }
}

impl core::error::Error for PlanError {}

/// Next-use annotation for one instruction: the index of the next access
/// of each operand slot's page, `NEVER` if there is none. Slot 0 is the
/// output, slots 1..=3 the inputs.
pub type NextUse = [u64; 4];

/// Operand slots of an instruction that reference pages, in access order:
/// inputs first, then the output. Returns `(slot, addr, write)`.
pub fn operand_slots(inst: &Instruction) -> Vec<(usize, u64, bool)> {
    let mut slots = Vec::new();
    if inst.opcode.is_swap_directive() {
        return slots;
    }
    for (i, &addr) in inst.inputs().iter().enumerate() {
        slots.push((1 + i, addr, false));
    }
    if inst.opcode.writes_output() {
        slots.push((0, inst.output, true));
    }
    slots
}

/// Backward pass: feeds instructions in reverse order, returning each
/// instruction's annotation. Memory is proportional to the number of
/// distinct pages, not the program length.
pub struct NextUseAnnotator {
    page_shift: u8,
    /// Earliest later use of each page, from the scan position.
    next: BTreeMap<u64, u64>,
}

impl NextUseAnnotator {
    pub fn new(page_shift: u8) -> NextUseAnnotator {
        NextUseAnnotator {
            page_shift,
            next: BTreeMap::new(),
        }
    }

    /// Processes the instruction at `index` (indices must arrive strictly
    /// decreasing) and returns its next-use annotation.
    pub fn annotate(&mut self, index: u64, inst: &Instruction) -> NextUse {
        let mut ann = [NEVER; 4];
        let slots = operand_slots(inst);
        // Look up all slots before updating, so two operands on the same
        // page both see the use after this instruction, not each other.
        for &(slot, addr, _) in &slots {
            let page = addr >> self.page_shift;
            ann[slot] = self.next.get(&page).copied().unwrap_or(NEVER);
        }
        for &(_, addr, _) in &slots {
            self.next.insert(addr >> self.page_shift, index);
        }
        ann
    }

    pub fn distinct_pages(&self) -> u64 {
        self.next.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Policy {
    /// Belady's MIN: evict the farthest next use.
    MinNextUse,
    Lru,
    Fifo,
}

/// Swap work the planner schedules before an instruction runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanEvent {
    Barrier,
    SwapOut { frame: u64, storage: u64 },
    SwapIn { storage: u64, frame: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PlanStats {
    pub policy_swap_ins: u64,
    pub policy_swap_outs: u64,
    pub barriers_inserted: u64,
    pub peak_resident: u64,
    pub storage_frames: u64,
    pub instructions_in: u64,
    pub instructions_out: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone)]
enum PageState {
    Resident {
        frame: u64,
        dirty: bool,
        storage: Option<u64>,
        next_use: u64,
        touch_seq: u64,
        load_seq: u64,
    },
    Evicted {
        storage: u64,
    },
}

/// Max-heap entry: MIN pops the farthest next use, preferring clean pages
/// (no write-back) and then higher page numbers on ties.
#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct HeapEntry {
    next_use: u64,
    clean: bool,
    page: u64,
}

/// The replacement engine proper: tracks the page table, picks victims,
/// and hands back the swap events each access requires. Drives both the
/// program planner and the trace harness so that tests and acceptance
/// criteria exercise the same machinery.
pub struct ReplacementEngine {
    policy: Policy,
    capacity: u64,
    table: BTreeMap<u64, PageState>,
    heap: BinaryHeap<HeapEntry>,
    lru_index: BTreeMap<u64, u64>,
    fifo_index: BTreeMap<u64, u64>,
    free_frames: BTreeSet<u64>,
    next_frame: u64,
    free_storage: BTreeSet<u64>,
    next_storage: u64,
    net_pending: BTreeSet<u64>,
    resident: u64,
    touch_counter: u64,
    load_counter: u64,
    stats: PlanStats,
}

impl ReplacementEngine {
    pub fn new(policy: Policy, capacity: u64) -> ReplacementEngine {
        ReplacementEngine {
            policy,
            capacity,
            table: BTreeMap::new(),
            heap: BinaryHeap::new(),
            lru_index: BTreeMap::new(),
            fifo_index: BTreeMap::new(),
            free_frames: BTreeSet::new(),
            next_frame: 0,
            free_storage: BTreeSet::new(),
            next_storage: 0,
            net_pending: BTreeSet::new(),
            resident: 0,
            touch_counter: 0,
            load_counter: 0,
            stats: PlanStats {
                capacity,
                ..PlanStats::default()
            },
        }
    }

    /// Seeds a page as already written out to storage before the plan
    /// starts; the trace harness uses this for pre-materialized pages.
    pub fn seed_evicted(&mut self, page: u64) {
        let storage = self.alloc_storage();
        self.table.insert(page, PageState::Evicted { storage });
    }

    pub fn stats(&self) -> PlanStats {
        self.stats.clone()
    }

    pub fn frame_of(&self, page: u64) -> Option<u64> {
        match self.table.get(&page) {
            Some(PageState::Resident { frame, .. }) => Some(*frame),
            _ => None,
        }
    }

    pub fn note_network_pending(&mut self, page: u64) {
        self.net_pending.insert(page);
    }

    pub fn clear_network_pending(&mut self) {
        self.net_pending.clear();
    }

    fn alloc_storage(&mut self) -> u64 {
        let s = match self.free_storage.iter().next().copied() {
            Some(s) => {
                self.free_storage.remove(&s);
                s
            }
            None => {
                let s = self.next_storage;
                self.next_storage += 1;
                s
            }
        };
        self.stats.storage_frames = self.stats.storage_frames.max(self.next_storage);
        s
    }

    /// Makes `page` resident and records the access, appending any swap
    /// events to `events`. `holds` is the set of pages the current
    /// instruction touches; they are exempt from eviction.
    pub fn access(
        &mut self,
        index: u64,
        page: u64,
        write: bool,
        next_use: u64,
        holds: &BTreeSet<u64>,
        events: &mut Vec<PlanEvent>,
    ) -> Result<u64, PlanError> {
        match self.table.get(&page) {
            Some(PageState::Resident { .. }) => {}
            Some(PageState::Evicted { storage }) => {
                let storage = *storage;
                let frame = self.take_frame(index, holds, events)?;
                events.push(PlanEvent::SwapIn { storage, frame });
                self.stats.policy_swap_ins += 1;
                self.make_resident(page, frame, Some(storage));
            }
            None => {
                let frame = self.take_frame(index, holds, events)?;
                self.make_resident(page, frame, None);
            }
        }
        let Some(PageState::Resident {
            frame,
            dirty,
            next_use: nu,
            touch_seq,
            ..
        }) = self.table.get_mut(&page)
        else {
            unreachable!()
        };
        let frame = *frame;
        *dirty |= write;
        *nu = next_use;
        let clean = !*dirty;
        self.lru_index.remove(touch_seq);
        self.touch_counter += 1;
        *touch_seq = self.touch_counter;
        self.lru_index.insert(self.touch_counter, page);
        if self.policy == Policy::MinNextUse {
            self.heap.push(HeapEntry {
                next_use,
                clean,
                page,
            });
        }
        Ok(frame)
    }

    fn make_resident(&mut self, page: u64, frame: u64, storage: Option<u64>) {
        self.load_counter += 1;
        self.fifo_index.insert(self.load_counter, page);
        self.table.insert(
            page,
            PageState::Resident {
                frame,
                dirty: false,
                storage,
                next_use: NEVER,
                touch_seq: 0,
                load_seq: self.load_counter,
            },
        );
        self.resident += 1;
        self.stats.peak_resident = self.stats.peak_resident.max(self.resident);
    }

    fn take_frame(
        &mut self,
        index: u64,
        holds: &BTreeSet<u64>,
        events: &mut Vec<PlanEvent>,
    ) -> Result<u64, PlanError> {
        if let Some(&f) = self.free_frames.iter().next() {
            self.free_frames.remove(&f);
            return Ok(f);
        }
        if self.next_frame < self.capacity {
            let f = self.next_frame;
            self.next_frame += 1;
            return Ok(f);
        }
        let victim = self.select_victim(holds).ok_or(PlanError::Infeasible {
            instruction: index,
            footprint: holds.len() as u64,
            capacity: self.capacity,
        })?;
        Ok(self.evict(victim, events))
    }

    fn select_victim(&mut self, holds: &BTreeSet<u64>) -> Option<u64> {
        match self.policy {
            Policy::MinNextUse => {
                let mut stash = Vec::new();
                let mut found = None;
                while let Some(entry) = self.heap.pop() {
                    let live = matches!(
                        self.table.get(&entry.page),
                        Some(PageState::Resident { next_use, dirty, .. })
                            if *next_use == entry.next_use && !*dirty == entry.clean
                    );
                    if !live {
                        continue; // stale heap entry
                    }
                    if holds.contains(&entry.page) {
                        stash.push(entry);
                        continue;
                    }
                    found = Some(entry.page);
                    break;
                }
                self.heap.extend(stash);
                found
            }
            Policy::Lru => self
                .lru_index
                .iter()
                .map(|(_, &p)| p)
                .find(|p| !holds.contains(p)),
            Policy::Fifo => self
                .fifo_index
                .iter()
                .map(|(_, &p)| p)
                .find(|p| !holds.contains(p)),
        }
    }

    fn evict(&mut self, page: u64, events: &mut Vec<PlanEvent>) -> u64 {
        if self.net_pending.contains(&page) {
            // The barrier completes every outstanding network operation.
            events.push(PlanEvent::Barrier);
            self.stats.barriers_inserted += 1;
            self.net_pending.clear();
        }
        let Some(PageState::Resident {
            frame,
            dirty,
            storage,
            next_use,
            touch_seq,
            load_seq,
        }) = self.table.remove(&page)
        else {
            unreachable!("victim is resident")
        };
        self.lru_index.remove(&touch_seq);
        self.fifo_index.remove(&load_seq);
        self.resident -= 1;
        // Only MIN knows a page is dead; the demand baselines must assume
        // every dirty page will be read again.
        let dead = self.policy == Policy::MinNextUse && next_use == NEVER;
        if dirty && !dead {
            let s = match storage {
                Some(s) => s,
                None => self.alloc_storage(),
            };
            events.push(PlanEvent::SwapOut { frame, storage: s });
            self.stats.policy_swap_outs += 1;
            self.table.insert(page, PageState::Evicted { storage: s });
        } else if !dirty && !dead && storage.is_some() {
            // Clean with a valid storage copy: free eviction.
            self.table
                .insert(page, PageState::Evicted { storage: storage.unwrap() });
        } else {
            // Dead, or clean and never stored (still all zeros): drop it
            // and release any storage it held.
            if let Some(s) = storage {
                self.free_storage.insert(s);
            }
        }
        frame
    }
}

/// Plans one program: consumes `(instruction, next_use)` pairs in forward
/// order, emits the physical-dialect stream into `sink`.
pub fn plan_program(
    page_shift: u8,
    policy: Policy,
    capacity: u64,
    items: impl Iterator<Item = Result<(Instruction, NextUse), PlanError>>,
    sink: &mut dyn InstructionSink,
) -> Result<PlanStats, PlanError> {
    let mut engine = ReplacementEngine::new(policy, capacity);
    let mut events = Vec::new();
    let mut emit = |inst: Instruction, stats: &mut PlanStats| -> Result<(), PlanError> {
        sink.emit(&inst)
            .map_err(|e| PlanError::Sink(alloc::format!("{e}")))?;
        stats.instructions_out += 1;
        Ok(())
    };
    let mut index: u64 = 0;
    let mut stats_out = PlanStats::default();
    for item in items {
        let (inst, ann) = item?;
        if inst.opcode.is_swap_directive() {
            return Err(PlanError::BadProgram {
                instruction: index,
                reason: "swap directive in planner input",
            });
        }
        if inst.opcode == OpCode::NetworkBarrier {
            engine.clear_network_pending();
        }
        let slots = operand_slots(&inst);
        let holds: BTreeSet<u64> = slots.iter().map(|&(_, a, _)| a >> page_shift).collect();
        if inst.opcode.is_network() && !slots.is_empty() {
            let (_, addr, _) = slots[0];
            let size = inst.network_size();
            if size > 0 && (addr >> page_shift) != ((addr + size - 1) >> page_shift) {
                return Err(PlanError::BadProgram {
                    instruction: index,
                    reason: "network transfer range straddles a page",
                });
            }
        }
        let mut rewritten = inst;
        for &(slot, addr, write) in &slots {
            let (page, offset) = split_addr(addr, page_shift);
            events.clear();
            let frame = engine.access(index, page, write, ann[slot], &holds, &mut events)?;
            for ev in &events {
                let directives: [Option<Instruction>; 2] = match *ev {
                    PlanEvent::Barrier => [
                        Some(Instruction::new(OpCode::NetworkBarrier, 0, 0, &[], 0)),
                        None,
                    ],
                    PlanEvent::SwapOut { frame, storage } => [
                        Some(Instruction::new(OpCode::IssueSwapOut, 0, frame, &[], storage)),
                        Some(Instruction::new(OpCode::FinishSwapOut, 0, frame, &[], storage)),
                    ],
                    PlanEvent::SwapIn { storage, frame } => [
                        Some(Instruction::new(OpCode::IssueSwapIn, 0, frame, &[], storage)),
                        Some(Instruction::new(OpCode::FinishSwapIn, 0, frame, &[], storage)),
                    ],
                };
                for d in directives.into_iter().flatten() {
                    emit(d, &mut stats_out)?;
                }
            }
            let phys = join_addr(frame, offset, page_shift);
            if slot == 0 {
                rewritten.output = phys;
            } else {
                rewritten.inputs[slot - 1] = phys;
            }
        }
        if inst.opcode == OpCode::NetworkPostSend {
            engine.note_network_pending(inst.inputs[0] >> page_shift);
        } else if inst.opcode == OpCode::NetworkPostReceive {
            engine.note_network_pending(inst.output >> page_shift);
        }
        emit(rewritten, &mut stats_out)?;
        index += 1;
    }
    let mut stats = engine.stats();
    stats.instructions_in = index;
    stats.instructions_out = stats_out.instructions_out;
    Ok(stats)
}

/// One access of a raw page trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceAccess {
    pub page: u64,
    pub write: bool,
}

impl TraceAccess {
    pub fn read(page: u64) -> TraceAccess {
        TraceAccess { page, write: false }
    }

    pub fn write(page: u64) -> TraceAccess {
        TraceAccess { page, write: true }
    }
}

/// Initial page contents for trace planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceInit {
    /// Every page referenced by the trace already lives in storage, so its
    /// first access swaps it in. This is the classic paging setting.
    Prestored,
    /// Pages materialize on first touch, which behaves as a write (the way
    /// builder-emitted programs first touch every page).
    Fresh,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TracePlan {
    pub swap_ins: u64,
    pub swap_outs: u64,
    pub peak_resident: u64,
}

/// Runs a replacement policy over a page trace using the same engine the
/// program planner uses.
pub fn plan_trace(
    trace: &[TraceAccess],
    capacity: u64,
    policy: Policy,
    init: TraceInit,
) -> Result<TracePlan, PlanError> {
    let mut engine = ReplacementEngine::new(policy, capacity);
    let mut seen = BTreeSet::new();
    if init == TraceInit::Prestored {
        for acc in trace {
            if seen.insert(acc.page) {
                engine.seed_evicted(acc.page);
            }
        }
        seen.clear();
    }
    // Next-use annotation by backward scan.
    let mut next_use = alloc::vec![NEVER; trace.len()];
    let mut next: BTreeMap<u64, u64> = BTreeMap::new();
    for (i, acc) in trace.iter().enumerate().rev() {
        next_use[i] = next.get(&acc.page).copied().unwrap_or(NEVER);
        next.insert(acc.page, i as u64);
    }
    let mut events = Vec::new();
    for (i, acc) in trace.iter().enumerate() {
        let first_touch = init == TraceInit::Fresh && seen.insert(acc.page);
        let write = acc.write || first_touch;
        let holds = BTreeSet::from([acc.page]);
        events.clear();
        engine.access(i as u64, acc.page, write, next_use[i], &holds, &mut events)?;
    }
    let stats = engine.stats();
    Ok(TracePlan {
        swap_ins: stats.policy_swap_ins,
        swap_outs: stats.policy_swap_outs,
        peak_resident: stats.peak_resident,
    })
}

/// Exact optima for small traces by exhaustive search over eviction
/// schedules. Minimizing total swaps is NP-hard in general, which is why
/// this oracle is exponential and bounded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BruteForceResult {
    pub min_swap_ins: u64,
    pub min_total_swaps: u64,
}

pub fn brute_force_min(
    trace: &[TraceAccess],
    capacity: u64,
    init: TraceInit,
) -> Result<BruteForceResult, PlanError> {
    let mut pages: Vec<u64> = trace.iter().map(|a| a.page).collect();
    pages.sort_unstable();
    pages.dedup();
    if trace.len() > 24 || pages.len() > 8 || capacity > 4 || capacity == 0 {
        return Err(PlanError::OracleTooLarge);
    }
    let index_of = |page: u64| pages.binary_search(&page).unwrap();

    // used_after[i][p]: page p is accessed strictly after position i.
    let n = trace.len();
    let np = pages.len();
    let mut used_after = alloc::vec![0u8; (n + 1) * np];
    for i in (0..n).rev() {
        for p in 0..np {
            used_after[i * np + p] = used_after[(i + 1) * np + p];
        }
        used_after[i * np + index_of(trace[i].page)] = 1;
    }

    // Per-page states, 3 bits each:
    //   0 unmaterialized, 1 evicted+stored, 2 resident clean unstored,
    //   3 resident clean stored, 4 resident dirty.
    const UNMAT: u32 = 0;
    const EVICTED: u32 = 1;
    const RES_CLEAN_UNSTORED: u32 = 2;
    const RES_CLEAN_STORED: u32 = 3;
    const RES_DIRTY: u32 = 4;
    let get = |state: u32, p: usize| (state >> (3 * p)) & 7;
    let set = |state: u32, p: usize, v: u32| (state & !(7 << (3 * p))) | (v << (3 * p));
    let is_resident = |v: u32| v >= RES_CLEAN_UNSTORED;

    let initial = match init {
        TraceInit::Prestored => {
            let mut s = 0u32;
            for p in 0..np {
                s = set(s, p, EVICTED);
            }
            s
        }
        TraceInit::Fresh => 0,
    };

    let solve = |count_outs: bool| -> u64 {
        let mut frontier: BTreeMap<u32, u64> = BTreeMap::from([(initial, 0u64)]);
        // In Fresh mode the first touch of each page acts as a write.
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (i, acc) in trace.iter().enumerate() {
            let q = index_of(acc.page);
            let first_touch = init == TraceInit::Fresh && seen.insert(q);
            let write = acc.write || first_touch;
            let mut next_frontier: BTreeMap<u32, u64> = BTreeMap::new();
            let mut relax = |state: u32, cost: u64| {
                let slot = next_frontier.entry(state).or_insert(u64::MAX);
                *slot = (*slot).min(cost);
            };
            for (&state, &cost) in &frontier {
                let qs = get(state, q);
                if is_resident(qs) {
                    let new_qs = if write { RES_DIRTY } else { qs };
                    relax(set(state, q, new_qs), cost);
                    continue;
                }
                // Page must come resident: +1 swap-in if it has a stored
                // copy, free if it materializes fresh.
                let in_cost = if qs == EVICTED { 1 } else { 0 };
                let landed = if qs == EVICTED {
                    if write {
                        RES_DIRTY
                    } else {
                        RES_CLEAN_STORED
                    }
                } else if write {
                    RES_DIRTY
                } else {
                    RES_CLEAN_UNSTORED
                };
                let resident_count = (0..np).filter(|&p| is_resident(get(state, p))).count();
                if (resident_count as u64) < capacity {
                    relax(set(state, q, landed), cost + in_cost);
                } else {
                    for victim in 0..np {
                        if victim == q || !is_resident(get(state, victim)) {
                            continue;
                        }
                        let vs = get(state, victim);
                        let alive = used_after[i * np + victim] == 1;
                        let (new_vs, out_cost) = match vs {
                            RES_CLEAN_UNSTORED => (UNMAT, 0),
                            RES_CLEAN_STORED => (EVICTED, 0),
                            RES_DIRTY if alive => (EVICTED, 1),
                            RES_DIRTY => (UNMAT, 0), // dead: dropped
                            _ => unreachable!(),
                        };
                        let mut ns = set(state, victim, new_vs);
                        ns = set(ns, q, landed);
                        let extra = if count_outs { out_cost } else { 0 };
                        relax(ns, cost + in_cost + extra);
                    }
                }
            }
            frontier = next_frontier;
            if frontier.is_empty() {
                return u64::MAX; // capacity 0 handled above; unreachable
            }
        }
        frontier.values().copied().min().unwrap_or(0)
    };

    Ok(BruteForceResult {
        min_swap_ins: solve(false),
        min_total_swaps: solve(true),
    })
}
