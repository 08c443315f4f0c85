//! Independent plan verification.
//!
//! Walks a memory program in lockstep with the virtual program it was
//! planned from, maintaining a shadow map from physical frames back to
//! virtual pages. Every operand of every instruction must resolve, through
//! the directives seen so far, to exactly the virtual page the original
//! program names: address translation is checked instruction by
//! instruction rather than trusted.
//!
//! Along the way it enforces the planner's safety rules and reports the
//! residency high-water mark:
//! - a frame is only re-bound over a page that is dead, or clean with a
//!   valid storage copy;
//! - no page with outstanding network I/O is stolen without a barrier;
//! - every finish has a matching issue, inbound transfers are consumed
//!   exactly once, and nothing is in flight at program end;
//! - an issue precedes its finish by at most the configured lookahead;
//! - simultaneously bound data frames never exceed the planned capacity.
//!
//! The verifier shares no state with the planner; it sees only the two
//! instruction streams and the header geometry.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::bytecode::{Instruction, OpCode};
use crate::replacement::operand_slots;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayError {
    Mismatch {
        pindex: u64,
        vindex: u64,
        detail: String,
    },
    Source(String),
}

impl fmt::Display for ReplayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayError::Mismatch {
                pindex,
                vindex,
                detail,
            } => write!(
                f,
                "plan verification failed at physical record {pindex} (virtual instruction {vindex}): {detail}"
            ),
            ReplayError::Source(e) => write!(f, "program source error: {e}"),
        }
    }
}

impl core::error::Error for ReplayError {}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReplayReport {
    pub virtual_instructions: u64,
    pub physical_records: u64,
    pub swap_ins: u64,
    pub swap_outs: u64,
    pub barriers: u64,
    /// Most data frames simultaneously bound to pages.
    pub max_resident_frames: u64,
    /// Most prefetch slots simultaneously in use.
    pub max_prefetch_busy: u64,
    /// Largest distance from an issue-swap-in to its finish.
    pub max_hoist: u64,
}

/// Last instruction index at which each page is accessed; pages die right
/// after. Computed from a forward pass over the virtual program.
pub fn last_access_map(
    page_shift: u8,
    program: impl Iterator<Item = Result<Instruction, ReplayError>>,
) -> Result<BTreeMap<u64, u64>, ReplayError> {
    let mut map = BTreeMap::new();
    for (i, item) in program.enumerate() {
        let inst = item?;
        for (_, addr, _) in operand_slots(&inst) {
            map.insert(addr >> page_shift, i as u64);
        }
    }
    Ok(map)
}

struct Shadow<'a> {
    page_shift: u8,
    frame_count: u64,
    total_frames: u64,
    lookahead: u64,
    last_access: &'a BTreeMap<u64, u64>,
    /// frame -> page currently holding it (data and prefetch frames).
    frame_map: BTreeMap<u64, u64>,
    page_frame: BTreeMap<u64, u64>,
    page_storage: BTreeMap<u64, u64>,
    storage_page: BTreeMap<u64, u64>,
    dirty: BTreeSet<u64>,
    inflight_in: BTreeMap<u64, (u64, u64)>,
    inflight_out: BTreeMap<u64, (u64, u64)>,
    net_pending: BTreeSet<u64>,
    vindex: u64,
    pindex: u64,
    report: ReplayReport,
}

impl<'a> Shadow<'a> {
    fn fail(&self, detail: String) -> ReplayError {
        ReplayError::Mismatch {
            pindex: self.pindex,
            vindex: self.vindex,
            detail,
        }
    }

    fn page_dead(&self, page: u64) -> bool {
        match self.last_access.get(&page) {
            Some(&last) => last < self.vindex,
            None => true,
        }
    }

    fn unbind(&mut self, page: u64) {
        if let Some(frame) = self.page_frame.remove(&page) {
            self.frame_map.remove(&frame);
        }
        self.dirty.remove(&page);
    }

    /// Re-binds `frame` to `page`, enforcing the eviction legality rules
    /// if the frame currently holds another page.
    fn bind(&mut self, frame: u64, page: u64, clean_from_storage: bool) -> Result<(), ReplayError> {
        if let Some(&old) = self.frame_map.get(&frame) {
            if old != page {
                if self.net_pending.contains(&old) {
                    return Err(self.fail(format!(
                        "frame {frame} reused over page {old} with network I/O outstanding and no barrier"
                    )));
                }
                if !self.page_dead(old) {
                    if self.dirty.contains(&old) {
                        return Err(self.fail(format!(
                            "frame {frame} reused over live dirty page {old}: its data is lost"
                        )));
                    }
                    let stored = self
                        .page_storage
                        .get(&old)
                        .map_or(false, |s| self.storage_page.get(s) == Some(&old));
                    if !stored {
                        return Err(self.fail(format!(
                            "frame {frame} reused over live clean page {old} with no valid storage copy"
                        )));
                    }
                }
                self.unbind(old);
            }
        }
        if let Some(&existing) = self.page_frame.get(&page) {
            if existing != frame {
                return Err(self.fail(format!(
                    "page {page} bound to frames {existing} and {frame} at once"
                )));
            }
        }
        self.frame_map.insert(frame, page);
        self.page_frame.insert(page, frame);
        if clean_from_storage {
            self.dirty.remove(&page);
        }
        self.update_watermarks();
        Ok(())
    }

    fn update_watermarks(&mut self) {
        let data = self.frame_map.range(..self.frame_count).count() as u64;
        let prefetch = self.frame_map.range(self.frame_count..).count() as u64
            + self
                .inflight_in
                .keys()
                .filter(|&&f| f >= self.frame_count && !self.frame_map.contains_key(&f))
                .count() as u64;
        self.report.max_resident_frames = self.report.max_resident_frames.max(data);
        self.report.max_prefetch_busy = self.report.max_prefetch_busy.max(prefetch);
    }

    fn directive(&mut self, inst: &Instruction) -> Result<(), ReplayError> {
        match inst.opcode {
            OpCode::IssueSwapIn => {
                let (frame, storage) = (inst.output, inst.immediate);
                if frame >= self.total_frames {
                    return Err(self.fail(format!("swap-in into frame {frame} out of range")));
                }
                let page = *self.storage_page.get(&storage).ok_or_else(|| {
                    self.fail(format!(
                        "swap-in reads storage frame {storage} never written"
                    ))
                })?;
                if self.inflight_in.contains_key(&frame) {
                    return Err(self.fail(format!("two inbound transfers target frame {frame}")));
                }
                if let Some((_, out_frame)) = self.inflight_out.get(&storage) {
                    return Err(self.fail(format!(
                        "swap-in of storage {storage} while its write from frame {out_frame} is still in flight"
                    )));
                }
                self.inflight_in.insert(frame, (page, self.pindex));
                self.report.swap_ins += 1;
                self.update_watermarks();
            }
            OpCode::FinishSwapIn => {
                let frame = inst.output;
                let (page, issued_at) = self.inflight_in.remove(&frame).ok_or_else(|| {
                    self.fail(format!(
                        "finish-swap-in on frame {frame} with nothing in flight"
                    ))
                })?;
                let hoist = self.pindex - issued_at;
                self.report.max_hoist = self.report.max_hoist.max(hoist);
                if self.lookahead > 0 && hoist > self.lookahead {
                    return Err(self.fail(format!(
                        "issue-swap-in hoisted {hoist} records, lookahead is {}",
                        self.lookahead
                    )));
                }
                self.bind(frame, page, true)?;
            }
            OpCode::IssueSwapOut => {
                let (frame, storage) = (inst.output, inst.immediate);
                let page = *self
                    .frame_map
                    .get(&frame)
                    .ok_or_else(|| self.fail(format!("swap-out of unbound frame {frame}")))?;
                if self.net_pending.contains(&page) {
                    return Err(self.fail(format!(
                        "swap-out of page {page} with network I/O outstanding and no barrier"
                    )));
                }
                if self.inflight_out.contains_key(&storage) {
                    return Err(
                        self.fail(format!("two writes in flight for storage frame {storage}"))
                    );
                }
                if let Some(&old) = self.storage_page.get(&storage) {
                    if old != page && !self.page_dead(old) && self.page_frame.get(&old).is_none() {
                        return Err(self.fail(format!(
                            "storage frame {storage} reused while evicted page {old} still needs it"
                        )));
                    }
                    self.page_storage.remove(&old);
                }
                self.storage_page.insert(storage, page);
                self.page_storage.insert(page, storage);
                self.inflight_out.insert(storage, (page, frame));
                self.report.swap_outs += 1;
            }
            OpCode::FinishSwapOut => {
                let storage = inst.immediate;
                let (page, frame) = self.inflight_out.remove(&storage).ok_or_else(|| {
                    self.fail(format!(
                        "finish-swap-out on storage {storage} with nothing in flight"
                    ))
                })?;
                // The write's source frame is released: the page now lives
                // in storage.
                if self.frame_map.get(&frame) == Some(&page) {
                    self.frame_map.remove(&frame);
                    self.page_frame.remove(&page);
                }
                self.dirty.remove(&page);
            }
            OpCode::CopyFromPrefetch | OpCode::CopyToPrefetch => {
                let (dst, src) = (inst.output, inst.inputs[0]);
                if dst >= self.total_frames || src >= self.total_frames {
                    return Err(self.fail(String::from("prefetch copy outside the frame array")));
                }
                let page = *self
                    .frame_map
                    .get(&src)
                    .ok_or_else(|| self.fail(format!("prefetch copy from unbound frame {src}")))?;
                if inst.opcode == OpCode::CopyToPrefetch && self.net_pending.contains(&page) {
                    return Err(self.fail(format!(
                        "eviction copy of page {page} with network I/O outstanding and no barrier"
                    )));
                }
                // The binding moves with the data.
                self.frame_map.remove(&src);
                self.page_frame.remove(&page);
                self.bind(dst, page, false)?;
            }
            OpCode::PrintStats | OpCode::Halt => {}
            _ => unreachable!("planner-inserted directives only"),
        }
        self.pindex += 1;
        Ok(())
    }

    fn match_instruction(
        &mut self,
        virt: &Instruction,
        phys: &Instruction,
    ) -> Result<(), ReplayError> {
        if virt.opcode != phys.opcode
            || virt.width != phys.width
            || virt.immediate != phys.immediate
            || virt.num_inputs != phys.num_inputs
        {
            return Err(self.fail(format!(
                "instruction mismatch: virtual {} vs physical {}",
                virt.opcode.mnemonic(),
                phys.opcode.mnemonic()
            )));
        }
        let mask = (1u64 << self.page_shift) - 1;
        let vslots = operand_slots(virt);
        let pslots = operand_slots(phys);
        // Reads before the write, mirroring the planner's access order.
        for (&(slot, vaddr, write), &(_, paddr, _)) in vslots.iter().zip(&pslots) {
            if vaddr & mask != paddr & mask {
                return Err(self.fail(format!(
                    "operand {slot}: offset changed in translation ({} vs {})",
                    vaddr & mask,
                    paddr & mask
                )));
            }
            let vpage = vaddr >> self.page_shift;
            let frame = paddr >> self.page_shift;
            if frame >= self.frame_count {
                return Err(self.fail(format!(
                    "operand {slot}: data placed in frame {frame}, beyond the {}-frame capacity",
                    self.frame_count
                )));
            }
            if write {
                match self.page_frame.get(&vpage).copied() {
                    // First materialization claims a frame with no swap-in.
                    None if !self.page_storage.contains_key(&vpage) => {
                        self.bind(frame, vpage, false)?;
                    }
                    None => {
                        return Err(self.fail(format!(
                            "page {vpage} written while evicted; it must be swapped in first"
                        )));
                    }
                    Some(f) if f == frame => {}
                    Some(f) => {
                        return Err(self.fail(format!(
                            "page {vpage} expected in frame {f}, instruction writes frame {frame}"
                        )));
                    }
                }
                self.dirty.insert(vpage);
            } else {
                match self.frame_map.get(&frame).copied() {
                    Some(p) if p == vpage => {}
                    Some(p) => {
                        return Err(self.fail(format!(
                            "operand {slot}: frame {frame} holds page {p}, expected {vpage}"
                        )));
                    }
                    None => {
                        return Err(
                            self.fail(format!("operand {slot}: frame {frame} read while unbound"))
                        );
                    }
                }
            }
        }
        match virt.opcode {
            OpCode::NetworkPostSend => {
                self.net_pending.insert(virt.inputs[0] >> self.page_shift);
            }
            OpCode::NetworkPostReceive => {
                self.net_pending.insert(virt.output >> self.page_shift);
            }
            OpCode::NetworkBarrier => {
                self.net_pending.clear();
            }
            _ => {}
        }
        self.vindex += 1;
        self.pindex += 1;
        Ok(())
    }
}

/// Verifies a memory program against the virtual program it was planned
/// from. A `lookahead` of 0 skips the hoist-distance check (synchronous
/// plans put each finish right after its issue).
pub fn verify_plan(
    page_shift: u8,
    frame_count: u64,
    prefetch_frames: u64,
    lookahead: u64,
    virtual_prog: impl Iterator<Item = Result<Instruction, ReplayError>>,
    physical_prog: impl Iterator<Item = Result<Instruction, ReplayError>>,
    last_access: &BTreeMap<u64, u64>,
) -> Result<ReplayReport, ReplayError> {
    let mut shadow = Shadow {
        page_shift,
        frame_count,
        total_frames: frame_count + prefetch_frames,
        lookahead,
        last_access,
        frame_map: BTreeMap::new(),
        page_frame: BTreeMap::new(),
        page_storage: BTreeMap::new(),
        storage_page: BTreeMap::new(),
        dirty: BTreeSet::new(),
        inflight_in: BTreeMap::new(),
        inflight_out: BTreeMap::new(),
        net_pending: BTreeSet::new(),
        vindex: 0,
        pindex: 0,
        report: ReplayReport::default(),
    };
    let mut virt = virtual_prog;
    let mut pending_virt: Option<Instruction> = None;
    for item in physical_prog {
        let phys = item?;
        shadow.report.physical_records += 1;
        if phys.opcode.is_swap_directive()
            || phys.opcode == OpCode::Halt
            || phys.opcode == OpCode::PrintStats
        {
            shadow.directive(&phys)?;
            continue;
        }
        if pending_virt.is_none() {
            pending_virt = match virt.next() {
                Some(v) => Some(v?),
                None => None,
            };
        }
        if phys.opcode == OpCode::NetworkBarrier
            && pending_virt.map(|v| v.opcode) != Some(OpCode::NetworkBarrier)
        {
            // Planner-inserted barrier ahead of stealing a busy page.
            shadow.net_pending.clear();
            shadow.report.barriers += 1;
            shadow.pindex += 1;
            continue;
        }
        let v = pending_virt.take().ok_or_else(|| ReplayError::Mismatch {
            pindex: shadow.pindex,
            vindex: shadow.vindex,
            detail: String::from("physical program is longer than the virtual program"),
        })?;
        shadow.match_instruction(&v, &phys)?;
    }
    if pending_virt.is_some() || virt.next().is_some() {
        return Err(ReplayError::Mismatch {
            pindex: shadow.pindex,
            vindex: shadow.vindex,
            detail: String::from("virtual program continues past the physical program"),
        });
    }
    if !shadow.inflight_in.is_empty() || !shadow.inflight_out.is_empty() {
        return Err(ReplayError::Mismatch {
            pindex: shadow.pindex,
            vindex: shadow.vindex,
            detail: String::from("transfers still in flight at program end"),
        });
    }
    shadow.report.virtual_instructions = shadow.vindex;
    Ok(shadow.report)
}

/// Plans an in-memory virtual program (annotation, replacement, optional
/// scheduling) and verifies the result. Test harnesses use this to
/// exercise the whole planner pipeline.
pub fn plan_and_verify(
    page_shift: u8,
    policy: crate::replacement::Policy,
    capacity: u64,
    cfg: Option<crate::scheduling::SchedulerConfig>,
    virt: &[Instruction],
) -> Result<(Vec<Instruction>, crate::replacement::PlanStats, ReplayReport), String> {
    use crate::bytecode::VecSink;
    use crate::replacement::{plan_program, NextUseAnnotator};

    let mut ann = NextUseAnnotator::new(page_shift);
    let mut annotated: Vec<(Instruction, crate::replacement::NextUse)> = virt
        .iter()
        .enumerate()
        .rev()
        .map(|(i, inst)| (*inst, ann.annotate(i as u64, inst)))
        .collect();
    annotated.reverse();
    let (mut sink, swapped) = VecSink::new();
    let stats = plan_program(
        page_shift,
        policy,
        capacity,
        annotated.into_iter().map(Ok),
        &mut sink,
    )
    .map_err(|e| format!("{e}"))?;
    let mut physical = swapped.borrow().clone();
    let mut lookahead = 0;
    let mut prefetch = 0;
    if let Some(cfg) = cfg {
        let (mut sink2, scheduled) = VecSink::new();
        crate::scheduling::schedule(capacity, cfg, physical.iter().copied().map(Ok), &mut sink2)
            .map_err(|e| format!("{e}"))?;
        physical = scheduled.borrow().clone();
        lookahead = cfg.lookahead;
        prefetch = cfg.prefetch_frames;
    }
    let last =
        last_access_map(page_shift, virt.iter().copied().map(Ok)).map_err(|e| format!("{e}"))?;
    let report = verify_plan(
        page_shift,
        if capacity == u64::MAX {
            stats.peak_resident
        } else {
            capacity
        },
        prefetch,
        lookahead,
        virt.iter().copied().map(Ok),
        physical.iter().copied().map(Ok),
        &last,
    )
    .map_err(|e| format!("{e}"))?;
    Ok((physical, stats, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replacement::Policy;
    use crate::scheduling::SchedulerConfig;
    use alloc::vec;

    fn write_page(page: u64, shift: u8) -> Instruction {
        Instruction::new(OpCode::Input, 1, page << shift, &[], 0)
    }

    fn read_page(page: u64, shift: u8) -> Instruction {
        Instruction::new(OpCode::Output, 1, 0, &[page << shift], 0)
    }

    #[test]
    fn verifies_a_small_min_plan() {
        let shift = 4;
        // Write pages 0..4, then read them in a different order, with
        // room for only 2 frames.
        let mut prog = vec![];
        for p in 0..4 {
            prog.push(write_page(p, shift));
        }
        for p in [2u64, 0, 3, 1] {
            prog.push(read_page(p, shift));
        }
        let (physical, stats, report) =
            plan_and_verify(shift, Policy::MinNextUse, 2, None, &prog).unwrap();
        assert!(stats.policy_swap_ins > 0);
        assert_eq!(report.max_resident_frames, 2);
        assert_eq!(report.swap_ins, stats.policy_swap_ins);
        assert!(physical.len() > prog.len());
    }

    #[test]
    fn verifies_scheduled_plans_and_checks_hoist() {
        let shift = 4;
        let mut prog = vec![];
        for p in 0..6 {
            prog.push(write_page(p, shift));
        }
        for p in [0u64, 3, 1, 4, 2, 5] {
            prog.push(read_page(p, shift));
        }
        let cfg = SchedulerConfig {
            lookahead: 3,
            prefetch_frames: 2,
        };
        let (_, _, report) =
            plan_and_verify(shift, Policy::MinNextUse, 2, Some(cfg), &prog).unwrap();
        assert!(report.max_hoist <= 3);
        assert!(report.max_prefetch_busy <= 2);
        assert_eq!(report.max_resident_frames, 2);
    }

    #[test]
    fn catches_a_corrupted_plan() {
        let shift = 4;
        let mut prog = vec![];
        for p in 0..4 {
            prog.push(write_page(p, shift));
        }
        for p in [0u64, 1, 2, 3] {
            prog.push(read_page(p, shift));
        }
        let (mut physical, _, _) =
            plan_and_verify(shift, Policy::MinNextUse, 2, None, &prog).unwrap();
        // Corrupt one translated operand.
        let victim = physical
            .iter()
            .position(|i| i.opcode == OpCode::Output)
            .unwrap();
        physical[victim].inputs[0] ^= 1 << shift;
        let last = last_access_map(shift, prog.iter().copied().map(Ok)).unwrap();
        let err = verify_plan(
            shift,
            2,
            0,
            0,
            prog.iter().copied().map(Ok),
            physical.iter().copied().map(Ok),
            &last,
        )
        .unwrap_err();
        assert!(matches!(err, ReplayError::Mismatch { .. }));
    }

    #[test]
    fn catches_dropped_swap_directives() {
        let shift = 4;
        let mut prog = vec![];
        for p in 0..3 {
            prog.push(write_page(p, shift));
        }
        for p in [0u64, 1, 2] {
            prog.push(read_page(p, shift));
        }
        let (physical, _, _) =
            plan_and_verify(shift, Policy::MinNextUse, 2, None, &prog).unwrap();
        let stripped: Vec<Instruction> = physical
            .iter()
            .copied()
            .filter(|i| !i.opcode.is_swap_directive())
            .collect();
        let last = last_access_map(shift, prog.iter().copied().map(Ok)).unwrap();
        assert!(verify_plan(
            shift,
            2,
            0,
            0,
            prog.iter().copied().map(Ok),
            stripped.iter().copied().map(Ok),
            &last,
        )
        .is_err());
    }

    #[test]
    fn baseline_plans_verify_too() {
        let shift = 4;
        let mut prog = vec![];
        for p in 0..5 {
            prog.push(write_page(p, shift));
        }
        for p in [4u64, 2, 0, 3, 1, 0, 4] {
            prog.push(read_page(p, shift));
        }
        for policy in [Policy::Lru, Policy::Fifo] {
            let (_, stats, report) = plan_and_verify(shift, policy, 3, None, &prog).unwrap();
            assert_eq!(report.swap_ins, stats.policy_swap_ins);
            assert!(report.max_resident_frames <= 3);
        }
    }
}
