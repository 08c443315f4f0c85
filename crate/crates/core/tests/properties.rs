//! Property tests for the spec's structural invariants: codec round
//! trips, slab-allocator placement rules, and replacement optimality
//! against the exhaustive oracle.

use proptest::prelude::*;

use memprog_core::bytecode::{Dialect, Instruction, OpCode};
use memprog_core::placement::SlabAllocator;
use memprog_core::replacement::{
    brute_force_min, plan_trace, Policy, TraceAccess, TraceInit,
};

fn arb_opcode() -> impl Strategy<Value = OpCode> {
    proptest::sample::select(OpCode::ALL)
}

prop_compose! {
    fn arb_instruction()(
        opcode in arb_opcode(),
        width in 0u16..4096,
        immediate in any::<u64>(),
        output in 0u64..(1 << 56),
        inputs in proptest::collection::vec(0u64..(1 << 56), 3),
    ) -> Instruction {
        let arity = opcode.arity();
        Instruction::new(opcode, width, output, &inputs[..arity], immediate)
    }
}

proptest! {
    #[test]
    fn instruction_roundtrip(inst in arb_instruction()) {
        let dialect = if inst.opcode.is_swap_directive() {
            Dialect::Physical
        } else {
            Dialect::Virtual
        };
        let rec = inst.encode(dialect).unwrap();
        prop_assert_eq!(Instruction::decode(&rec, dialect).unwrap(), inst);
        // Fixed record width underlies every seek the planner does.
        prop_assert_eq!(rec.len(), 40);
    }
}

#[derive(Debug, Clone)]
enum AllocOp {
    Alloc(u64),
    Free(usize),
}

fn arb_alloc_ops(page_units: u64) -> impl Strategy<Value = Vec<AllocOp>> {
    proptest::collection::vec(
        prop_oneof![
            (1..=page_units).prop_map(AllocOp::Alloc),
            any::<usize>().prop_map(AllocOp::Free),
        ],
        1..120,
    )
}

proptest! {
    #[test]
    fn placement_invariants(ops in arb_alloc_ops(16)) {
        let shift = 4u8; // 16-unit pages
        let mut alloc = SlabAllocator::new(shift);
        let mut live: Vec<(u64, u64)> = Vec::new(); // (addr, size)
        for op in ops {
            match op {
                AllocOp::Alloc(size) => {
                    // Reference scan: the fewest-free-slots candidate this
                    // class could choose, before the allocation mutates it.
                    let reference: Option<(u32, u64)> = alloc
                        .live_page_numbers()
                        .iter()
                        .filter_map(|&p| {
                            let free = alloc.page_free_slots(p)?;
                            (free > 0 && page_class(&live, p, shift) == Some(size))
                                .then_some((free, p))
                        })
                        .min();
                    let addr = alloc.allocate(size).unwrap();
                    // No allocation straddles a page.
                    prop_assert_eq!(addr >> shift, (addr + size - 1) >> shift);
                    // No overlap with any live allocation.
                    for &(a, s) in &live {
                        prop_assert!(addr + size <= a || a + s <= addr);
                    }
                    if let Some((_, expect_page)) = reference {
                        prop_assert_eq!(addr >> shift, expect_page);
                    }
                    live.push((addr, size));
                }
                AllocOp::Free(k) => {
                    if live.is_empty() {
                        continue;
                    }
                    let (addr, _) = live.swap_remove(k % live.len());
                    let pages_before = alloc.stats().live_pages;
                    let page = addr >> shift;
                    alloc.deallocate(addr).unwrap();
                    let emptied = !live.iter().any(|&(a, _)| a >> shift == page);
                    if emptied {
                        // Fully-freed pages die and never come back.
                        prop_assert_eq!(alloc.stats().live_pages, pages_before - 1);
                        prop_assert!(alloc.page_free_slots(page).is_none());
                    }
                }
            }
        }
        // Handle hygiene from the allocator's side: frees balance allocs.
        for (addr, _) in live {
            alloc.deallocate(addr).unwrap();
        }
        prop_assert_eq!(alloc.live_allocations(), 0);
    }
}

/// Slot size of the live allocations on a page, if any.
fn page_class(live: &[(u64, u64)], page: u64, shift: u8) -> Option<u64> {
    live.iter()
        .find(|&&(a, _)| a >> shift == page)
        .map(|&(_, s)| s)
}

fn arb_trace() -> impl Strategy<Value = Vec<TraceAccess>> {
    proptest::collection::vec((0u64..6, any::<bool>()), 4..20).prop_map(|v| {
        v.into_iter()
            .map(|(page, write)| TraceAccess { page, write })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn min_matches_oracle_and_respects_bounds(
        trace in arb_trace(),
        capacity in 1u64..=4,
        prestored in any::<bool>(),
    ) {
        let init = if prestored { TraceInit::Prestored } else { TraceInit::Fresh };
        let min = plan_trace(&trace, capacity, Policy::MinNextUse, init).unwrap();
        let oracle = brute_force_min(&trace, capacity, init).unwrap();
        // MIN is exactly optimal in swap-ins.
        prop_assert_eq!(min.swap_ins, oracle.min_swap_ins);
        // And within 2x of the total-swap optimum.
        prop_assert!(min.swap_ins + min.swap_outs <= 2 * oracle.min_total_swaps);
        // Demand baselines never beat it.
        for policy in [Policy::Lru, Policy::Fifo] {
            let base = plan_trace(&trace, capacity, policy, init).unwrap();
            prop_assert!(min.swap_ins <= base.swap_ins);
        }
        prop_assert!(min.peak_resident <= capacity);
    }
}
