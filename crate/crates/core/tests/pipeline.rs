//! End-to-end pipeline tests: build a workload through the DSL, plan it
//! at various memory budgets, verify the plan with the independent
//! replayer, execute it on the simulator, and compare against the
//! plaintext oracle. Swapping must be semantically invisible.

use memprog_core::bytecode::{
    AddressUnit, Dialect, DriverId, Instruction, ProgramHeader, VecSink,
};
use memprog_core::drivers::{BitWireDriver, LeveledBatchDriver, SCALE};
use memprog_core::dsl::{run_placement, DriverProfile, Party, ProgramOptions};
use memprog_core::engine::{
    run_batch_program, run_bit_program, CostModel, ExecEnv, ExecStats, NoChannel, VecValueSink,
    VecValueSource,
};
use memprog_core::replacement::{PlanStats, Policy};
use memprog_core::replay::{plan_and_verify, ReplayReport};
use memprog_core::scheduling::SchedulerConfig;
use memprog_core::sim::{SimulatedStorage, VirtualClock};
use memprog_core::workloads::{
    emit_workload, generate_inputs, WorkerInput, WorkloadName, WorkloadSpec, ALL_WORKLOADS,
};

const BIT_SHIFT: u8 = 8; // 256 wires per page
const BATCH_SHIFT: u8 = 13; // 8 KiB pages
const DIM: usize = 4;
const SEED: u64 = 0x5eed;

fn profile_for(driver: DriverId) -> DriverProfile {
    match driver {
        DriverId::BitWire => DriverProfile::BitWire,
        DriverId::LeveledBatch => {
            DriverProfile::Batch(LeveledBatchDriver::new(2, DIM, 1024, 1536))
        }
    }
}

fn page_shift_for(driver: DriverId) -> u8 {
    match driver {
        DriverId::BitWire => BIT_SHIFT,
        DriverId::LeveledBatch => BATCH_SHIFT,
    }
}

fn build_virtual(spec: &WorkloadSpec, worker: u32) -> Vec<Instruction> {
    spec.validate().unwrap();
    let opts = ProgramOptions {
        worker_id: worker,
        worker_count: spec.worker_count,
        problem_size: spec.n,
        page_shift: page_shift_for(spec.name.driver()),
        tile: None,
    };
    let (sink, shared) = VecSink::new();
    run_placement(opts, profile_for(spec.name.driver()), Box::new(sink), |ctx| {
        emit_workload(spec.name, ctx)
    })
    .unwrap();
    let prog = shared.borrow().clone();
    prog
}

struct Planned {
    program: Vec<Instruction>,
    header: ProgramHeader,
    stats: PlanStats,
    report: ReplayReport,
}

fn plan(
    spec: &WorkloadSpec,
    virt: &[Instruction],
    policy: Policy,
    capacity: u64,
    sched: Option<SchedulerConfig>,
) -> Planned {
    let shift = page_shift_for(spec.name.driver());
    let (program, stats, report) =
        plan_and_verify(shift, policy, capacity, sched, virt).unwrap();
    let frame_count = if capacity == u64::MAX {
        stats.peak_resident
    } else {
        capacity
    };
    let header = ProgramHeader {
        dialect: Dialect::Physical,
        address_unit: spec.name.driver().address_unit(),
        driver: spec.name.driver(),
        page_shift: shift,
        instruction_count: program.len() as u64,
        frame_count,
        prefetch_frames: sched.map_or(0, |c| c.prefetch_frames),
        storage_frame_count: stats.storage_frames,
    };
    Planned {
        program,
        header,
        stats,
        report,
    }
}

fn run(planned: &Planned, input: &WorkerInput, cost: CostModel) -> (VecValueSink, ExecStats) {
    let unit_bytes = match planned.header.driver {
        DriverId::BitWire => 16,
        DriverId::LeveledBatch => 1,
    };
    let page_bytes = (planned.header.page_units() as usize) * unit_bytes;
    let mut storage = SimulatedStorage::new(page_bytes, 20_000, 2_000_000_000);
    let mut clock = VirtualClock::new();
    let mut channel = NoChannel;
    let mut source = VecValueSource {
        ints: input.ints.iter().copied().collect(),
        rows: input.rows.iter().cloned().collect(),
    };
    let mut sink = VecValueSink::default();
    let stats = {
        let mut env = ExecEnv {
            storage: &mut storage,
            channel: &mut channel,
            clock: &mut clock,
            cost,
            input: &mut source,
            output: &mut sink,
        };
        match planned.header.driver {
            DriverId::BitWire => run_bit_program(
                &planned.header,
                planned.program.iter().copied().map(Ok),
                &BitWireDriver::new(16, 7),
                &mut env,
            )
            .unwrap(),
            DriverId::LeveledBatch => run_batch_program(
                &planned.header,
                planned.program.iter().copied().map(Ok),
                &LeveledBatchDriver::new(2, DIM, 1024, 1536),
                &mut env,
            )
            .unwrap(),
        }
    };
    (sink, stats)
}

fn check_outputs(spec: &WorkloadSpec, sink: &VecValueSink) {
    let data = generate_inputs(spec, SEED, DIM).unwrap();
    match spec.name.driver() {
        DriverId::BitWire => assert_eq!(sink.ints, data.expected_ints, "{}", spec.name.as_str()),
        DriverId::LeveledBatch => {
            assert_eq!(sink.rows, data.expected_rows, "{}", spec.name.as_str())
        }
    }
}

fn small_spec(name: WorkloadName) -> WorkloadSpec {
    let n = match name {
        WorkloadName::Merge | WorkloadName::Sort => 16,
        WorkloadName::LJoin => 8,
        WorkloadName::Mvmul => 8,
        WorkloadName::BinFcLayer => 16,
        WorkloadName::Rsum | WorkloadName::Rstats => 16,
        WorkloadName::Rmvmul => 4,
        WorkloadName::NRmatmul | WorkloadName::TRmatmul => 4,
    };
    WorkloadSpec {
        name,
        n,
        worker_count: 1,
    }
}

#[test]
fn millionaire_end_to_end() {
    let opts = ProgramOptions::single(0, 12);
    let (sink, shared) = VecSink::new();
    run_placement(opts, DriverProfile::BitWire, Box::new(sink), |ctx| {
        let alice = ctx.int_input(32, Party::P0)?;
        let bob = ctx.int_input(32, Party::P1)?;
        let result = alice.ge(&bob)?;
        result.mark_output()
    })
    .unwrap();
    let virt = shared.borrow().clone();
    let spec = WorkloadSpec {
        name: WorkloadName::Merge, // driver selection only
        n: 1,
        worker_count: 1,
    };
    let planned = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
    assert_eq!(planned.stats.policy_swap_ins, 0);
    let input = WorkerInput {
        ints: vec![5, 3],
        rows: vec![],
    };
    let (sink, _) = run(&planned, &input, CostModel::default());
    assert_eq!(sink.ints, vec![1]);

    let input = WorkerInput {
        ints: vec![3, 5],
        rows: vec![],
    };
    let (sink, _) = run(&planned, &input, CostModel::default());
    assert_eq!(sink.ints, vec![0]);
}

#[test]
fn unbounded_plans_have_no_swaps_and_match_oracles() {
    for name in ALL_WORKLOADS {
        let spec = small_spec(name);
        let virt = build_virtual(&spec, 0);
        let planned = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
        assert_eq!(planned.stats.policy_swap_ins, 0, "{}", name.as_str());
        assert_eq!(planned.stats.policy_swap_outs, 0, "{}", name.as_str());
        let data = generate_inputs(&spec, SEED, DIM).unwrap();
        let (sink, stats) = run(&planned, &data.per_worker[0], CostModel::default());
        check_outputs(&spec, &sink);
        assert_eq!(stats.swap_ins, 0);
    }
}

#[test]
fn swapping_is_semantically_invisible() {
    // Every workload, planned at half and quarter footprint, with and
    // without prefetch scheduling, produces oracle-identical output.
    for name in ALL_WORKLOADS {
        let spec = small_spec(name);
        let virt = build_virtual(&spec, 0);
        let unbounded = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
        let footprint = unbounded.stats.peak_resident;
        let data = generate_inputs(&spec, SEED, DIM).unwrap();
        for divide in [2, 4] {
            let capacity = (footprint / divide).max(4);
            let sync = plan(&spec, &virt, Policy::MinNextUse, capacity, None);
            assert!(
                sync.report.max_resident_frames <= capacity,
                "{} residency",
                name.as_str()
            );
            let (sink, _) = run(&sync, &data.per_worker[0], CostModel::default());
            check_outputs(&spec, &sink);

            let cfg = SchedulerConfig {
                lookahead: 8,
                prefetch_frames: 2,
            };
            let sched = plan(&spec, &virt, Policy::MinNextUse, capacity, Some(cfg));
            let (sink, _) = run(&sched, &data.per_worker[0], CostModel::default());
            check_outputs(&spec, &sink);
        }
    }
}

#[test]
fn demand_baselines_execute_correctly_too() {
    for name in [WorkloadName::Merge, WorkloadName::Rsum] {
        let spec = small_spec(name);
        let virt = build_virtual(&spec, 0);
        let unbounded = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
        let capacity = (unbounded.stats.peak_resident / 2).max(4);
        let data = generate_inputs(&spec, SEED, DIM).unwrap();
        for policy in [Policy::Lru, Policy::Fifo] {
            let planned = plan(&spec, &virt, policy, capacity, None);
            let (sink, _) = run(&planned, &data.per_worker[0], CostModel::default());
            check_outputs(&spec, &sink);
        }
    }
}

#[test]
fn min_swaps_never_exceed_demand_baselines_on_workloads() {
    for name in [WorkloadName::Merge, WorkloadName::Sort, WorkloadName::Rstats] {
        let spec = small_spec(name);
        let virt = build_virtual(&spec, 0);
        let unbounded = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
        let capacity = (unbounded.stats.peak_resident / 2).max(4);
        let min = plan(&spec, &virt, Policy::MinNextUse, capacity, None);
        let lru = plan(&spec, &virt, Policy::Lru, capacity, None);
        let fifo = plan(&spec, &virt, Policy::Fifo, capacity, None);
        assert!(min.stats.policy_swap_ins <= lru.stats.policy_swap_ins);
        assert!(min.stats.policy_swap_ins <= fifo.stats.policy_swap_ins);
    }
}

#[test]
fn scheduled_and_synchronous_plans_agree_on_stats_semantics() {
    let spec = small_spec(WorkloadName::Sort);
    let virt = build_virtual(&spec, 0);
    let unbounded = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
    let capacity = (unbounded.stats.peak_resident / 2).max(4);
    let cfg = SchedulerConfig {
        lookahead: 16,
        prefetch_frames: 3,
    };
    let sched = plan(&spec, &virt, Policy::MinNextUse, capacity, Some(cfg));
    let data = generate_inputs(&spec, SEED, DIM).unwrap();
    let (_, stats) = run(&sched, &data.per_worker[0], CostModel::default());
    // The engine's swap count equals the program's issue count.
    assert_eq!(stats.swap_ins, sched.report.swap_ins);
    assert!(stats.finish_swapin_stalls <= stats.swap_ins);
    assert_eq!(
        stats.total_virtual_time_ns,
        stats.compute_time_ns + stats.stall_time_ns
    );
    assert!(stats.resident_highwater_frames <= sched.header.total_frames());
}

#[test]
fn simulator_execution_is_deterministic() {
    let spec = small_spec(WorkloadName::Merge);
    let virt = build_virtual(&spec, 0);
    let planned = plan(&spec, &virt, Policy::MinNextUse, 6, None);
    let data = generate_inputs(&spec, SEED, DIM).unwrap();
    let (out1, stats1) = run(&planned, &data.per_worker[0], CostModel::default());
    let (out2, stats2) = run(&planned, &data.per_worker[0], CostModel::default());
    assert_eq!(out1.ints, out2.ints);
    assert_eq!(stats1, stats2);
}

#[test]
fn planning_is_deterministic() {
    let spec = small_spec(WorkloadName::Rstats);
    let virt1 = build_virtual(&spec, 0);
    let virt2 = build_virtual(&spec, 0);
    assert_eq!(virt1, virt2);
    let cfg = SchedulerConfig {
        lookahead: 4,
        prefetch_frames: 2,
    };
    let a = plan(&spec, &virt1, Policy::MinNextUse, 6, Some(cfg));
    let b = plan(&spec, &virt2, Policy::MinNextUse, 6, Some(cfg));
    assert_eq!(a.program, b.program);
}

#[test]
fn randomized_integer_expressions_match_plaintext() {
    // Random expression DAGs over every integer opcode, evaluated by the
    // bit-wire engine and by direct host arithmetic.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for case in 0..60 {
        let width: u16 = *[8u16, 16, 32, 61, 64].iter().nth(case % 5).unwrap();
        let mask = if width == 128 {
            u128::MAX
        } else {
            (1u128 << width) - 1
        };
        let n_inputs = rng.gen_range(2..5usize);
        let values: Vec<u128> = (0..n_inputs).map(|_| rng.gen::<u128>() & mask).collect();
        let n_ops = rng.gen_range(1..12usize);
        let ops: Vec<u32> = (0..n_ops).map(|_| rng.gen_range(0..9)).collect();
        let picks: Vec<(usize, usize, u64)> = (0..n_ops)
            .map(|_| {
                (
                    rng.gen::<usize>(),
                    rng.gen::<usize>(),
                    rng.gen_range(0..width as u64),
                )
            })
            .collect();

        // Plaintext evaluation.
        let mut plain = values.clone();
        for (k, &op) in ops.iter().enumerate() {
            let (i, j, sh) = picks[k];
            let a = plain[i % plain.len()];
            let b = plain[j % plain.len()];
            let r = match op {
                0 => a.wrapping_add(b) & mask,
                1 => a.wrapping_sub(b) & mask,
                2 => a & b,
                3 => a | b,
                4 => a ^ b,
                5 => (!a) & mask,
                6 => (a << sh) & mask,
                7 => (a >> sh) & mask,
                8 => a.wrapping_add(1) & mask,
                _ => unreachable!(),
            };
            plain.push(r);
        }
        let expected = *plain.last().unwrap();

        // The same DAG through the builder and engine.
        let opts = ProgramOptions::single(0, 8);
        let (sink, shared) = VecSink::new();
        let ops2 = ops.clone();
        let picks2 = picks.clone();
        run_placement(opts, DriverProfile::BitWire, Box::new(sink), move |ctx| {
            let mut handles = Vec::new();
            for _ in 0..n_inputs {
                handles.push(ctx.int_input(width, Party::P0)?);
            }
            for (k, &op) in ops2.iter().enumerate() {
                let (i, j, sh) = picks2[k];
                let a = i % handles.len();
                let b = j % handles.len();
                let r = match op {
                    0 => handles[a].add(&handles[b])?,
                    1 => handles[a].sub(&handles[b])?,
                    2 => handles[a].bit_and(&handles[b])?,
                    3 => handles[a].bit_or(&handles[b])?,
                    4 => handles[a].bit_xor(&handles[b])?,
                    5 => handles[a].bit_not()?,
                    6 => handles[a].shl(sh)?,
                    7 => handles[a].shr(sh)?,
                    8 => handles[a].increment()?,
                    _ => unreachable!(),
                };
                handles.push(r);
            }
            handles.last().unwrap().mark_output()
        })
        .unwrap();
        let virt = shared.borrow().clone();
        let spec = WorkloadSpec {
            name: WorkloadName::Merge,
            n: 1,
            worker_count: 1,
        };
        let planned = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
        let input = WorkerInput {
            ints: values.clone(),
            rows: vec![],
        };
        let (out, _) = run(&planned, &input, CostModel::default());
        assert_eq!(out.ints, vec![expected], "case {case} width {width}");
    }
}

#[test]
fn comparisons_and_mux_match_plaintext() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let width: u16 = 32;
        let a: u64 = rng.gen::<u32>() as u64;
        let b: u64 = rng.gen::<u32>() as u64;
        let t: u64 = rng.gen::<u32>() as u64;
        let f: u64 = rng.gen::<u32>() as u64;
        let opts = ProgramOptions::single(0, 8);
        let (sink, shared) = VecSink::new();
        run_placement(opts, DriverProfile::BitWire, Box::new(sink), |ctx| {
            let ha = ctx.int_input(width, Party::P0)?;
            let hb = ctx.int_input(width, Party::P0)?;
            let ht = ctx.int_input(width, Party::P0)?;
            let hf = ctx.int_input(width, Party::P0)?;
            let ge = ha.ge(&hb)?;
            let eq = ha.eq(&hb)?;
            let chosen = ge.mux(&ht, &hf)?;
            ge.mark_output()?;
            eq.mark_output()?;
            chosen.mark_output()
        })
        .unwrap();
        let virt = shared.borrow().clone();
        let spec = WorkloadSpec {
            name: WorkloadName::Merge,
            n: 1,
            worker_count: 1,
        };
        let planned = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
        let input = WorkerInput {
            ints: vec![a as u128, b as u128, t as u128, f as u128],
            rows: vec![],
        };
        let (out, _) = run(&planned, &input, CostModel::default());
        let expect_ge = (a >= b) as u128;
        let expect_eq = (a == b) as u128;
        let expect_mux = if a >= b { t } else { f } as u128;
        assert_eq!(out.ints, vec![expect_ge, expect_eq, expect_mux]);
    }
}

#[test]
fn tiled_matmul_faults_less_under_a_small_budget() {
    // Both orders make the same n^3 operand accesses; what tiling changes
    // is reuse distance. Under a fixed small frame budget the tiled order
    // must swap each input page back in fewer times.
    let n = 8;
    let naive = WorkloadSpec {
        name: WorkloadName::NRmatmul,
        n,
        worker_count: 1,
    };
    let tiled = WorkloadSpec {
        name: WorkloadName::TRmatmul,
        n,
        worker_count: 1,
    };
    let capacity = 16;
    let naive_plan = plan(&naive, &build_virtual(&naive, 0), Policy::MinNextUse, capacity, None);
    let tiled_plan = plan(&tiled, &build_virtual(&tiled, 0), Policy::MinNextUse, capacity, None);
    assert!(
        tiled_plan.stats.policy_swap_ins < naive_plan.stats.policy_swap_ins,
        "tiled {} vs naive {} swap-ins",
        tiled_plan.stats.policy_swap_ins,
        naive_plan.stats.policy_swap_ins
    );
}

#[test]
fn batch_dag_level_algebra_matches_reference() {
    // Random batch expression DAGs: builder metadata must equal a direct
    // recursive computation of the level rules, and engine slot values
    // must equal plaintext evaluation.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    #[derive(Clone)]
    struct Node {
        level: u8,
        relin: bool,
        slots: Vec<i64>,
    }
    for case in 0..60 {
        let n_inputs = rng.gen_range(2..5usize);
        let rows: Vec<Vec<i64>> = (0..n_inputs)
            .map(|_| (0..DIM).map(|_| rng.gen_range(-1000i64..1000) * SCALE).collect())
            .collect();
        let n_ops = rng.gen_range(1..10usize);
        let script: Vec<(u32, usize, usize, i64)> = (0..n_ops)
            .map(|_| {
                (
                    rng.gen_range(0..5u32),
                    rng.gen::<usize>(),
                    rng.gen::<usize>(),
                    rng.gen_range(-8i64..8) * SCALE,
                )
            })
            .collect();

        // Reference recursive evaluation of the level rules.
        let mut ref_nodes: Vec<Node> = rows
            .iter()
            .map(|r| Node {
                level: 2,
                relin: true,
                slots: r.clone(),
            })
            .collect();
        let mut expected_ops: Vec<Option<Node>> = Vec::new();
        for &(op, i, j, c) in &script {
            let a = ref_nodes[i % ref_nodes.len()].clone();
            let b = ref_nodes[j % ref_nodes.len()].clone();
            let node = match op {
                0 if a.level == b.level && a.relin == b.relin => Some(Node {
                    level: a.level,
                    relin: a.relin,
                    slots: a
                        .slots
                        .iter()
                        .zip(&b.slots)
                        .map(|(&x, &y)| x.wrapping_add(y))
                        .collect(),
                }),
                1 if a.level == b.level && a.level > 0 && a.relin && b.relin => Some(Node {
                    level: a.level,
                    relin: false,
                    slots: a
                        .slots
                        .iter()
                        .zip(&b.slots)
                        .map(|(&x, &y)| memprog_core::drivers::fixed_mul(x, y))
                        .collect(),
                }),
                2 if !a.relin => Some(Node {
                    level: a.level - 1,
                    relin: true,
                    slots: a.slots.clone(),
                }),
                3 if a.relin => Some(Node {
                    level: a.level,
                    relin: true,
                    slots: a.slots.iter().map(|&x| x.wrapping_add(c)).collect(),
                }),
                4 if a.relin && a.level > 0 => Some(Node {
                    level: a.level - 1,
                    relin: true,
                    slots: a
                        .slots
                        .iter()
                        .map(|&x| memprog_core::drivers::fixed_mul(x, c))
                        .collect(),
                }),
                _ => None,
            };
            if let Some(node) = &node {
                ref_nodes.push(node.clone());
            }
            expected_ops.push(node);
        }

        // Builder run: apply the same script; illegal steps must error.
        let opts = ProgramOptions::single(0, BATCH_SHIFT);
        let (sink, shared) = VecSink::new();
        let script2 = script.clone();
        let levels: std::rc::Rc<std::cell::RefCell<Vec<(u8, bool)>>> =
            std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
        let levels2 = levels.clone();
        run_placement(
            opts,
            profile_for(DriverId::LeveledBatch),
            Box::new(sink),
            move |ctx| {
                let mut handles = Vec::new();
                for _ in 0..n_inputs {
                    handles.push(ctx.batch_input(Party::P0)?);
                }
                for &(op, i, j, c) in &script2 {
                    let a = i % handles.len();
                    let b = j % handles.len();
                    let r = match op {
                        0 => handles[a].add(&handles[b]),
                        1 => handles[a].mul_no_relin(&handles[b]),
                        2 => handles[a].relin_rescale(),
                        3 => handles[a].add_plain(c),
                        4 => handles[a].mul_plain(c),
                        _ => unreachable!(),
                    };
                    match r {
                        Ok(h) => {
                            levels2.borrow_mut().push((h.level(), h.relinearized()));
                            handles.push(h);
                        }
                        Err(_) => levels2.borrow_mut().push((u8::MAX, false)),
                    }
                }
                // Output the last node if one exists (outputs must be
                // relinearized records are fine either way).
                handles.last().unwrap().mark_output()
            },
        )
        .unwrap();

        // Builder metadata equals the reference, step by step.
        for (k, exp) in expected_ops.iter().enumerate() {
            let got = levels.borrow()[k];
            match exp {
                Some(node) => assert_eq!(
                    got,
                    (node.level, node.relin),
                    "case {case} op {k} metadata"
                ),
                None => assert_eq!(got.0, u8::MAX, "case {case} op {k} should fail"),
            }
        }

        // Execute and compare the final slots.
        let virt = shared.borrow().clone();
        let spec = WorkloadSpec {
            name: WorkloadName::Rsum,
            n: 1,
            worker_count: 1,
        };
        let planned = plan(&spec, &virt, Policy::MinNextUse, u64::MAX, None);
        let input = WorkerInput {
            ints: vec![],
            rows: rows.clone(),
        };
        let (out, _) = run(&planned, &input, CostModel::default());
        assert_eq!(out.rows, vec![ref_nodes.last().unwrap().slots.clone()]);
    }
}
