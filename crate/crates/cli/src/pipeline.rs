//! The plan and run pipelines over program files.
//!
//! Planning persists each stage's output: the placement stage streams a
//! virtual bytecode to disk, the annotation pass writes a next-use
//! sidecar (backwards, so a reverse read recovers forward order), the
//! replacement stage writes the synchronous-swap memory program, and the
//! scheduler writes the final prefetching program. Intermediates are
//! deleted unless asked for; they cost a few times the final program.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memprog_core::bytecode::{Dialect, DriverId, ProgramHeader};
use memprog_core::engine::{
    run_batch_program, run_bit_program, ExecEnv, ExecStats, NoChannel, WorkerChannel,
};
use memprog_core::dsl::{run_placement, PlacementReport, ProgramOptions};
use memprog_core::replacement::{
    plan_program, NextUse, NextUseAnnotator, PlanError, PlanStats, Policy,
};
use memprog_core::replay::{last_access_map, verify_plan, ReplayError, ReplayReport};
use memprog_core::scheduling::{schedule, SchedError, SchedStats, SchedulerConfig};
use memprog_core::sim::{SimulatedStorage, VirtualClock};
use memprog_core::workloads::{default_tile, emit_workload, WorkloadName, WorkloadSpec};

use crate::config::{ChannelKind, RunConfig, StorageKind};
use crate::files::{
    decode_annotation, encode_annotation, ProgramReader, ProgramWriter, ReverseRecordReader,
    SinkAdapter, ANNOTATION_LEN,
};
use crate::storage::{FileStorage, WallClock};
use crate::textio::{TextValueSink, TextValueSource};

pub fn program_path(prefix: &Path, worker: u32) -> PathBuf {
    prefix.with_extension(format!("{worker}.mpg"))
}

pub fn virtual_path(prefix: &Path, worker: u32) -> PathBuf {
    prefix.with_extension(format!("{worker}.virt.mpg"))
}

fn annotation_path(prefix: &Path, worker: u32) -> PathBuf {
    prefix.with_extension(format!("{worker}.ann.tmp"))
}

fn swap_path(prefix: &Path, worker: u32) -> PathBuf {
    prefix.with_extension(format!("{worker}.swap.mpg"))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PlanOutcome {
    pub workload: WorkloadName,
    pub worker: u32,
    pub policy: Policy,
    pub placement: PlacementReport,
    pub plan: PlanStats,
    pub sched: Option<SchedStats>,
    pub header: ProgramHeader,
    pub tile: Option<u64>,
    pub virtual_bytes: u64,
    pub final_bytes: u64,
}

/// Plans one worker's memory program for a workload: placement,
/// annotation, replacement, and (for the MIN policy with a lookahead)
/// scheduling, each streamed through files.
pub fn plan_worker(
    cfg: &RunConfig,
    spec: &WorkloadSpec,
    worker: u32,
    policy: Policy,
    out_prefix: &Path,
    keep_intermediates: bool,
) -> Result<PlanOutcome> {
    spec.validate()
        .map_err(|e| anyhow::anyhow!("invalid workload spec: {e}"))?;
    if spec.name.driver() != cfg.driver {
        bail!(
            "workload {} needs the {:?} driver, config says {:?}",
            spec.name.as_str(),
            spec.name.driver(),
            cfg.driver
        );
    }
    if let Some(parent) = out_prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let total_frames = cfg.total_frames();
    let (capacity, sched_cfg) = budget(cfg, policy, total_frames)?;

    // Tile choice for the tiled matmul: the largest power-of-two edge
    // whose three working tiles fit in the data frames.
    let tile = (spec.name == WorkloadName::TRmatmul).then(|| pick_tile(cfg, spec.n, capacity));

    // Stage 1: placement.
    let virt = virtual_path(out_prefix, worker);
    let vheader = ProgramHeader {
        dialect: Dialect::Virtual,
        address_unit: cfg.driver.address_unit(),
        driver: cfg.driver,
        page_shift: cfg.page_shift,
        instruction_count: 0,
        frame_count: 0,
        prefetch_frames: 0,
        storage_frame_count: 0,
    };
    let writer = ProgramWriter::create(&virt, vheader)?;
    let opts = ProgramOptions {
        worker_id: worker,
        worker_count: spec.worker_count,
        problem_size: spec.n,
        page_shift: cfg.page_shift,
        tile,
    };
    let name = spec.name;
    // run_placement owns its sink; share the adapter so the writer can be
    // recovered for the header patch afterwards.
    let shared = std::rc::Rc::new(std::cell::RefCell::new(SinkAdapter::new(writer)));
    struct Shared(std::rc::Rc<std::cell::RefCell<SinkAdapter>>);
    impl memprog_core::bytecode::InstructionSink for Shared {
        fn emit(
            &mut self,
            inst: &memprog_core::bytecode::Instruction,
        ) -> Result<(), memprog_core::bytecode::BytecodeError> {
            self.0.borrow_mut().emit(inst)
        }
    }
    let placement = run_placement(
        opts,
        cfg.profile(),
        Box::new(Shared(shared.clone())),
        move |ctx| emit_workload(name, ctx),
    )
    .map_err(|e| anyhow::anyhow!("placement failed: {e}"))?;
    let sink = std::rc::Rc::try_unwrap(shared)
        .ok()
        .expect("placement dropped its sink")
        .into_inner();
    let vheader = sink.into_inner()?.finish(|_| {})?;
    let n = vheader.instruction_count;
    let virtual_bytes = std::fs::metadata(&virt)?.len();

    // Stage 2a: backward next-use pass into the annotation sidecar.
    let ann = annotation_path(out_prefix, worker);
    {
        let mut rev = ReverseRecordReader::open(
            &virt,
            memprog_core::bytecode::HEADER_LEN as u64,
            memprog_core::bytecode::RECORD_LEN,
            n,
        )?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&ann)?);
        let mut annotator = NextUseAnnotator::new(cfg.page_shift);
        let mut index = n;
        while let Some(rec) = rev.next_back()? {
            index -= 1;
            let inst = memprog_core::bytecode::Instruction::decode(
                rec.as_slice().try_into().unwrap(),
                Dialect::Virtual,
            )?;
            let annotation = annotator.annotate(index, &inst);
            std::io::Write::write_all(&mut out, &encode_annotation(&annotation))?;
        }
        std::io::Write::flush(&mut out)?;
    }

    // Stage 2b: forward replacement pass.
    let swapped = swap_path(out_prefix, worker);
    let plan_stats = {
        let reader = ProgramReader::open(&virt)?;
        let mut ann_rev = ReverseRecordReader::open(&ann, 0, ANNOTATION_LEN, n)?;
        let items = reader.iter_mapped(PlanError::Source).map(move |item| {
            let inst = item?;
            let rec = ann_rev
                .next_back()
                .map_err(|e| PlanError::Source(format!("{e:#}")))?
                .ok_or_else(|| PlanError::Source("annotation file underrun".into()))?;
            Ok((inst, decode_annotation(&rec) as NextUse))
        });
        let pheader = ProgramHeader {
            dialect: Dialect::Physical,
            instruction_count: 0,
            ..vheader
        };
        let writer = ProgramWriter::create(&swapped, pheader)?;
        let mut sink = SinkAdapter::new(writer);
        let stats = plan_program(cfg.page_shift, policy, capacity, items, &mut sink)
            .map_err(|e| anyhow::anyhow!("replacement failed: {e}"))?;
        let final_frames = if capacity == u64::MAX {
            stats.peak_resident
        } else {
            capacity
        };
        sink.into_inner()?.finish(|h| {
            h.frame_count = final_frames;
            h.storage_frame_count = stats.storage_frames;
        })?;
        stats
    };

    // Stage 3: scheduling, when a prefetch buffer is in play.
    let final_path = program_path(out_prefix, worker);
    let sched_stats = match sched_cfg {
        Some(scfg) => {
            let reader = ProgramReader::open(&swapped)?;
            let header = *reader.header();
            let data_frames = header.frame_count;
            let writer = ProgramWriter::create(&final_path, header)?;
            let mut sink = SinkAdapter::new(writer);
            let stats = schedule(
                data_frames,
                scfg,
                reader.iter_mapped(SchedError::Source),
                &mut sink,
            )
            .map_err(|e| anyhow::anyhow!("scheduling failed: {e}"))?;
            sink.into_inner()?.finish(|h| {
                h.prefetch_frames = scfg.prefetch_frames;
            })?;
            Some(stats)
        }
        None => {
            std::fs::rename(&swapped, &final_path)?;
            None
        }
    };

    if !keep_intermediates {
        let _ = std::fs::remove_file(&virt);
        let _ = std::fs::remove_file(&ann);
        let _ = std::fs::remove_file(&swapped);
    } else {
        let _ = std::fs::remove_file(&ann);
    }

    let header = *ProgramReader::open(&final_path)?.header();
    let outcome = PlanOutcome {
        workload: spec.name,
        worker,
        policy,
        placement,
        plan: plan_stats,
        sched: sched_stats,
        header,
        tile,
        virtual_bytes,
        final_bytes: std::fs::metadata(&final_path)?.len(),
    };
    let stats_path = out_prefix.with_extension(format!("{worker}.plan.json"));
    std::fs::write(&stats_path, serde_json::to_string_pretty(&outcome)? + "\n")?;
    Ok(outcome)
}

/// Splits the configured frame budget between replacement capacity and
/// the prefetch buffer. Demand policies never prefetch: they plan at the
/// full budget with synchronous swaps.
fn budget(
    cfg: &RunConfig,
    policy: Policy,
    total_frames: Option<u64>,
) -> Result<(u64, Option<SchedulerConfig>)> {
    let Some(total) = total_frames else {
        return Ok((u64::MAX, None));
    };
    if policy != Policy::MinNextUse || cfg.lookahead == 0 {
        return Ok((total, None));
    }
    if total <= cfg.prefetch_frames + 1 {
        bail!(
            "memory budget of {total} frames cannot hold the {}-frame prefetch buffer",
            cfg.prefetch_frames
        );
    }
    Ok((
        total - cfg.prefetch_frames,
        Some(SchedulerConfig {
            lookahead: cfg.lookahead,
            prefetch_frames: cfg.prefetch_frames,
        }),
    ))
}

fn pick_tile(cfg: &RunConfig, n: u64, capacity: u64) -> u64 {
    if cfg.driver != DriverId::LeveledBatch || capacity == u64::MAX {
        return default_tile(n);
    }
    let driver = cfg.batch_driver();
    let relin = driver.size_of(cfg.max_level, true).unwrap_or(1);
    let unrelin = driver.size_of(cfg.max_level, false).unwrap_or(1);
    let budget = capacity.saturating_mul(cfg.page_bytes());
    let mut tile = default_tile(n).max(2);
    while tile > 2 {
        // Two input tiles plus one accumulator tile must stay hot.
        let need = tile * tile * (2 * relin + unrelin);
        if need <= budget {
            break;
        }
        tile /= 2;
    }
    tile
}

/// Re-checks a finished plan against its kept virtual program with the
/// independent replayer.
pub fn verify_plan_files(
    virt_path: &Path,
    final_path: &Path,
    lookahead: u64,
) -> Result<ReplayReport> {
    let vreader = ProgramReader::open(virt_path)?;
    let shift = vreader.header().page_shift;
    let last = last_access_map(shift, vreader.iter_mapped(ReplayError::Source))
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let vreader = ProgramReader::open(virt_path)?;
    let preader = ProgramReader::open(final_path)?;
    let header = *preader.header();
    verify_plan(
        shift,
        header.frame_count,
        header.prefetch_frames,
        lookahead,
        vreader.iter_mapped(ReplayError::Source),
        preader.iter_mapped(ReplayError::Source),
        &last,
    )
    .map_err(|e| anyhow::anyhow!("plan verification failed: {e}"))
}

pub struct RunPaths {
    pub program: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub stats: PathBuf,
}

pub fn run_paths(
    program_prefix: &Path,
    input_prefix: &Path,
    out_prefix: &Path,
    worker: u32,
) -> RunPaths {
    RunPaths {
        program: program_path(program_prefix, worker),
        input: input_prefix.with_extension(format!("{worker}.input")),
        output: out_prefix.with_extension(format!("{worker}.output")),
        stats: out_prefix.with_extension(format!("{worker}.stats.json")),
    }
}

/// Executes one worker's memory program against the configured backend
/// and channel, writing its output and stats files.
pub fn run_one_worker(
    cfg: &RunConfig,
    paths: &RunPaths,
    worker: u32,
    channel: &mut dyn WorkerChannel,
) -> Result<ExecStats> {
    let reader = ProgramReader::open(&paths.program)?;
    let header = *reader.header();
    if header.driver != cfg.driver {
        bail!(
            "program {} was planned for {:?}, config says {:?}",
            paths.program.display(),
            header.driver,
            cfg.driver
        );
    }
    let unit_bytes = cfg.unit_bytes();
    let page_bytes = header.page_units() as usize * unit_bytes;
    let mut source = TextValueSource::open(&paths.input)?;
    let mut sink = TextValueSink::create(&paths.output)?;

    let program = reader.iter_mapped(|e| memprog_core::engine::ExecError::Input(e));
    let stats = match cfg.storage {
        StorageKind::Sim => {
            let mut storage =
                SimulatedStorage::new(page_bytes, cfg.sim_latency_ns, cfg.sim_bandwidth_bytes_per_sec);
            let mut clock = VirtualClock::new();
            let mut env = ExecEnv {
                storage: &mut storage,
                channel,
                clock: &mut clock,
                cost: cfg.cost,
                input: &mut source,
                output: &mut sink,
            };
            dispatch(cfg, &header, program, &mut env)?
        }
        StorageKind::File => {
            let swap = cfg.swap_paths.get(&worker).cloned().ok_or_else(|| {
                anyhow::anyhow!("file storage needs worker.{worker}.swap_path in the config")
            })?;
            let epoch = std::time::Instant::now();
            let mut storage = FileStorage::open(&swap, page_bytes, epoch)?;
            let mut clock = WallClock::new();
            let mut env = ExecEnv {
                storage: &mut storage,
                channel,
                clock: &mut clock,
                cost: cfg.cost,
                input: &mut source,
                output: &mut sink,
            };
            dispatch(cfg, &header, program, &mut env)?
        }
    };
    sink.finish()?;
    std::fs::write(&paths.stats, serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(stats)
}

fn dispatch(
    cfg: &RunConfig,
    header: &ProgramHeader,
    program: impl Iterator<Item = Result<memprog_core::bytecode::Instruction, memprog_core::engine::ExecError>>,
    env: &mut ExecEnv<'_>,
) -> Result<ExecStats> {
    let stats = match header.driver {
        DriverId::BitWire => run_bit_program(header, program, &cfg.bit_driver(), env),
        DriverId::LeveledBatch => run_batch_program(header, program, &cfg.batch_driver(), env),
    }
    .map_err(|e| anyhow::anyhow!("execution failed: {e}"))?;
    Ok(stats)
}

/// Runs every worker of a multi-worker program over in-process channels,
/// one thread per worker. Returns stats in worker order.
pub fn run_all_workers(
    cfg: &RunConfig,
    program_prefix: &Path,
    input_prefix: &Path,
    out_prefix: &Path,
) -> Result<Vec<ExecStats>> {
    if cfg.workers == 1 {
        let paths = run_paths(program_prefix, input_prefix, out_prefix, 0);
        let mut channel = NoChannel;
        return Ok(vec![run_one_worker(cfg, &paths, 0, &mut channel)?]);
    }
    match cfg.channel {
        ChannelKind::InProcess => {
            let mesh = crate::channels::in_process_mesh(cfg.workers);
            let mut joins = Vec::new();
            for mut channel in mesh {
                let worker = channel.worker_id();
                let cfg = cfg.clone();
                let paths = run_paths(program_prefix, input_prefix, out_prefix, worker);
                joins.push(std::thread::spawn(move || {
                    run_one_worker(&cfg, &paths, worker, &mut channel)
                }));
            }
            let mut stats = Vec::new();
            for (worker, join) in joins.into_iter().enumerate() {
                let s = join
                    .join()
                    .map_err(|_| anyhow::anyhow!("worker {worker} panicked"))?
                    .with_context(|| format!("worker {worker}"))?;
                stats.push(s);
            }
            Ok(stats)
        }
        ChannelKind::Tcp => bail!(
            "tcp channels run one worker per process; use `run --worker N` on each machine"
        ),
    }
}

/// Runs a single worker with TCP channels to its peers.
pub fn run_tcp_worker(
    cfg: &RunConfig,
    program_prefix: &Path,
    input_prefix: &Path,
    out_prefix: &Path,
    worker: u32,
) -> Result<ExecStats> {
    let paths = run_paths(program_prefix, input_prefix, out_prefix, worker);
    if cfg.workers == 1 {
        let mut channel = NoChannel;
        return run_one_worker(cfg, &paths, 0, &mut channel);
    }
    let mut channel = crate::channels::TcpChannel::connect(worker, &cfg.addrs, cfg.workers)?;
    run_one_worker(cfg, &paths, worker, &mut channel)
}
