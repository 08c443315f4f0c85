//! The benchmark suite: every workload under four scenarios, reported as
//! virtual-time ratios normalized by the unbounded run.
//!
//! Scenarios:
//! - `unbounded`: planned with enough frames for the whole footprint; the
//!   normalization baseline.
//! - `min_prefetch`: MIN replacement plus asynchronous prefetch
//!   scheduling, under a memory limit of footprint/divisor.
//! - `demand_lru` / `demand_fifo`: demand paging at the same memory
//!   limit, swaps synchronous at the point of use. These stand in for OS
//!   swapping, which is not reproducible in-repo.
//!
//! The simulator calibration (gate costs, storage latency/bandwidth,
//! lookahead, buffer size) is recorded in the report next to the numbers
//! it produced. CSV output carries no wall-clock fields, so repeated runs
//! with one seed are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use memprog_core::bytecode::DriverId;
use memprog_core::engine::ExecStats;
use memprog_core::replacement::Policy;
use memprog_core::scheduling::little_law_buffer;
use memprog_core::workloads::{generate_inputs, WorkloadName, WorkloadSpec, ALL_WORKLOADS};

use crate::config::RunConfig;
use crate::pipeline::{plan_worker, run_all_workers, PlanOutcome};
use crate::textio::write_dataset;

/// Desk-scale problem sizes: large enough that every workload's footprint
/// is many pages under the bench page sizes, small enough that the whole
/// suite runs in seconds.
pub fn bench_size(name: WorkloadName) -> u64 {
    match name {
        WorkloadName::Merge => 1024,
        WorkloadName::Sort => 512,
        WorkloadName::LJoin => 128,
        WorkloadName::Mvmul => 128,
        WorkloadName::BinFcLayer => 256,
        WorkloadName::Rsum | WorkloadName::Rstats => 512,
        WorkloadName::Rmvmul | WorkloadName::NRmatmul | WorkloadName::TRmatmul => 16,
    }
}

/// Bench calibration per driver. Chosen so the zero-stall sufficiency
/// condition holds: one page transfer (latency + size/bandwidth) fits
/// within `lookahead` instructions of compute, and the prefetch buffer
/// covers the transfers in flight per Little's law.
pub fn bench_config(driver: DriverId) -> RunConfig {
    let mut cfg = RunConfig::defaults(driver);
    cfg.sim_latency_ns = 400_000;
    cfg.sim_bandwidth_bytes_per_sec = 1_000_000_000;
    cfg.cost.instruction_base_ns = 1_200;
    match driver {
        DriverId::BitWire => {
            cfg.page_shift = 10; // 1024 wires = 16 KiB pages
            cfg.cost.bit_gate_ns = 25;
            cfg.cost.page_copy_ns = 2_000;
            cfg.lookahead = 512;
            cfg.prefetch_frames = 32;
        }
        DriverId::LeveledBatch => {
            cfg.page_shift = 17; // 128 KiB pages
            cfg.dimension = 1024;
            cfg.base_relin_bytes = 16 * 1024;
            cfg.base_unrelin_bytes = 24 * 1024;
            cfg.cost.batch_op_ns = 100_000;
            cfg.cost.page_copy_ns = 16_000;
            cfg.lookahead = 24;
            cfg.prefetch_frames = 6;
        }
    }
    cfg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Scenario {
    Unbounded,
    MinPrefetch,
    DemandLru,
    DemandFifo,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Unbounded,
        Scenario::MinPrefetch,
        Scenario::DemandLru,
        Scenario::DemandFifo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Unbounded => "unbounded",
            Scenario::MinPrefetch => "min_prefetch",
            Scenario::DemandLru => "demand_lru",
            Scenario::DemandFifo => "demand_fifo",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchCell {
    pub workload: WorkloadName,
    pub scenario: Scenario,
    pub total_frames: Option<u64>,
    pub exec: ExecStats,
    pub plan: PlanOutcome,
    /// total_virtual_time / unbounded total_virtual_time.
    pub ratio: f64,
    pub plan_wall_ms: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Calibration {
    pub driver: DriverId,
    pub page_bytes: u64,
    pub sim_latency_ns: u64,
    pub sim_bandwidth_bytes_per_sec: u64,
    pub cost: memprog_core::engine::CostModel,
    pub lookahead: u64,
    pub prefetch_frames: u64,
    pub little_law_frames: u64,
    pub page_transfer_ns: u64,
    /// transfer <= lookahead x cheapest instruction cost.
    pub zero_stall_margin_ns: i64,
}

fn calibration(cfg: &RunConfig) -> Calibration {
    let page_bytes = cfg.page_bytes();
    let transfer =
        cfg.sim_latency_ns + page_bytes * 1_000_000_000 / cfg.sim_bandwidth_bytes_per_sec;
    let per_instruction = cfg.cost.instruction_base_ns
        + match cfg.driver {
            DriverId::BitWire => cfg.cost.bit_gate_ns,
            DriverId::LeveledBatch => cfg.cost.batch_op_ns,
        };
    Calibration {
        driver: cfg.driver,
        page_bytes,
        sim_latency_ns: cfg.sim_latency_ns,
        sim_bandwidth_bytes_per_sec: cfg.sim_bandwidth_bytes_per_sec,
        cost: cfg.cost,
        lookahead: cfg.lookahead,
        prefetch_frames: cfg.prefetch_frames,
        little_law_frames: little_law_buffer(
            cfg.sim_bandwidth_bytes_per_sec,
            cfg.sim_latency_ns,
            page_bytes,
        ),
        page_transfer_ns: transfer,
        zero_stall_margin_ns: (cfg.lookahead * per_instruction) as i64 - transfer as i64,
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub seed: u64,
    pub footprint_divisor: u64,
    pub calibration: Vec<Calibration>,
    pub cells: Vec<BenchCell>,
    /// Process peak RSS after each workload's planning, cumulative.
    pub cumulative_peak_rss_kib: BTreeMap<String, u64>,
}

pub struct BenchSettings {
    pub seed: u64,
    pub footprint_divisor: u64,
    pub out_dir: PathBuf,
    pub workloads: Vec<WorkloadName>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            seed: 42,
            footprint_divisor: 4,
            out_dir: PathBuf::from("bench"),
            workloads: ALL_WORKLOADS.to_vec(),
        }
    }
}

/// Runs one (workload, scenario) cell: plan under the scenario's budget,
/// execute on the simulator, collect stats.
fn run_cell(
    base_cfg: &RunConfig,
    spec: &WorkloadSpec,
    scenario: Scenario,
    total_frames: Option<u64>,
    dir: &Path,
    input_prefix: &Path,
) -> Result<(ExecStats, PlanOutcome, u64)> {
    let mut cfg = base_cfg.clone();
    cfg.memory_limit_bytes = total_frames.map(|f| f * cfg.page_bytes());
    let policy = match scenario {
        Scenario::DemandLru => Policy::Lru,
        Scenario::DemandFifo => Policy::Fifo,
        _ => Policy::MinNextUse,
    };
    if scenario != Scenario::MinPrefetch {
        cfg.lookahead = 0;
        cfg.prefetch_frames = 0;
    }
    let prefix = dir.join(format!("{}_{}", spec.name.as_str(), scenario.as_str()));
    let started = std::time::Instant::now();
    let outcome = plan_worker(&cfg, spec, 0, policy, &prefix, false)
        .with_context(|| format!("{} / {}", spec.name.as_str(), scenario.as_str()))?;
    let plan_wall_ms = started.elapsed().as_millis() as u64;
    let out_prefix = dir.join(format!("{}_{}_run", spec.name.as_str(), scenario.as_str()));
    let stats = run_all_workers(&cfg, &prefix, input_prefix, &out_prefix)?;
    Ok((stats.into_iter().next().unwrap(), outcome, plan_wall_ms))
}

pub fn run_bench(settings: &BenchSettings) -> Result<BenchReport> {
    std::fs::create_dir_all(&settings.out_dir)?;
    let mut cells = Vec::new();
    let mut rss = BTreeMap::new();
    for &name in &settings.workloads {
        let spec = WorkloadSpec {
            name,
            n: bench_size(name),
            worker_count: 1,
        };
        let cfg = bench_config(name.driver());
        let dir = settings.out_dir.join(name.as_str());
        std::fs::create_dir_all(&dir)?;

        let data = generate_inputs(&spec, settings.seed, cfg.dimension)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let input_prefix = dir.join("inputs");
        write_dataset(&data, &input_prefix)?;

        // Scenario 1 establishes the footprint and the baseline time.
        let (base_exec, base_plan, base_ms) = run_cell(
            &cfg,
            &spec,
            Scenario::Unbounded,
            None,
            &dir,
            &input_prefix,
        )?;
        let footprint = base_plan.plan.peak_resident;
        let base_ns = base_exec.total_virtual_time_ns.max(1);
        let limit =
            (footprint / settings.footprint_divisor).max(cfg.prefetch_frames + 6);
        cells.push(BenchCell {
            workload: name,
            scenario: Scenario::Unbounded,
            total_frames: None,
            exec: base_exec,
            plan: base_plan,
            ratio: 1.0,
            plan_wall_ms: base_ms,
        });

        for scenario in [Scenario::MinPrefetch, Scenario::DemandLru, Scenario::DemandFifo] {
            let (exec, plan, wall) =
                run_cell(&cfg, &spec, scenario, Some(limit), &dir, &input_prefix)?;
            cells.push(BenchCell {
                workload: name,
                scenario,
                total_frames: Some(limit),
                ratio: exec.total_virtual_time_ns as f64 / base_ns as f64,
                exec,
                plan,
                plan_wall_ms: wall,
            });
        }
        rss.insert(name.as_str().to_string(), peak_rss_kib());
    }
    let report = BenchReport {
        seed: settings.seed,
        footprint_divisor: settings.footprint_divisor,
        calibration: vec![
            calibration(&bench_config(DriverId::BitWire)),
            calibration(&bench_config(DriverId::LeveledBatch)),
        ],
        cells,
        cumulative_peak_rss_kib: rss,
    };
    write_outputs(settings, &report)?;
    Ok(report)
}

fn write_outputs(settings: &BenchSettings, report: &BenchReport) -> Result<()> {
    std::fs::write(
        settings.out_dir.join("report.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    let mut csv = String::from(
        "workload,scenario,total_frames,total_virtual_ns,compute_ns,stall_ns,\
         finish_swapin_stalls,swap_ins,swap_outs,peak_resident_frames,ratio\n",
    );
    for cell in &report.cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.4}\n",
            cell.workload.as_str(),
            cell.scenario.as_str(),
            cell.total_frames.map_or(String::from("unbounded"), |f| f.to_string()),
            cell.exec.total_virtual_time_ns,
            cell.exec.compute_time_ns,
            cell.exec.stall_time_ns,
            cell.exec.finish_swapin_stalls,
            cell.exec.swap_ins,
            cell.exec.swap_outs,
            cell.plan.plan.peak_resident,
            cell.ratio,
        ));
    }
    std::fs::write(settings.out_dir.join("results.csv"), csv)?;
    std::fs::write(settings.out_dir.join("plot.gp"), GNUPLOT_SCRIPT)?;
    Ok(())
}

/// Process peak RSS from /proc, in KiB. Cumulative over the process, so
/// per-workload values are an upper bound.
fn peak_rss_kib() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

const GNUPLOT_SCRIPT: &str = r#"# gnuplot -c plot.gp
# Bar chart of normalized virtual time per workload and scenario,
# generated from results.csv.
set datafile separator ','
set style data histogram
set style histogram cluster gap 1
set style fill solid 0.8 border -1
set boxwidth 0.9
set ylabel 'virtual time / unbounded'
set xtics rotate by -35
set key top left
set grid ytics
set term pngcairo size 1100,500
set output 'ratios.png'
plot '< sort -t, -k1,1 -k2,2 results.csv | awk -F, ''NR>1 && $2=="unbounded" {print $1","$11}''' using 2:xtic(1) title 'unbounded', \
     '< sort -t, -k1,1 -k2,2 results.csv | awk -F, ''NR>1 && $2=="min_prefetch" {print $1","$11}''' using 2 title 'min prefetch', \
     '< sort -t, -k1,1 -k2,2 results.csv | awk -F, ''NR>1 && $2=="demand_lru" {print $1","$11}''' using 2 title 'demand LRU', \
     '< sort -t, -k1,1 -k2,2 results.csv | awk -F, ''NR>1 && $2=="demand_fifo" {print $1","$11}''' using 2 title 'demand FIFO'
"#;
