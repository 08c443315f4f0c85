use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use memprog::bench::{run_bench, BenchSettings};
use memprog::config::{ChannelKind, RunConfig};
use memprog::inspect::disassemble;
use memprog::pipeline::{plan_worker, run_all_workers, run_tcp_worker};
use memprog::textio::write_dataset;
use memprog_core::replacement::Policy;
use memprog_core::workloads::{generate_inputs, WorkloadName, WorkloadSpec, ALL_WORKLOADS};

/// Memory-programming toolchain for oblivious programs: plans swap and
/// prefetch schedules ahead of time, then interprets the result at near
/// in-memory speed.
#[derive(Parser)]
#[command(name = "memprog", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a workload into a memory program (placement, replacement,
    /// scheduling), one file per worker.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workload: String,
        /// Problem size (power of two).
        #[arg(long)]
        n: u64,
        /// Output prefix; worker w is written to <prefix>.<w>.mpg.
        #[arg(long)]
        out_prefix: PathBuf,
        /// Replacement policy: min, lru, or fifo.
        #[arg(long, default_value = "min")]
        policy: String,
        /// Plan only this worker (default: all workers in the config).
        #[arg(long)]
        worker: Option<u32>,
        /// Keep the intermediate bytecodes next to the output.
        #[arg(long)]
        keep_intermediates: bool,
    },
    /// Generate deterministic inputs and the expected output for a
    /// workload.
    GenInputs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workload: String,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        seed: u64,
        /// Files land at <prefix>.<worker>.input and <prefix>.expected.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Execute a planned memory program.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Program prefix from `plan`.
        #[arg(long)]
        program_prefix: PathBuf,
        /// Input prefix from `gen-inputs`.
        #[arg(long)]
        input_prefix: PathBuf,
        /// Output prefix; worker w writes <prefix>.<w>.output and
        /// <prefix>.<w>.stats.json.
        #[arg(long)]
        out_prefix: PathBuf,
        /// With tcp channels: which worker this process is.
        #[arg(long)]
        worker: Option<u32>,
    },
    /// Print a program file as a human-readable listing.
    Inspect {
        program: PathBuf,
        /// Print at most this many records.
        #[arg(long)]
        limit: Option<u64>,
    },
    /// Plan and run every workload under the unbounded, prefetching, and
    /// demand-paging scenarios; write a CSV, a JSON report, and a gnuplot
    /// script.
    Bench {
        #[arg(long, default_value = "bench")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Memory limit = footprint / divisor.
        #[arg(long, default_value_t = 4)]
        footprint_divisor: u64,
        /// Comma-separated workload names (default: all ten).
        #[arg(long)]
        workloads: Option<String>,
    },
}

fn parse_workload(name: &str) -> Result<WorkloadName> {
    WorkloadName::parse(name).ok_or_else(|| {
        anyhow::anyhow!(
            "unknown workload `{name}` (expected one of {})",
            ALL_WORKLOADS
                .iter()
                .map(|w| w.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )
    })
}

fn parse_policy(name: &str) -> Result<Policy> {
    Ok(match name {
        "min" => Policy::MinNextUse,
        "lru" => Policy::Lru,
        "fifo" => Policy::Fifo,
        other => bail!("unknown policy `{other}` (expected min, lru, or fifo)"),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Plan {
            config,
            workload,
            n,
            out_prefix,
            policy,
            worker,
            keep_intermediates,
        } => {
            let cfg = RunConfig::load(&config)?;
            let name = parse_workload(&workload)?;
            let policy = parse_policy(&policy)?;
            let spec = WorkloadSpec {
                name,
                n,
                worker_count: cfg.workers,
            };
            let workers: Vec<u32> = match worker {
                Some(w) => vec![w],
                None => (0..cfg.workers).collect(),
            };
            for w in workers {
                let outcome =
                    plan_worker(&cfg, &spec, w, policy, &out_prefix, keep_intermediates)?;
                println!(
                    "worker {w}: {} records, frames={} prefetch={} storage={} swap_ins={} swap_outs={} peak_resident={}",
                    outcome.header.instruction_count,
                    outcome.header.frame_count,
                    outcome.header.prefetch_frames,
                    outcome.header.storage_frame_count,
                    outcome.plan.policy_swap_ins,
                    outcome.plan.policy_swap_outs,
                    outcome.plan.peak_resident,
                );
            }
            Ok(())
        }
        Command::GenInputs {
            config,
            workload,
            n,
            seed,
            out_prefix,
        } => {
            let cfg = RunConfig::load(&config)?;
            let name = parse_workload(&workload)?;
            let spec = WorkloadSpec {
                name,
                n,
                worker_count: cfg.workers,
            };
            let data = generate_inputs(&spec, seed, cfg.dimension)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            if let Some(parent) = out_prefix.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            for path in write_dataset(&data, &out_prefix)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Run {
            config,
            program_prefix,
            input_prefix,
            out_prefix,
            worker,
        } => {
            let cfg = RunConfig::load(&config)?;
            if let Some(parent) = out_prefix.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            match (cfg.channel, worker) {
                (ChannelKind::Tcp, Some(w)) => {
                    let stats =
                        run_tcp_worker(&cfg, &program_prefix, &input_prefix, &out_prefix, w)?;
                    println!("worker {w}: {}", summarize(&stats));
                }
                (ChannelKind::Tcp, None) if cfg.workers > 1 => {
                    bail!("tcp channels need --worker N (one process per worker)")
                }
                _ => {
                    let all =
                        run_all_workers(&cfg, &program_prefix, &input_prefix, &out_prefix)?;
                    for (w, stats) in all.iter().enumerate() {
                        println!("worker {w}: {}", summarize(stats));
                    }
                }
            }
            Ok(())
        }
        Command::Inspect { program, limit } => {
            let stdout = std::io::stdout();
            disassemble(&program, limit, &mut stdout.lock())
        }
        Command::Bench {
            out_dir,
            seed,
            footprint_divisor,
            workloads,
        } => {
            let list = match workloads {
                None => ALL_WORKLOADS.to_vec(),
                Some(names) => names
                    .split(',')
                    .map(|s| parse_workload(s.trim()))
                    .collect::<Result<Vec<_>>>()?,
            };
            let settings = BenchSettings {
                seed,
                footprint_divisor,
                out_dir: out_dir.clone(),
                workloads: list,
            };
            let report = run_bench(&settings)?;
            println!(
                "{} cells -> {}/results.csv, report.json, plot.gp",
                report.cells.len(),
                out_dir.display()
            );
            for cell in &report.cells {
                println!(
                    "{:>12} {:>12}: ratio {:>7.3} stalls {:>6} swaps {:>6}/{:<6}",
                    cell.workload.as_str(),
                    cell.scenario.as_str(),
                    cell.ratio,
                    cell.exec.finish_swapin_stalls,
                    cell.exec.swap_ins,
                    cell.exec.swap_outs,
                );
            }
            Ok(())
        }
    }
}

fn summarize(stats: &memprog_core::engine::ExecStats) -> String {
    format!(
        "{} instructions, {} outputs, swaps {}/{}, stalls {}, virtual time {:.3} ms",
        stats.instructions_executed,
        stats.output_values,
        stats.swap_ins,
        stats.swap_outs,
        stats.finish_swapin_stalls,
        stats.total_virtual_time_ns as f64 / 1e6,
    )
}
