//! Planner and interpreter core for oblivious memory programs.
//!
//! Programs built through the embedded DSL are oblivious: their memory
//! access pattern does not depend on input values. That lets the planner
//! compute the entire access pattern ahead of time and compile a *memory
//! program*: the same instruction stream, translated to physical frame
//! addresses, with every storage transfer preplanned. Planning runs in
//! three stages:
//!
//! 1. [`dsl::run_placement`] executes a builder thunk against the
//!    page-aware slab allocator in [`placement`], emitting a
//!    virtual-dialect bytecode.
//! 2. [`replacement`] annotates next uses in a backward pass, then runs
//!    Belady's MIN (or a demand baseline) forward, translating addresses
//!    and inserting synchronous swap directives.
//! 3. [`scheduling`] rewrites the swaps into asynchronous issue/finish
//!    pairs routed through a prefetch buffer, hoisting reads ahead of
//!    their use to hide storage latency.
//!
//! [`engine`] interprets the result against a flat memory array, with
//! pluggable storage backends, worker channels, and protocol
//! [`drivers`]. [`replay`] independently verifies any plan against its
//! virtual program. Everything here is `no_std` + `alloc`; file IO, the
//! CLI, and real storage/network backends live in the companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bytecode;
pub mod drivers;
pub mod dsl;
pub mod engine;
pub mod placement;
pub mod replacement;
pub mod replay;
pub mod scheduling;
pub mod sim;
pub mod workloads;
