//! File formats, IO backends, configuration, and the command-line surface
//! for the memory-programming toolchain. The algorithms live in
//! `memprog-core`; this crate wires them to files, sockets, and clocks.

pub mod bench;
pub mod channels;
pub mod config;
pub mod files;
pub mod inspect;
pub mod pipeline;
pub mod storage;
pub mod textio;
