//! Storage engine for a hierarchical vector index with an episodic trace
//! store, a semantic lookaside cache and a write-ahead log.

#[cfg(target_endian = "big")]
compile_error!("on-disk formats are little-endian; big-endian targets are not supported");

pub mod atlas;
pub mod blob_arena;
pub mod compaction;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod slb;
pub mod storage;
pub mod sync;
pub mod trace;
pub mod wal;

pub use compaction::CompactionStats;
pub use engine::{Engine, EngineConfig, EngineOptions};
pub use error::{Error, Result};
