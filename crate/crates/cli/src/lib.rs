//! Library half of the `dtvae` command-line tool: checkpoint container,
//! metrics sink, and PGM sample output. The binary in `main.rs` is a thin
//! flag-parsing layer over these and the core crate.

pub mod checkpoint;
pub mod metrics;
pub mod pgm;

pub use checkpoint::{configs_compatible, load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{strip_wall_column, RunSink, METRICS_HEADER};
