//! Metrics and checkpoint sink for training runs.
//!
//! Writes `metrics.csv` (header `epoch,split,elbo,recon,kl,wall_seconds`)
//! row by row and refreshes `checkpoint.dtvae` at every epoch boundary.
//! Floats are printed in shortest round-trip form, so the deterministic
//! columns are byte-stable across identical runs; `wall_seconds` is wall
//! clock and is the one column that varies.

use crate::checkpoint::save_checkpoint;
use dtvae_core::nn::{AdamState, ModelParams};
use dtvae_core::vae::{EpochRecord, EpochSink, TrainConfig};
use dtvae_core::Result;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str = "epoch,split,elbo,recon,kl,wall_seconds";

pub struct RunSink {
    cfg: TrainConfig,
    csv: BufWriter<File>,
    checkpoint_path: PathBuf,
}

impl RunSink {
    pub fn create(out_dir: &Path, cfg: &TrainConfig) -> Result<RunSink> {
        std::fs::create_dir_all(out_dir)?;
        let mut csv = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
        writeln!(csv, "{METRICS_HEADER}")?;
        csv.flush()?;
        Ok(RunSink {
            cfg: cfg.clone(),
            csv,
            checkpoint_path: out_dir.join("checkpoint.dtvae"),
        })
    }
}

impl EpochSink for RunSink {
    fn on_epoch(
        &mut self,
        params: &ModelParams,
        adam: &AdamState,
        records: &[EpochRecord],
    ) -> Result<()> {
        for r in records {
            writeln!(
                self.csv,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.split, r.elbo, r.recon, r.kl, r.wall_seconds
            )?;
        }
        self.csv.flush()?;
        let epoch_done = records.last().map(|r| r.epoch + 1).unwrap_or(0);
        save_checkpoint(&self.checkpoint_path, &self.cfg, params, adam, epoch_done)?;
        Ok(())
    }
}

/// Drop the trailing wall-clock column from a metrics file, leaving only
/// the deterministic content. Used by reproducibility comparisons.
pub fn strip_wall_column(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rsplit_once(',') {
            Some((head, _)) => head.to_string(),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}
