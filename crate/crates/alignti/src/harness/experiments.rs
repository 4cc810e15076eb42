//! Concurrent execution of independent distillation runs.
//!
//! Each run is fully determined by its config, so runs can execute on
//! separate threads with no shared mutable state; results come back in
//! submission order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::train::{distill, DistillOutcome};
use crate::harness::RunConfig;

pub struct MatrixRun {
    pub label: String,
    pub config: RunConfig,
}

/// Runs every distillation concurrently against the same frozen teacher
/// checkpoint (each worker loads its own copy).
pub fn distill_matrix(
    runs: Vec<MatrixRun>,
    teacher_ckpt: &Path,
) -> Result<Vec<(String, DistillOutcome)>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|run| {
                let cfg = run.config.clone();
                let label = run.label.clone();
                let ckpt = teacher_ckpt.to_path_buf();
                scope.spawn(move || distill(&cfg, &ckpt).map(|out| (label, out)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Contract("distillation worker panicked".into()))?
            })
            .collect()
    })
}
