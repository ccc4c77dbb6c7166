//! Artifact writers. Column names here are part of the CLI's interface.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use fedspa_core::checkpoint::serialize_checkpoint;
use fedspa_core::orchestrator::{PrunedModel, RoundReport};
use serde::Serialize;

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_FILE: &str = "final.fspa";
pub const COMPARE_FILE: &str = "compare.csv";

/// One row of `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    /// `dense`, `federated` or `random`.
    pub model: &'static str,
    pub target_sparsity: f64,
    /// Fraction of zero mask entries over all layers; 0 for the dense model.
    pub achieved_sparsity: f64,
    pub loss: f64,
    pub perplexity_proxy: f64,
    /// Sum over layers of `‖(W_dense − W)·X‖²` on held-out layer inputs.
    pub recon_error: f64,
}

/// One row of `compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub dataset: String,
    pub sparsity: f64,
    /// `standalone` (mean over clients), `federated` or `random`.
    pub method: &'static str,
    pub loss: f64,
    pub perplexity_proxy: f64,
}

pub fn write_rounds(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, model: &PrunedModel) -> Result<()> {
    let bytes = serialize_checkpoint(&model.model, model.masks.as_deref())?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
