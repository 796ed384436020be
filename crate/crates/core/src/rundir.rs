//! On-disk layout of a single training run.
//!
//! ```text
//! <run>/config.json          RunConfig snapshot
//! <run>/partition.fgid       client partition used
//! <run>/metrics.jsonl        one RoundReport per line, flushed every round
//! <run>/checkpoints/round_NNNN.fgid
//! <run>/checkpoints/final.fgid
//! <run>/checkpoints/client_NN.fgid   last-round local models
//! <run>/summary.json         written last; marks the run complete
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{RoundReport, RoundSink, TrainConfig};
use crate::model::ModelParams;
use crate::storage::{save_checkpoint, Checkpoint};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PARTITION_FILE: &str = "partition.fgid";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Row label in summary tables, e.g. `fedavg` or `+GI_FM+GD`.
    pub label: String,
    /// Directory holding `train.fgid` and `ood_test.fgid`.
    pub dataset: PathBuf,
    /// Optional `id x1 y1 x2 y2` box table replacing the exact masks.
    pub bbox_file: Option<PathBuf>,
    /// Save the global model every this many rounds; 0 keeps only the final.
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub algorithm: String,
    pub beta: f64,
    pub seed: u64,
    pub rounds: usize,
    pub final_ood_accuracy: f64,
}

pub fn checkpoint_path(run: &Path, round: usize) -> PathBuf {
    run.join(CHECKPOINT_DIR)
        .join(format!("round_{round:04}.fgid"))
}

pub fn final_checkpoint_path(run: &Path) -> PathBuf {
    run.join(CHECKPOINT_DIR).join("final.fgid")
}

pub fn client_checkpoint_path(run: &Path, client: usize) -> PathBuf {
    run.join(CHECKPOINT_DIR)
        .join(format!("client_{client:02}.fgid"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Streams round reports and checkpoints into a run directory.
pub struct RunWriter {
    dir: PathBuf,
    metrics: File,
    checkpoint_every: usize,
    seed: u64,
}

impl RunWriter {
    /// Creates the directory, writes the config snapshot and truncates any
    /// earlier metrics or summary.
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join(SUMMARY_FILE);
        if summary.exists() {
            fs::remove_file(&summary).map_err(|e| Error::io(&summary, e))?;
        }
        write_json(&dir.join(CONFIG_FILE), config)?;
        let metrics_path = dir.join(METRICS_FILE);
        let metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics,
            checkpoint_every: config.checkpoint_every,
            seed: config.train.seed,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn checkpoint(&self, path: &Path, params: &ModelParams, round: usize) -> Result<()> {
        save_checkpoint(
            path,
            &Checkpoint {
                params: params.clone(),
                seed: self.seed,
                round,
            },
        )
    }

    /// Writes the final and per-client checkpoints, then the summary.
    pub fn finish(
        &mut self,
        summary: &RunSummary,
        global: &ModelParams,
        last_local: &[(usize, ModelParams)],
    ) -> Result<()> {
        self.checkpoint(&final_checkpoint_path(&self.dir), global, summary.rounds)?;
        for (client, params) in last_local {
            self.checkpoint(
                &client_checkpoint_path(&self.dir, *client),
                params,
                summary.rounds,
            )?;
        }
        write_json(&self.dir.join(SUMMARY_FILE), summary)
    }
}

impl RoundSink for RunWriter {
    fn round_finished(&mut self, report: &RoundReport, global: &ModelParams) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        let line = serde_json::to_string(report)?;
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))?;
        if self.checkpoint_every > 0 && report.round.is_multiple_of(self.checkpoint_every) {
            self.checkpoint(
                &checkpoint_path(&self.dir, report.round),
                global,
                report.round,
            )?;
        }
        Ok(())
    }
}

pub fn read_config(run: &Path) -> Result<RunConfig> {
    read_json(&run.join(CONFIG_FILE))
}

pub fn read_metrics(run: &Path) -> Result<Vec<RoundReport>> {
    let path = run.join(METRICS_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reports = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            reports.push(serde_json::from_str(&line)?);
        }
    }
    Ok(reports)
}

/// Summary of a completed run. Runs without a summary, or whose metrics
/// stop short of the configured round count, are incomplete.
pub fn read_run(run: &Path) -> Result<RunSummary> {
    let summary_path = run.join(SUMMARY_FILE);
    if !summary_path.is_file() {
        return Err(Error::IncompleteRun(run.to_path_buf()));
    }
    let summary: RunSummary = read_json(&summary_path)?;
    let reports = read_metrics(run)?;
    if reports.len() != summary.rounds {
        return Err(Error::IncompleteRun(run.to_path_buf()));
    }
    Ok(summary)
}
