//! The persisted record of a run: checkpoints, snapshots and probe results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use csnn_core::metrics::Orientation;
use csnn_core::network::StepRecord;
use csnn_core::probes::{ProbeSpec, ProbeSummary};
use csnn_core::{Ablation, CsnnError, NetworkSpec, Result};
use serde::{Deserialize, Serialize};

pub const TRACE_FILE: &str = "trace.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PRETEXT_FILE: &str = "pretext.csv";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub version: u32,
    pub seed: u64,
    pub ablation: Ablation,
    pub orientation: Orientation,
    pub network: NetworkSpec,
    pub input_shape: (usize, usize, usize),
    /// Digest of the normalized pretext samples.
    pub pretext_digest: String,
    pub total_steps: u64,
    pub checkpoints: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    /// Relative to the run directory.
    pub snapshot: PathBuf,
    /// Mean per-batch utilization of every layer on the utilization samples.
    pub utilization: Vec<f64>,
    /// Mean SOM weight-change norm over the steps since the previous
    /// checkpoint; `None` when no layer trained in between.
    pub weight_change: Option<f64>,
    #[serde(default)]
    pub probes: BTreeMap<String, ProbeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub spec: ProbeSpec,
    pub encode_ablation: Ablation,
    pub kfold: Option<usize>,
    pub shots: Option<usize>,
    pub folds: Vec<FoldEntry>,
    /// Fold mean of every summary field.
    pub mean: ProbeSummary,
    /// Test accuracy (percent) of the pocket parameters; holdout and few-shot only.
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    /// Relative to the run directory.
    pub trace: PathBuf,
    pub summary: ProbeSummary,
}

pub fn snapshot_name(step: u64) -> PathBuf {
    PathBuf::from("snapshots").join(format!("step-{step:08}.csnn"))
}

pub fn mean_summary(s: &[ProbeSummary]) -> ProbeSummary {
    let n = s.len() as f64;
    let avg = |f: fn(&ProbeSummary) -> f64| s.iter().map(f).sum::<f64>() / n;
    ProbeSummary {
        epochs: s.iter().map(|x| x.epochs).min().unwrap_or(0),
        pocket_epoch: (avg(|x| x.pocket_epoch as f64)).round() as usize,
        pocket_accuracy: avg(|x| x.pocket_accuracy),
        final_eval_accuracy: avg(|x| x.final_eval_accuracy),
        best_eval_loss: avg(|x| x.best_eval_loss),
    }
}

impl RunTrace {
    pub fn load(run: &Path) -> Result<Self> {
        let path = run.join(TRACE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CsnnError::io(&path, e))?;
        let trace: RunTrace = serde_json::from_str(&text).map_err(|e| CsnnError::format(&path, e.to_string()))?;
        if trace.version != TRACE_VERSION {
            return Err(CsnnError::format(&path, format!("unsupported trace version {}", trace.version)));
        }
        trace.validate(run)?;
        Ok(trace)
    }

    pub fn save(&self, run: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("trace serializes");
        csnn_core::io::write_atomic_str(&run.join(TRACE_FILE), &(json + "\n"))
    }

    /// Checkpoints are sorted by step and every referenced file exists.
    pub fn validate(&self, run: &Path) -> Result<()> {
        if self.checkpoints.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(CsnnError::Invariant("trace checkpoints are not sorted by step".into()));
        }
        for c in &self.checkpoints {
            if !run.join(&c.snapshot).is_file() {
                return Err(CsnnError::Invariant(format!(
                    "checkpoint {} references missing snapshot {}",
                    c.step,
                    c.snapshot.display()
                )));
            }
            for (name, p) in &c.probes {
                if let Some(f) = p.folds.iter().find(|f| !run.join(&f.trace).is_file()) {
                    return Err(CsnnError::Invariant(format!(
                        "probe {name} at step {} references missing trace {}",
                        c.step,
                        f.trace.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, step: u64) -> Result<&CheckpointEntry> {
        self.checkpoints
            .iter()
            .find(|c| c.step == step)
            .ok_or_else(|| CsnnError::Data(format!("no checkpoint at step {step}")))
    }

    pub fn probe_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.checkpoints.iter().flat_map(|c| c.probes.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Mean change norm per checkpoint over the records with steps in
/// `[previous checkpoint, checkpoint)`. Record `s` is the update from state
/// `s` to `s + 1`, so the first checkpoint has no window.
pub fn window_changes(records: &[StepRecord], steps: &[u64]) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(steps.len());
    let mut prev = 0u64;
    for (i, &s) in steps.iter().enumerate() {
        let lo = if i == 0 { s } else { prev };
        let window: Vec<f64> = records
            .iter()
            .filter(|r| r.step >= lo && r.step < s)
            .map(|r| r.change_norm)
            .collect();
        out.push((!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64));
        prev = s;
    }
    out
}

pub fn records_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,layer,utilization,change_norm,degenerate\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.layer, r.utilization, r.change_norm, r.degenerate
        ));
    }
    out
}

pub fn parse_records_csv(text: &str, origin: &Path) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CsnnError::format(origin, format!("line {}: expected 5 numeric fields", ln + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(StepRecord {
            step: f[0].parse().map_err(|_| bad())?,
            layer: f[1].parse().map_err(|_| bad())?,
            utilization: f[2].parse().map_err(|_| bad())?,
            change_norm: f[3].parse().map_err(|_| bad())?,
            degenerate: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
