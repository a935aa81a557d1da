//! `csnn metrics`: mismatch reports from a run or from curve files.

use std::path::{Path, PathBuf};

use csnn_core::metrics::{
    fold_aggregate, load_curve, manifest_path, mismatch_report, CurveManifest, Extended, MetricCurve, MismatchReport,
    Orientation, ReportOptions,
};
use csnn_core::{CsnnError, Result};

use crate::trace::RunTrace;

/// Pretext curve and per-fold target curves of one probe of a run.
///
/// The target is the best eval loss of each probe (lower orientation) or its
/// pocket accuracy (higher). The pretext side is the SOM weight-change norm,
/// negated for the higher orientation so that both improve in the same
/// direction. Checkpoint 0 takes the first measured change, and checkpoints
/// without training in their window repeat the previous value.
pub fn run_curves(trace: &RunTrace, probe: &str) -> Result<(MetricCurve, Vec<MetricCurve>)> {
    let points: Vec<_> = trace.checkpoints.iter().filter(|c| c.probes.contains_key(probe)).collect();
    if points.is_empty() {
        return Err(CsnnError::Data(format!("no checkpoint has results for probe {probe:?}")));
    }
    let orientation = trace.orientation;
    let steps: Vec<u64> = points.iter().map(|c| c.step).collect();
    let first = points
        .iter()
        .find_map(|c| c.weight_change)
        .ok_or_else(|| CsnnError::Metric("the run has no pretext updates between its checkpoints".into()))?;
    let mut last = first;
    let sign = match orientation {
        Orientation::LowerBetter => 1.0,
        Orientation::HigherBetter => -1.0,
    };
    let pretext: Vec<f64> = points
        .iter()
        .map(|c| {
            last = c.weight_change.unwrap_or(last);
            sign * last
        })
        .collect();
    let folds = points[0].probes[probe].folds.len();
    if points.iter().any(|c| c.probes[probe].folds.len() != folds) {
        return Err(CsnnError::Data(format!("probe {probe:?} has differing fold counts across checkpoints")));
    }
    let targets = (0..folds)
        .map(|f| {
            let values = points
                .iter()
                .map(|c| {
                    let s = &c.probes[probe].folds[f].summary;
                    match orientation {
                        Orientation::LowerBetter => s.best_eval_loss,
                        Orientation::HigherBetter => s.pocket_accuracy,
                    }
                })
                .collect();
            MetricCurve::new(steps.clone(), values, orientation)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricCurve::new(steps, pretext, orientation)?, targets))
}

fn curve_csv(c: &MetricCurve) -> String {
    let mut out = String::from("step,value\n");
    for (s, v) in c.steps.iter().zip(&c.values) {
        out.push_str(&format!("{s},{v}\n"));
    }
    out
}

/// Writes `curve` as `step,value` CSV with its sidecar manifest.
pub fn write_curve(path: &Path, curve: &MetricCurve, metric: &str, fold: Option<usize>) -> Result<()> {
    csnn_core::io::write_atomic_str(path, &curve_csv(curve))?;
    let manifest = CurveManifest {
        orientation: Some(curve.orientation),
        metric: Some(metric.to_string()),
        fold,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    csnn_core::io::write_atomic_str(&manifest_path(path), &json)
}

/// Exports a run's curves; returns the pretext path and the target paths.
pub fn export_run_curves(trace: &RunTrace, probe: &str, dir: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    let (pretext, targets) = run_curves(trace, probe)?;
    let target_metric = match trace.orientation {
        Orientation::LowerBetter => "best_eval_loss",
        Orientation::HigherBetter => "pocket_accuracy",
    };
    let p = dir.join("pretext.csv");
    write_curve(&p, &pretext, "weight_change", None)?;
    let mut paths = Vec::with_capacity(targets.len());
    for (f, t) in targets.iter().enumerate() {
        let path = dir.join(format!("target-fold-{f}.csv"));
        write_curve(&path, t, target_metric, Some(f))?;
        paths.push(path);
    }
    Ok((p, paths))
}

/// Loads external curves: one pretext curve and one target curve per fold.
pub fn load_curves(pretext: &Path, targets: &[PathBuf], orientation: Option<Orientation>) -> Result<(MetricCurve, Vec<MetricCurve>)> {
    if targets.is_empty() {
        return Err(CsnnError::Config("curves: need a pretext curve and at least one target curve".into()));
    }
    let (p, _) = load_curve(pretext, orientation)?;
    let t = targets
        .iter()
        .map(|path| load_curve(path, orientation).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    Ok((p, t))
}

fn at_least(a: Extended, b: Extended) -> bool {
    match (a, b) {
        (Extended::Infinite, _) => true,
        (Extended::Finite(_), Extended::Infinite) => false,
        (Extended::Finite(x), Extended::Finite(y)) => x >= y,
    }
}

/// Report over the fold mean of `targets`, with its structural invariants checked.
pub fn build_report(pretext: &MetricCurve, targets: &[MetricCurve], opts: &ReportOptions) -> Result<MismatchReport> {
    let target = fold_aggregate(targets)?;
    let report = mismatch_report(pretext, &target, targets.len(), opts)?;
    if !at_least(report.ofm.m_ofm, report.ofm.c_ofm) {
        return Err(CsnnError::Invariant(format!(
            "mOFM {} is below cOFM {}",
            report.ofm.m_ofm, report.ofm.c_ofm
        )));
    }
    if !(report.m_sm3 >= report.c_sm3 && report.c_sm3 >= 0.0) {
        return Err(CsnnError::Invariant(format!(
            "soft mismatches out of order: mSM3 {} cSM3 {}",
            report.m_sm3, report.c_sm3
        )));
    }
    Ok(report)
}

pub fn write_report(report: &MismatchReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    csnn_core::io::write_atomic_str(&dir.join("report.json"), &(json + "\n"))?;
    csnn_core::io::write_atomic_str(&dir.join("report.tsv"), &report.to_tsv())
}

pub fn read_report(dir: &Path) -> Result<MismatchReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CsnnError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CsnnError::format(&path, e.to_string()))
}
