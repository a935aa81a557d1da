//! Mismatch metrics between a pretext (representation learning) curve and a
//! target (probe) curve measured at the same training steps.
//!
//! Conventions: a positive M3 means the target is worse than the pretext at
//! that step. Curves with `HigherBetter` orientation are negated internally,
//! so every soft quantity is "distance above the best value seen so far".

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CsnnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    LowerBetter,
    HigherBetter,
}

impl Orientation {
    fn sign(self) -> f64 {
        match self {
            Orientation::LowerBetter => 1.0,
            Orientation::HigherBetter => -1.0,
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = CsnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower" | "lower_better" | "lower-better" => Ok(Orientation::LowerBetter),
            "higher" | "higher_better" | "higher-better" => Ok(Orientation::HigherBetter),
            _ => Err(CsnnError::Config(format!("unknown orientation {s:?} (use lower or higher)"))),
        }
    }
}

/// A metric measured at strictly increasing training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
    pub orientation: Orientation,
}

impl MetricCurve {
    pub fn new(steps: Vec<u64>, values: Vec<f64>, orientation: Orientation) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(CsnnError::Metric(format!(
                "{} steps but {} values",
                steps.len(),
                values.len()
            )));
        }
        if steps.is_empty() {
            return Err(CsnnError::Metric("empty curve".into()));
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CsnnError::Metric("steps must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(CsnnError::Metric(format!("non-finite curve value {v}")));
        }
        Ok(MetricCurve {
            steps,
            values,
            orientation,
        })
    }

    /// Curve measured at steps `0, 1, …`.
    pub fn from_values(values: Vec<f64>, orientation: Orientation) -> Result<Self> {
        let steps = (0..values.len() as u64).collect();
        Self::new(steps, values, orientation)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values in lower-is-better form.
    fn oriented(&self) -> Vec<f64> {
        let s = self.orientation.sign();
        self.values.iter().map(|v| s * v).collect()
    }

    /// The prefix of the curve up to and including `step`.
    pub fn truncate_at(&self, step: u64) -> MetricCurve {
        let keep = self.steps.iter().take_while(|&&s| s <= step).count().max(1);
        MetricCurve {
            steps: self.steps[..keep].to_vec(),
            values: self.values[..keep].to_vec(),
            orientation: self.orientation,
        }
    }
}

/// A metric value that may be infinite. Infinity is an explicit variant,
/// never a float sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }

    fn max(self, other: Extended) -> Extended {
        match (self, other) {
            (Extended::Finite(a), Extended::Finite(b)) => Extended::Finite(a.max(b)),
            _ => Extended::Infinite,
        }
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => fmt::Display::fmt(v, f),
            Extended::Infinite => f.pad("inf"),
        }
    }
}

/// Hard mismatch of one step: positive when the target is worse.
pub fn m3(m_t: f64, m_p: f64, orientation: Orientation) -> f64 {
    orientation.sign() * (m_t - m_p)
}

fn check_aligned(target: &MetricCurve, pretext: &MetricCurve) -> Result<()> {
    if target.steps != pretext.steps {
        return Err(CsnnError::Metric("curves are not measured at the same steps".into()));
    }
    if target.orientation != pretext.orientation {
        return Err(CsnnError::Metric("curves have different orientations".into()));
    }
    Ok(())
}

pub fn m3_series(target: &MetricCurve, pretext: &MetricCurve) -> Result<Vec<f64>> {
    check_aligned(target, pretext)?;
    Ok(target
        .values
        .iter()
        .zip(&pretext.values)
        .map(|(&t, &p)| m3(t, p, target.orientation))
        .collect())
}

/// Mean hard mismatch.
pub fn mm3(target: &MetricCurve, pretext: &MetricCurve) -> Result<f64> {
    let s = m3_series(target, pretext)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Soft mismatch of every step: distance above the running best.
pub fn sm3_series(target: &MetricCurve) -> Vec<f64> {
    let v = target.oriented();
    let mut best = f64::INFINITY;
    v.iter()
        .map(|&x| {
            best = best.min(x);
            x - best
        })
        .collect()
}

/// Soft mismatch at 1-based step index `i`.
pub fn sm3(target: &MetricCurve, i: usize) -> Result<f64> {
    if i == 0 || i > target.len() {
        return Err(CsnnError::Metric(format!("index {i} outside 1..={}", target.len())));
    }
    Ok(sm3_series(target)[i - 1])
}

/// Mean soft mismatch.
pub fn msm3(target: &MetricCurve) -> f64 {
    let s = sm3_series(target);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Soft mismatch of the final step.
pub fn csm3(target: &MetricCurve) -> f64 {
    *sm3_series(target).last().expect("curves are non-empty")
}

/// Largest soft mismatch.
pub fn msm3_max(target: &MetricCurve) -> f64 {
    sm3_series(target).into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scaling {
    /// `N(x) = scale · x` with `scale = 100 / (m₁ − m_b)`.
    Scaled { scale: f64 },
    /// Every value equals `m₁`.
    AllEqual,
    /// `m₁` is the best value but some later value is worse.
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationContext {
    /// Value at step 0 (oriented).
    pub m1: f64,
    /// Index of the best (minimal oriented) value, first on ties.
    pub b: usize,
    pub mb: f64,
    pub scaling: Scaling,
}

/// Normalizes the oriented target curve to the percentage range of the
/// improvement over the untrained model. Requires a measurement at step 0.
pub fn normalize(target: &MetricCurve) -> Result<(NormalizationContext, Vec<Extended>)> {
    if target.steps[0] != 0 {
        return Err(CsnnError::Metric("normalization needs a measurement at step 0".into()));
    }
    let v = target.oriented();
    let m1 = v[0];
    let mut b = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[b] {
            b = i;
        }
    }
    let mb = v[b];
    let (scaling, normalized) = if m1 > mb {
        let scale = 100.0 / (m1 - mb);
        (Scaling::Scaled { scale }, v.iter().map(|&x| Extended::Finite(scale * x)).collect())
    } else if v.iter().all(|&x| x == m1) {
        (Scaling::AllEqual, vec![Extended::Finite(0.0); v.len()])
    } else {
        let n = v
            .iter()
            .map(|&x| if x > m1 { Extended::Infinite } else { Extended::Finite(0.0) })
            .collect();
        (Scaling::Infinite, n)
    };
    Ok((NormalizationContext { m1, b, mb, scaling }, normalized))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfmSummary {
    pub context: NormalizationContext,
    pub series: Vec<Extended>,
    /// Final value.
    pub c_ofm: Extended,
    /// Maximum value.
    pub m_ofm: Extended,
    /// Mean value.
    #[serde(rename = "mean_ofm")]
    pub mean_ofm: Extended,
}

/// Objective function mismatch: the soft mismatch of the normalized target curve.
pub fn ofm_series(target: &MetricCurve) -> Result<OfmSummary> {
    let (context, normalized) = normalize(target)?;
    let series: Vec<Extended> = match context.scaling {
        Scaling::Scaled { scale } => sm3_series(target).into_iter().map(|s| Extended::Finite(scale * s)).collect(),
        Scaling::AllEqual | Scaling::Infinite => normalized,
    };
    let c_ofm = *series.last().expect("curves are non-empty");
    let m_ofm = series.iter().fold(Extended::Finite(0.0), |a, &b| a.max(b));
    let mean_ofm = if series.iter().any(|v| v.is_infinite()) {
        Extended::Infinite
    } else {
        Extended::Finite(series.iter().filter_map(|v| v.finite()).sum::<f64>() / series.len() as f64)
    };
    Ok(OfmSummary {
        context,
        series,
        c_ofm,
        m_ofm,
        mean_ofm,
    })
}

/// Piecewise-linear interpolation at `query` steps, which must lie inside
/// the measured range. Measured steps return the stored value exactly.
pub fn interpolate(curve: &MetricCurve, query: &[u64]) -> Result<MetricCurve> {
    let (lo, hi) = (curve.steps[0], *curve.steps.last().unwrap());
    let mut values = Vec::with_capacity(query.len());
    for &q in query {
        if q < lo || q > hi {
            return Err(CsnnError::Metric(format!("step {q} outside the measured range [{lo}, {hi}]")));
        }
        let j = curve.steps.partition_point(|&s| s < q);
        if curve.steps[j] == q {
            values.push(curve.values[j]);
        } else {
            let (s0, s1) = (curve.steps[j - 1] as f64, curve.steps[j] as f64);
            let (v0, v1) = (curve.values[j - 1], curve.values[j]);
            let t = (q as f64 - s0) / (s1 - s0);
            values.push(v0 + t * (v1 - v0));
        }
    }
    MetricCurve::new(query.to_vec(), values, curve.orientation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceMode {
    /// Step of the best value when early stopping triggers.
    #[default]
    Best,
    /// Step at which early stopping triggers.
    Trigger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convergence {
    pub step: u64,
    pub index: usize,
    pub converged: bool,
}

/// Early stopping over the measured points: stops once `patience`
/// consecutive measurements fail to improve on the best by more than
/// `min_delta`. Without a trigger, returns the last step, not converged.
pub fn convergence_step(curve: &MetricCurve, patience: usize, min_delta: f64, mode: ConvergenceMode) -> Convergence {
    let v = curve.oriented();
    let mut best = 0;
    let mut wait = 0;
    for i in 0..v.len() {
        if i > 0 {
            if v[i] < v[best] - min_delta {
                best = i;
                wait = 0;
            } else {
                wait += 1;
            }
        }
        if wait >= patience {
            let index = match mode {
                ConvergenceMode::Best => best,
                ConvergenceMode::Trigger => i,
            };
            return Convergence {
                step: curve.steps[index],
                index,
                converged: true,
            };
        }
    }
    let index = v.len() - 1;
    Convergence {
        step: curve.steps[index],
        index,
        converged: false,
    }
}

/// Pointwise mean of curves measured on one step grid.
pub fn fold_aggregate(curves: &[MetricCurve]) -> Result<MetricCurve> {
    let first = curves.first().ok_or_else(|| CsnnError::Metric("no curves to aggregate".into()))?;
    for c in curves {
        if c.steps != first.steps {
            return Err(CsnnError::Metric("fold curves use different step grids".into()));
        }
        if c.orientation != first.orientation {
            return Err(CsnnError::Metric("fold curves have different orientations".into()));
        }
    }
    let h = curves.len() as f64;
    let values = (0..first.len())
        .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / h)
        .collect();
    MetricCurve::new(first.steps.clone(), values, first.orientation)
}

/// Both curves on the union of their steps within the common range.
pub fn align(pretext: &MetricCurve, target: &MetricCurve) -> Result<(MetricCurve, MetricCurve)> {
    let lo = pretext.steps[0].max(target.steps[0]);
    let hi = pretext.steps.last().unwrap().min(target.steps.last().unwrap());
    if lo > *hi {
        return Err(CsnnError::Metric("curves do not overlap".into()));
    }
    let mut grid: Vec<u64> = pretext
        .steps
        .iter()
        .chain(&target.steps)
        .copied()
        .filter(|s| (lo..=*hi).contains(s))
        .collect();
    grid.sort_unstable();
    grid.dedup();
    Ok((interpolate(pretext, &grid)?, interpolate(target, &grid)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub patience: usize,
    pub min_delta: f64,
    pub convergence_mode: ConvergenceMode,
    /// Evaluate only the steps up to the pretext convergence step.
    pub truncate_at_convergence: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            patience: 3,
            min_delta: 0.0,
            convergence_mode: ConvergenceMode::Best,
            truncate_at_convergence: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub steps: Vec<u64>,
    pub pretext: Vec<f64>,
    pub target: Vec<f64>,
    pub m3: Vec<f64>,
    pub sm3: Vec<f64>,
    pub mm3: f64,
    pub msm3: f64,
    pub c_sm3: f64,
    pub m_sm3: f64,
    pub ofm: OfmSummary,
    pub convergence: Convergence,
    pub orientation: Orientation,
    pub folds: usize,
    /// Steps that were interpolated rather than measured on both curves.
    pub interpolated_steps: Vec<u64>,
}

/// Full report for one pretext/target pair. Fold sets should be averaged
/// with [`fold_aggregate`] first; `folds` is recorded as metadata.
pub fn mismatch_report(pretext: &MetricCurve, target: &MetricCurve, folds: usize, opts: &ReportOptions) -> Result<MismatchReport> {
    if pretext.orientation != target.orientation {
        return Err(CsnnError::Metric("curves have different orientations".into()));
    }
    let (p, t) = align(pretext, target)?;
    let interpolated_steps = p
        .steps
        .iter()
        .copied()
        .filter(|s| pretext.steps.binary_search(s).is_err() || target.steps.binary_search(s).is_err())
        .collect();
    let convergence = convergence_step(&p, opts.patience, opts.min_delta, opts.convergence_mode);
    let (p, t) = if opts.truncate_at_convergence {
        (p.truncate_at(convergence.step), t.truncate_at(convergence.step))
    } else {
        (p, t)
    };
    let sm3 = sm3_series(&t);
    Ok(MismatchReport {
        m3: m3_series(&t, &p)?,
        mm3: mm3(&t, &p)?,
        msm3: sm3.iter().sum::<f64>() / sm3.len() as f64,
        c_sm3: *sm3.last().unwrap(),
        m_sm3: sm3.iter().copied().fold(0.0, f64::max),
        sm3,
        ofm: ofm_series(&t)?,
        convergence,
        orientation: t.orientation,
        folds,
        interpolated_steps,
        steps: t.steps,
        pretext: p.values,
        target: t.values,
    })
}

impl MismatchReport {
    /// Tab-separated plot data, one row per step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tpretext\ttarget\tm3\tsm3\tofm\n");
        for i in 0..self.steps.len() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                self.steps[i], self.pretext[i], self.target[i], self.m3[i], self.sm3[i], self.ofm.series[i]
            ));
        }
        out
    }
}

/// Sidecar metadata of an ingested curve.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveManifest {
    #[serde(default)]
    pub orientation: Option<Orientation>,
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub fold: Option<usize>,
}

#[derive(Deserialize)]
struct Point {
    step: u64,
    value: f64,
}

/// Sidecar path: `curve.csv` → `curve.csv.manifest.json`.
pub fn manifest_path(curve: &Path) -> PathBuf {
    let mut name = curve.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Reads a `step,value` CSV (header optional) or a JSONL file of
/// `{"step":…,"value":…}` objects. Orientation comes from `orientation`,
/// else the sidecar manifest, else lower-is-better.
pub fn load_curve(path: &Path, orientation: Option<Orientation>) -> Result<(MetricCurve, CurveManifest)> {
    let text = std::fs::read_to_string(path).map_err(|e| CsnnError::io(path, e))?;
    let bad = |reason: String| CsnnError::format(path, reason);
    let mut points = Vec::new();
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl" || e == "json");
    if is_jsonl {
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let p: Point = serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", ln + 1)))?;
            points.push((p.step, p.value));
        }
    } else {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for (ln, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 2 {
                return Err(bad(format!("row {}: expected step,value", ln + 1)));
            }
            match (rec[0].parse::<u64>(), rec[1].parse::<f64>()) {
                (Ok(s), Ok(v)) => points.push((s, v)),
                _ if ln == 0 => continue,
                _ => return Err(bad(format!("row {}: cannot parse {:?}", ln + 1, rec))),
            }
        }
    }
    let mpath = manifest_path(path);
    let manifest: CurveManifest = if mpath.exists() {
        let m = std::fs::read_to_string(&mpath).map_err(|e| CsnnError::io(&mpath, e))?;
        serde_json::from_str(&m).map_err(|e| CsnnError::format(&mpath, e.to_string()))?
    } else {
        CurveManifest::default()
    };
    let orientation = orientation.or(manifest.orientation).unwrap_or_default();
    let (steps, values) = points.into_iter().unzip();
    let curve = MetricCurve::new(steps, values, orientation).map_err(|e| bad(e.to_string()))?;
    Ok((curve, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lower(v: &[f64]) -> MetricCurve {
        MetricCurve::from_values(v.to_vec(), Orientation::LowerBetter).unwrap()
    }

    #[test]
    fn m3_examples() {
        assert_eq!(m3(30.0, 20.0, Orientation::LowerBetter), 10.0);
        assert_eq!(m3(7.0, 7.0, Orientation::LowerBetter), 0.0);
        assert_eq!(m3(80.0, 50.0, Orientation::HigherBetter), -30.0);
    }

    #[test]
    fn mm3_examples() {
        assert_eq!(mm3(&lower(&[3.0, 2.0]), &lower(&[1.0, 1.0])).unwrap(), 1.5);
        assert_eq!(mm3(&lower(&[3.0, 2.0]), &lower(&[3.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mm3(&lower(&[3.0, 1.0]), &lower(&[1.0, 3.0])).unwrap(), 0.0);
        let shifted = MetricCurve::new(vec![0, 2], vec![1.0, 1.0], Orientation::LowerBetter).unwrap();
        assert!(mm3(&lower(&[3.0, 2.0]), &shifted).is_err());
    }

    #[test]
    fn sm3_examples() {
        let c = lower(&[5.0, 3.0, 4.0]);
        assert_eq!(sm3_series(&c), vec![0.0, 0.0, 1.0]);
        assert!((msm3(&c) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(csm3(&c), 1.0);
        assert_eq!(msm3_max(&c), 1.0);
        assert_eq!(sm3(&c, 3).unwrap(), 1.0);
        assert!(sm3(&c, 0).is_err());
        let mono = lower(&[9.0, 7.0, 4.0, 1.0]);
        assert_eq!((msm3(&mono), csm3(&mono), msm3_max(&mono)), (0.0, 0.0, 0.0));
        let single = lower(&[2.0]);
        assert_eq!((msm3(&single), csm3(&single), msm3_max(&single)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn higher_better_uses_running_max() {
        let acc = MetricCurve::from_values(vec![50.0, 70.0, 60.0], Orientation::HigherBetter).unwrap();
        assert_eq!(sm3_series(&acc), vec![0.0, 0.0, 10.0]);
    }

    #[test]
    fn normalization_examples() {
        let (ctx, n) = normalize(&lower(&[10.0, 6.0, 5.0, 7.0])).unwrap();
        assert_eq!(ctx.scaling, Scaling::Scaled { scale: 20.0 });
        assert_eq!((ctx.m1, ctx.b, ctx.mb), (10.0, 2, 5.0));
        let vals: Vec<f64> = n.iter().map(|v| v.finite().unwrap()).collect();
        assert_eq!(vals, vec![200.0, 120.0, 100.0, 140.0]);

        let (ctx, n) = normalize(&lower(&[4.0, 4.0, 4.0])).unwrap();
        assert_eq!(ctx.scaling, Scaling::AllEqual);
        assert!(n.iter().all(|v| *v == Extended::Finite(0.0)));

        let (ctx, _) = normalize(&lower(&[5.0, 5.0, 6.0])).unwrap();
        assert_eq!(ctx.scaling, Scaling::Infinite);

        let late = MetricCurve::new(vec![1, 2], vec![1.0, 2.0], Orientation::LowerBetter).unwrap();
        assert!(normalize(&late).is_err());
    }

    #[test]
    fn ofm_examples() {
        let o = ofm_series(&lower(&[10.0, 6.0, 5.0, 7.0])).unwrap();
        let s: Vec<f64> = o.series.iter().map(|v| v.finite().unwrap()).collect();
        assert_eq!(s, vec![0.0, 0.0, 0.0, 40.0]);
        assert_eq!(o.c_ofm, Extended::Finite(40.0));
        assert_eq!(o.m_ofm, Extended::Finite(40.0));
        assert_eq!(o.mean_ofm, Extended::Finite(10.0));

        let inf = ofm_series(&lower(&[5.0, 5.0, 6.0])).unwrap();
        assert_eq!(inf.mean_ofm, Extended::Infinite);
        assert_eq!(inf.m_ofm, Extended::Infinite);

        let mono = ofm_series(&lower(&[8.0, 3.0, 1.0])).unwrap();
        assert!(mono.series.iter().all(|v| *v == Extended::Finite(0.0)));
    }

    #[test]
    fn ofm_above_100_iff_worse_than_untrained() {
        let c = lower(&[10.0, 4.0, 12.0, 9.0, 10.0]);
        let o = ofm_series(&c).unwrap();
        for (i, v) in o.series.iter().enumerate() {
            assert_eq!(v.finite().unwrap() > 100.0, c.values[i] > c.values[0], "index {i}");
        }
    }

    #[test]
    fn infinity_serializes_as_flag() {
        let j = serde_json::to_string(&Extended::Infinite).unwrap();
        assert_eq!(j, r#"{"kind":"infinite"}"#);
        let back: Extended = serde_json::from_str(&serde_json::to_string(&Extended::Finite(2.5)).unwrap()).unwrap();
        assert_eq!(back, Extended::Finite(2.5));
    }

    #[test]
    fn interpolation_examples() {
        let c = MetricCurve::new(vec![0, 10], vec![0.0, 100.0], Orientation::LowerBetter).unwrap();
        assert_eq!(interpolate(&c, &[5]).unwrap().values, vec![50.0]);
        assert_eq!(interpolate(&c, &[10]).unwrap().values, vec![100.0]);
        assert!(interpolate(&c, &[11]).is_err());
    }

    #[test]
    fn convergence_examples() {
        let c = lower(&[5.0, 4.0, 4.0, 4.0, 4.0]);
        let best = convergence_step(&c, 3, 0.0, ConvergenceMode::Best);
        assert_eq!(best, Convergence { step: 1, index: 1, converged: true });
        let trig = convergence_step(&c, 3, 0.0, ConvergenceMode::Trigger);
        assert_eq!(trig.index, 4);
        let up = lower(&[5.0, 4.0, 3.0]);
        assert_eq!(convergence_step(&up, 3, 0.0, ConvergenceMode::Best), Convergence { step: 2, index: 2, converged: false });
        let p0 = convergence_step(&lower(&[3.0, 2.0, 1.0]), 0, 0.0, ConvergenceMode::Best);
        assert_eq!((p0.step, p0.converged), (0, true));
        let acc = MetricCurve::from_values(vec![10.0, 20.0, 20.0, 19.0, 18.0], Orientation::HigherBetter).unwrap();
        assert_eq!(convergence_step(&acc, 3, 0.0, ConvergenceMode::Best).index, 1);
    }

    #[test]
    fn fold_aggregate_examples() {
        let a = lower(&[1.0, 2.0, 3.0]);
        assert_eq!(fold_aggregate(&[a.clone(), a.clone()]).unwrap(), a);
        let b = lower(&[3.0, 4.0, 5.0]);
        assert_eq!(fold_aggregate(&[a, b]).unwrap().values, vec![2.0, 3.0, 4.0]);
        let misaligned = MetricCurve::new(vec![0, 1, 3], vec![0.0; 3], Orientation::LowerBetter).unwrap();
        assert!(fold_aggregate(&[lower(&[0.0; 3]), misaligned]).is_err());
    }

    #[test]
    fn shuffling_a_curve_changes_msm3() {
        assert_ne!(msm3(&lower(&[5.0, 1.0, 3.0, 4.0])), msm3(&lower(&[1.0, 5.0, 4.0, 3.0])));
    }

    #[test]
    fn report_on_union_grid() {
        let p = MetricCurve::new(vec![0, 2, 4, 6, 8, 10], vec![9.0, 7.0, 6.0, 6.0, 6.0, 6.0], Orientation::LowerBetter).unwrap();
        let t = MetricCurve::new(vec![0, 5, 10], vec![10.0, 5.0, 7.0], Orientation::LowerBetter).unwrap();
        let r = mismatch_report(&p, &t, 1, &ReportOptions::default()).unwrap();
        // Union grid 0,2,4,5,6,8,10; pretext stops improving at 4 (index 2),
        // triggering after three stale points (5, 6, 8).
        assert_eq!(r.convergence.step, 4);
        assert_eq!(r.steps, vec![0, 2, 4]);
        assert_eq!(r.target, vec![10.0, 8.0, 6.0]);
        assert_eq!(r.interpolated_steps, vec![2, 4, 5, 6, 8]);
        let full = mismatch_report(&p, &t, 1, &ReportOptions { truncate_at_convergence: false, ..Default::default() }).unwrap();
        assert_eq!(full.steps.len(), 7);
        assert!(full.to_tsv().lines().count() == 8);
    }

    #[test]
    fn curve_ingestion_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("a.csv");
        std::fs::write(&csv_path, "step,value\n0,0.5\n5,0.7\n").unwrap();
        std::fs::write(manifest_path(&csv_path), r#"{"orientation":"higher_better","metric":"accuracy","fold":2}"#).unwrap();
        let (c, m) = load_curve(&csv_path, None).unwrap();
        assert_eq!(c.steps, vec![0, 5]);
        assert_eq!(c.orientation, Orientation::HigherBetter);
        assert_eq!(m.fold, Some(2));
        let (c, _) = load_curve(&csv_path, Some(Orientation::LowerBetter)).unwrap();
        assert_eq!(c.orientation, Orientation::LowerBetter);

        let jl = dir.path().join("b.jsonl");
        std::fs::write(&jl, "{\"step\":0,\"value\":1.0}\n{\"step\":3,\"value\":2.0}\n").unwrap();
        assert_eq!(load_curve(&jl, None).unwrap().0.values, vec![1.0, 2.0]);
        std::fs::write(&jl, "{\"step\":3,\"value\":1.0}\n{\"step\":0,\"value\":2.0}\n").unwrap();
        assert!(load_curve(&jl, None).is_err());
    }

    fn fold_set() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..=50, 1usize..=10).prop_flat_map(|(n, h)| {
            let curve = || prop::collection::vec(-100.0f64..100.0, n);
            (prop::collection::vec(curve(), h), prop::collection::vec(curve(), h))
        })
    }

    proptest! {
        #[test]
        fn mm3_of_mean_curves_is_mean_mm3((targets, pretexts) in fold_set()) {
            let t: Vec<MetricCurve> = targets.iter().map(|v| lower(v)).collect();
            let p: Vec<MetricCurve> = pretexts.iter().map(|v| lower(v)).collect();
            let of_mean = mm3(&fold_aggregate(&t).unwrap(), &fold_aggregate(&p).unwrap()).unwrap();
            let mean_of = t.iter().zip(&p).map(|(a, b)| mm3(a, b).unwrap()).sum::<f64>() / t.len() as f64;
            prop_assert!((of_mean - mean_of).abs() <= 1e-9);
        }

        #[test]
        fn msm3_of_mean_curve_is_a_lower_bound((targets, _) in fold_set()) {
            let t: Vec<MetricCurve> = targets.iter().map(|v| lower(v)).collect();
            let of_mean = msm3(&fold_aggregate(&t).unwrap());
            let mean_of = t.iter().map(msm3).sum::<f64>() / t.len() as f64;
            prop_assert!(of_mean <= mean_of + 1e-9);
        }

        #[test]
        fn soft_aggregates_are_ordered(v in prop::collection::vec(-1e3f64..1e3, 1..60)) {
            let c = lower(&v);
            prop_assert!(msm3_max(&c) >= csm3(&c));
            prop_assert!(csm3(&c) >= 0.0);
            let o = ofm_series(&c).unwrap();
            if let (Some(m), Some(last)) = (o.m_ofm.finite(), o.c_ofm.finite()) {
                prop_assert!(m >= last && last >= 0.0);
            }
        }

        #[test]
        fn ofm_is_scaled_sm3(v in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            let c = lower(&v);
            let o = ofm_series(&c).unwrap();
            if let Scaling::Scaled { .. } = o.context.scaling {
                let denom = o.context.m1 - o.context.mb;
                for (x, s) in o.series.iter().zip(sm3_series(&c)) {
                    let want = 100.0 * s / denom;
                    prop_assert!((x.finite().unwrap() - want).abs() <= 1e-9 * want.abs().max(1.0));
                }
            }
        }

        #[test]
        fn dense_interpolation_round_trips(v in prop::collection::vec(-50.0f64..50.0, 2..20), gap in 1u64..7) {
            let steps: Vec<u64> = (0..v.len() as u64).map(|i| i * gap).collect();
            let c = MetricCurve::new(steps.clone(), v.clone(), Orientation::LowerBetter).unwrap();
            let dense: Vec<u64> = (0..=*steps.last().unwrap()).collect();
            let back = interpolate(&interpolate(&c, &dense).unwrap(), &steps).unwrap();
            for (a, b) in back.values.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
