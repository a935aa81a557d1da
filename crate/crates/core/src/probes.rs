//! Supervised probes on frozen representations: dense layers with optional
//! batch normalization, ELU/ReLU and inverted dropout, trained with Adam on
//! mean cross-entropy. All probe arithmetic is `f64`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CsnnError, Result};
use crate::linalg::{dgemm, Operand};
use crate::rng::{Component, SeedSplitter};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Fc,
    #[serde(rename = "2fc")]
    TwoFc,
    #[serde(rename = "3fc")]
    ThreeFc,
}

impl Architecture {
    pub fn hidden_layers(self) -> usize {
        match self {
            Architecture::Fc => 0,
            Architecture::TwoFc => 1,
            Architecture::ThreeFc => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu if z > 0.0 => z,
            Activation::Elu => z.exp_m1(),
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Elu if z > 0.0 => 1.0,
            Activation::Elu => z.exp(),
            Activation::Relu => (z > 0.0) as u8 as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: Vec<f64>,
    pub batch_norm: bool,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

impl ProbeSpec {
    /// Linear probe.
    pub fn fc() -> Self {
        ProbeSpec {
            architecture: Architecture::Fc,
            hidden: vec![],
            activation: Activation::Elu,
            dropout: vec![],
            batch_norm: false,
            optimizer: AdamConfig::default(),
            batch_size: 512,
            epochs: 100,
        }
    }

    pub fn two_fc() -> Self {
        ProbeSpec {
            architecture: Architecture::TwoFc,
            hidden: vec![256],
            dropout: vec![0.5],
            batch_norm: true,
            ..Self::fc()
        }
    }

    pub fn three_fc() -> Self {
        ProbeSpec {
            architecture: Architecture::ThreeFc,
            hidden: vec![512, 256],
            dropout: vec![0.5, 0.3],
            batch_norm: true,
            ..Self::fc()
        }
    }

    /// MLP variant with ReLU hidden layers and no dropout or batch norm.
    pub fn three_fc_relu() -> Self {
        ProbeSpec {
            activation: Activation::Relu,
            dropout: vec![0.0, 0.0],
            batch_norm: false,
            ..Self::three_fc()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "fc" => Self::fc(),
            "2fc" => Self::two_fc(),
            "3fc" => Self::three_fc(),
            "3fc-relu" => Self::three_fc_relu(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CsnnError::Config(m));
        if self.hidden.len() != self.architecture.hidden_layers() {
            return err(format!(
                "{:?} needs {} hidden widths, got {}",
                self.architecture,
                self.architecture.hidden_layers(),
                self.hidden.len()
            ));
        }
        if self.hidden.contains(&0) {
            return err("hidden widths must be ≥ 1".into());
        }
        if self.dropout.len() != self.hidden.len() {
            return err("one dropout rate per hidden layer".into());
        }
        if let Some(r) = self.dropout.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return err(format!("dropout rate {r} outside [0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be ≥ 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return err(format!("invalid Adam hyper-parameters {o:?}"));
        }
        Ok(())
    }
}

/// Probe batch normalization: trainable scale and shift, running statistics
/// for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeBatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ProbeBatchNorm {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPS: f64 = 1e-3;
}

/// Dense layer `y = x·W (+ b)`; `w` is `inputs×outputs` row-major. Layers
/// followed by batch norm carry no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Option<Vec<f64>>,
    pub bn: Option<ProbeBatchNorm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub layers: Vec<DenseLayer>,
}

impl ProbeParams {
    /// Glorot-uniform weights, zero biases, unit scale.
    pub fn init<R: Rng>(spec: &ProbeSpec, inputs: usize, classes: usize, rng: &mut R) -> Self {
        let mut widths = vec![inputs];
        widths.extend(&spec.hidden);
        widths.push(classes);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fi, fo) = (widths[l], widths[l + 1]);
                let limit = (6.0 / (fi + fo) as f64).sqrt();
                let w = (0..fi * fo).map(|_| rng.random_range(-limit..=limit)).collect();
                let hidden = l + 1 < n;
                let bn = (hidden && spec.batch_norm).then(|| ProbeBatchNorm {
                    gamma: vec![1.0; fo],
                    beta: vec![0.0; fo],
                    running_mean: vec![0.0; fo],
                    running_var: vec![1.0; fo],
                });
                DenseLayer {
                    inputs: fi,
                    outputs: fo,
                    w,
                    b: bn.is_none().then(|| vec![0.0; fo]),
                    bn,
                }
            })
            .collect();
        ProbeParams { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Trainable tensors in a fixed order: per layer `w`, `b`, `gamma`, `beta`.
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            if let Some(b) = &mut l.b {
                out.push(b);
            }
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w);
            if let Some(b) = &l.b {
                out.push(b);
            }
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout keep masks (already divided by the keep probability),
/// one per hidden layer, each `rows×width`.
pub type DropoutMasks = Vec<Vec<f64>>;

pub fn draw_dropout<R: Rng>(spec: &ProbeSpec, rows: usize, rng: &mut R) -> DropoutMasks {
    spec.hidden
        .iter()
        .zip(&spec.dropout)
        .map(|(&width, &rate)| {
            if rate == 0.0 {
                return vec![1.0; rows * width];
            }
            let keep = 1.0 - rate;
            (0..rows * width)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
struct HiddenCache {
    pre: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

/// Intermediates of [`probe_forward`] needed by [`probe_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub rows: usize,
    pub mode: Mode,
    activation: Activation,
    input: Vec<f64>,
    hidden: Vec<HiddenCache>,
    dropout: DropoutMasks,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    /// Which hidden units are active (positive activation output), layer by layer.
    pub(crate) fn active_units(&self) -> Vec<bool> {
        self.hidden.iter().flat_map(|h| h.act.iter().map(|&v| v > 0.0)).collect()
    }
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `dense → [bn] → activation → [dropout]` for every hidden layer, then a
/// dense output layer. In train mode `dropout` must hold one mask per hidden
/// layer (see [`draw_dropout`]); eval mode ignores it.
pub fn probe_forward(
    reps: &[f32],
    rows: usize,
    spec: &ProbeSpec,
    params: &ProbeParams,
    mode: Mode,
    dropout: &DropoutMasks,
) -> Result<ForwardCache> {
    let d = params.inputs();
    if reps.len() != rows * d {
        return Err(CsnnError::dim(format!(
            "probe expects width {d}, got {} values for {rows} rows",
            reps.len()
        )));
    }
    let hidden_n = params.layers.len() - 1;
    if mode == Mode::Train && dropout.len() != hidden_n {
        return Err(CsnnError::dim("train mode needs one dropout mask per hidden layer"));
    }
    let input = to_f64(reps);
    let mut x = input.clone();
    let mut hidden = Vec::with_capacity(hidden_n);
    for (li, layer) in params.layers.iter().enumerate() {
        let o = layer.outputs;
        let mut z = dgemm(Operand::plain(&x, rows, layer.inputs), Operand::plain(&layer.w, layer.inputs, o));
        if let Some(b) = &layer.b {
            for row in z.chunks_mut(o) {
                row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
        }
        if li == hidden_n {
            return Ok(ForwardCache {
                rows,
                mode,
                activation: spec.activation,
                input,
                hidden,
                dropout: if mode == Mode::Train { dropout.clone() } else { vec![] },
                logits: z,
            });
        }
        let mut hc = HiddenCache {
            pre: z,
            xhat: vec![],
            inv_std: vec![],
            batch_mean: vec![],
            batch_var: vec![],
            act: vec![],
            out: vec![],
        };
        let mut a = hc.pre.clone();
        if let Some(bn) = &layer.bn {
            let (mean, var) = match mode {
                Mode::Train => {
                    if rows < 2 {
                        return Err(CsnnError::Data("probe batch norm needs at least two rows".into()));
                    }
                    let mut mean = vec![0.0; o];
                    for row in a.chunks(o) {
                        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    let mut var = vec![0.0; o];
                    for row in a.chunks(o) {
                        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= rows as f64);
                    (mean, var)
                }
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            hc.inv_std = var.iter().map(|v| 1.0 / (v + ProbeBatchNorm::EPS).sqrt()).collect();
            for row in a.chunks_mut(o) {
                for j in 0..o {
                    row[j] = (row[j] - mean[j]) * hc.inv_std[j];
                }
            }
            hc.xhat = a.clone();
            for row in a.chunks_mut(o) {
                for j in 0..o {
                    row[j] = bn.gamma[j] * row[j] + bn.beta[j];
                }
            }
            hc.batch_mean = mean;
            hc.batch_var = var;
        }
        hc.act = a.clone();
        a.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
        if mode == Mode::Train {
            let mask = &dropout[li];
            if mask.len() != a.len() {
                return Err(CsnnError::dim("dropout mask shape"));
            }
            a.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        hc.out = a.clone();
        hidden.push(hc);
        x = a;
    }
    unreachable!("the output layer returns")
}

/// Mean cross-entropy and per-row correctness (argmax ties: lowest class).
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        correct += (best == y) as usize;
    }
    (loss / labels.len().max(1) as f64, correct)
}

/// Gradients in the order of [`ProbeParams::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
    pub loss: f64,
    pub correct: usize,
}

/// Exact gradients of the mean cross-entropy of `cache` w.r.t. every
/// trainable tensor of `params`.
pub fn probe_backward(cache: &ForwardCache, params: &ProbeParams, labels: &[usize]) -> Result<Gradients> {
    let n = cache.rows;
    let classes = params.classes();
    if labels.len() != n {
        return Err(CsnnError::dim("one label per row"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(CsnnError::Data(format!("label {bad} outside {classes} classes")));
    }
    let (loss, correct) = cross_entropy(&cache.logits, labels, classes);
    let mut delta = vec![0.0; n * classes];
    for ((drow, row), &y) in delta.chunks_mut(classes).zip(cache.logits.chunks(classes)).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..classes {
            drow[j] = ((row[j] - max).exp() / z - (j == y) as u8 as f64) / n as f64;
        }
    }
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![vec![]; params.layers.len()];
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let o = layer.outputs;
        let x: &[f64] = if li == 0 { &cache.input } else { &cache.hidden[li - 1].out };
        // delta is dL/d(dense output) for this layer, unless bn/activation intervene.
        if li < cache.hidden.len() {
            let hc = &cache.hidden[li];
            if cache.mode == Mode::Train {
                delta.iter_mut().zip(&cache.dropout[li]).for_each(|(d, m)| *d *= m);
            }
            delta.iter_mut().zip(&hc.act).for_each(|(d, &a)| *d *= cache.activation.derivative(a));
            if let Some(bn) = &layer.bn {
                let mut dgamma = vec![0.0; o];
                let mut dbeta = vec![0.0; o];
                for (drow, xrow) in delta.chunks(o).zip(hc.xhat.chunks(o)) {
                    for j in 0..o {
                        dgamma[j] += drow[j] * xrow[j];
                        dbeta[j] += drow[j];
                    }
                }
                let mut dxhat = delta.clone();
                for row in dxhat.chunks_mut(o) {
                    row.iter_mut().zip(&bn.gamma).for_each(|(d, g)| *d *= g);
                }
                match cache.mode {
                    Mode::Train => {
                        let mut s1 = vec![0.0; o];
                        let mut s2 = vec![0.0; o];
                        for (drow, xrow) in dxhat.chunks(o).zip(hc.xhat.chunks(o)) {
                            for j in 0..o {
                                s1[j] += drow[j];
                                s2[j] += drow[j] * xrow[j];
                            }
                        }
                        for ((drow, xrow), out) in dxhat.chunks(o).zip(hc.xhat.chunks(o)).zip(delta.chunks_mut(o)) {
                            for j in 0..o {
                                out[j] = hc.inv_std[j] / n as f64 * (n as f64 * drow[j] - s1[j] - xrow[j] * s2[j]);
                            }
                        }
                    }
                    Mode::Eval => {
                        for (drow, out) in dxhat.chunks(o).zip(delta.chunks_mut(o)) {
                            for j in 0..o {
                                out[j] = drow[j] * hc.inv_std[j];
                            }
                        }
                    }
                }
                per_layer[li].push(dgamma);
                per_layer[li].push(dbeta);
            }
        }
        let dw = dgemm(Operand::transposed(x, layer.inputs, n), Operand::plain(&delta, n, o));
        let mut grads = vec![dw];
        if layer.b.is_some() {
            let mut db = vec![0.0; o];
            for row in delta.chunks(o) {
                db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            grads.push(db);
        }
        grads.append(&mut per_layer[li]);
        per_layer[li] = grads;
        if li > 0 {
            delta = dgemm(Operand::plain(&delta, n, o), Operand::transposed(&layer.w, o, layer.inputs));
        }
    }
    Ok(Gradients {
        tensors: per_layer.into_iter().flatten().collect(),
        loss,
        correct,
    })
}

/// Adam moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ProbeParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of `tensors` in place.
pub fn adam_step(tensors: &mut [&mut Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, hyper: &AdamConfig) {
    assert_eq!(tensors.len(), grads.len(), "one gradient per tensor");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
}

fn update_running_stats(params: &mut ProbeParams, cache: &ForwardCache) {
    for (layer, hc) in params.layers.iter_mut().zip(&cache.hidden) {
        if let Some(bn) = &mut layer.bn {
            let m = ProbeBatchNorm::MOMENTUM;
            for j in 0..bn.gamma.len() {
                bn.running_mean[j] = m * bn.running_mean[j] + (1.0 - m) * hc.batch_mean[j];
                bn.running_var[j] = m * bn.running_var[j] + (1.0 - m) * hc.batch_var[j];
            }
        }
    }
}

/// Loss and accuracy curves of one probe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub eval_loss: Vec<f64>,
    pub eval_accuracy: Vec<f64>,
    /// 1-based epoch with the best eval accuracy (earliest on ties).
    pub pocket_epoch: usize,
    pub pocket_accuracy: f64,
}

impl ProbeTrace {
    pub fn epochs(&self) -> usize {
        self.eval_accuracy.len()
    }

    /// `epoch,split,loss,accuracy` rows, accuracy in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for e in 0..self.epochs() {
            out.push_str(&format!("{},train,{},{}\n", e + 1, self.train_loss[e], self.train_accuracy[e]));
            out.push_str(&format!("{},eval,{},{}\n", e + 1, self.eval_loss[e], self.eval_accuracy[e]));
        }
        out
    }

    pub fn summary(&self) -> ProbeSummary {
        ProbeSummary {
            epochs: self.epochs(),
            pocket_epoch: self.pocket_epoch,
            pocket_accuracy: self.pocket_accuracy,
            final_eval_accuracy: self.eval_accuracy.last().copied().unwrap_or(f64::NAN),
            best_eval_loss: self.eval_loss.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn write(&self, csv_path: &Path, summary_path: &Path) -> Result<()> {
        crate::io::write_atomic_str(csv_path, &self.to_csv())?;
        let json = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        crate::io::write_atomic_str(summary_path, &json)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub epochs: usize,
    pub pocket_epoch: usize,
    pub pocket_accuracy: f64,
    pub final_eval_accuracy: f64,
    pub best_eval_loss: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub trace: ProbeTrace,
    pub pocket: ProbeParams,
    pub last: ProbeParams,
}

fn check_split(reps: &Tensor, labels: &[usize], classes: usize, what: &str) -> Result<usize> {
    let [n, d] = reps.shape()[..] else {
        return Err(CsnnError::dim(format!("{what} representations must be [n, d]")));
    };
    if n == 0 {
        return Err(CsnnError::Data(format!("{what} split is empty")));
    }
    if labels.len() != n {
        return Err(CsnnError::dim(format!("{what}: {n} representations, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(CsnnError::Data(format!("{what}: label {bad} outside {classes} classes")));
    }
    Ok(d)
}

/// Rows per evaluation work item.
const EVAL_CHUNK: usize = 256;

/// Mean loss and accuracy (percent) in eval mode.
pub fn evaluate(spec: &ProbeSpec, params: &ProbeParams, reps: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let d = check_split(reps, labels, params.classes(), "evaluation")?;
    let parts: Vec<(f64, usize, usize)> = reps
        .data()
        .par_chunks(EVAL_CHUNK * d)
        .zip(labels.par_chunks(EVAL_CHUNK))
        .map(|(x, y)| -> Result<(f64, usize, usize)> {
            let cache = probe_forward(x, y.len(), spec, params, Mode::Eval, &vec![])?;
            let (loss, correct) = cross_entropy(&cache.logits, y, params.classes());
            Ok((loss * y.len() as f64, correct, y.len()))
        })
        .collect::<Result<_>>()?;
    let (loss, correct, n) = parts
        .into_iter()
        .fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok((loss / n as f64, 100.0 * correct as f64 / n as f64))
}

/// Trains a probe for `spec.epochs` epochs, shuffling every epoch, and keeps
/// the parameters of the epoch with the best eval accuracy.
pub fn train_probe(
    reps_train: &Tensor,
    labels_train: &[usize],
    reps_eval: &Tensor,
    labels_eval: &[usize],
    spec: &ProbeSpec,
    classes: usize,
    seed: u64,
) -> Result<ProbeResult> {
    spec.validate()?;
    let d = check_split(reps_train, labels_train, classes, "train")?;
    let de = check_split(reps_eval, labels_eval, classes, "eval")?;
    if d != de {
        return Err(CsnnError::dim(format!("train width {d} ≠ eval width {de}")));
    }
    let seeds = SeedSplitter::new(seed);
    let mut params = ProbeParams::init(spec, d, classes, &mut seeds.rng(Component::ProbeInit, 0));
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng: ChaCha8Rng = seeds.rng(Component::ProbeShuffle, 0);
    let mut dropout_rng: ChaCha8Rng = seeds.rng(Component::Dropout, 0);
    let n = labels_train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = ProbeTrace {
        train_loss: vec![],
        train_accuracy: vec![],
        eval_loss: vec![],
        eval_accuracy: vec![],
        pocket_epoch: 0,
        pocket_accuracy: f64::NEG_INFINITY,
    };
    let mut pocket = params.clone();
    let mut xb = Vec::with_capacity(spec.batch_size * d);
    let mut yb = Vec::with_capacity(spec.batch_size);
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(spec.batch_size) {
            if spec.batch_norm && batch.len() < 2 {
                continue;
            }
            xb.clear();
            yb.clear();
            for &i in batch {
                xb.extend_from_slice(&reps_train.data()[i * d..(i + 1) * d]);
                yb.push(labels_train[i]);
            }
            let masks = draw_dropout(spec, batch.len(), &mut dropout_rng);
            let cache = probe_forward(&xb, batch.len(), spec, &params, Mode::Train, &masks)?;
            let grads = probe_backward(&cache, &params, &yb)?;
            loss_sum += grads.loss * batch.len() as f64;
            correct += grads.correct;
            seen += batch.len();
            adam_step(&mut params.trainable_mut(), &grads.tensors, &mut adam, &spec.optimizer);
            update_running_stats(&mut params, &cache);
        }
        if !loss_sum.is_finite() {
            return Err(CsnnError::Invariant(format!("probe loss diverged at epoch {epoch}")));
        }
        trace.train_loss.push(loss_sum / seen.max(1) as f64);
        trace.train_accuracy.push(100.0 * correct as f64 / seen.max(1) as f64);
        let (el, ea) = evaluate(spec, &params, reps_eval, labels_eval)?;
        trace.eval_loss.push(el);
        trace.eval_accuracy.push(ea);
        if ea > trace.pocket_accuracy {
            trace.pocket_accuracy = ea;
            trace.pocket_epoch = epoch;
            pocket = params.clone();
        }
    }
    Ok(ProbeResult { trace, pocket, last: params })
}

/// Indices of `shots` samples per class, drawn with the run seed and returned
/// in their original order.
pub fn few_shot_indices(labels: &[usize], classes: usize, shots: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![vec![]; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CsnnError::Data(format!("label {y} outside {classes} classes")));
        }
        by_class[y].push(i);
    }
    let mut rng = SeedSplitter::new(seed).rng(Component::FewShot, shots as u64);
    let mut picked = Vec::with_capacity(shots * classes);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < shots {
            return Err(CsnnError::Data(format!(
                "class {c} has {} samples, {shots} shots requested",
                members.len()
            )));
        }
        if members.len() > shots {
            members.shuffle(&mut rng);
        }
        picked.extend_from_slice(&members[..shots]);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn select_rows(reps: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let [_, d] = reps.shape()[..] else {
        return Err(CsnnError::dim("representations must be [n, d]"));
    };
    let mut data = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        data.extend_from_slice(&reps.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Trains a probe on `shots` samples per class and returns its pocket
/// accuracy on the test representations.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_eval(
    reps_train: &Tensor,
    labels_train: &[usize],
    reps_test: &Tensor,
    labels_test: &[usize],
    shots: usize,
    spec: &ProbeSpec,
    classes: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let idx = few_shot_indices(labels_train, classes, shots, seed)?;
    let sub = select_rows(reps_train, &idx)?;
    let sub_labels: Vec<usize> = idx.iter().map(|&i| labels_train[i]).collect();
    train_probe(&sub, &sub_labels, reps_test, labels_test, spec, classes, seed)
}

/// Stratified fold of every sample: each class is shuffled and dealt
/// round-robin over the folds.
pub fn stratified_folds(labels: &[usize], classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(CsnnError::Config(format!("k-fold needs k ≥ 2, got {k}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![vec![]; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CsnnError::Data(format!("label {y} outside {classes} classes")));
        }
        by_class[y].push(i);
    }
    let mut rng = SeedSplitter::new(seed).rng(Component::Folds, k as u64);
    let mut fold = vec![0usize; labels.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(CsnnError::Data(format!(
                "class {c} has {} samples, cannot appear in all {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold[i] = j % k;
        }
    }
    Ok(fold)
}

#[derive(Debug, Clone)]
pub struct KFoldResult {
    pub folds: Vec<ProbeTrace>,
    pub assignment: Vec<usize>,
    pub mean: ProbeTrace,
}

fn mean_curve(curves: &[&Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..len)
        .map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / curves.len() as f64)
        .collect()
}

/// Stratified k-fold cross-validation; folds train concurrently.
pub fn kfold_cv(reps: &Tensor, labels: &[usize], k: usize, spec: &ProbeSpec, classes: usize, seed: u64) -> Result<KFoldResult> {
    check_split(reps, labels, classes, "k-fold")?;
    let assignment = stratified_folds(labels, classes, k, seed)?;
    let folds: Vec<ProbeTrace> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<ProbeTrace> {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] != f).collect();
            let eval: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
            let lt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let le: Vec<usize> = eval.iter().map(|&i| labels[i]).collect();
            let seed_f = SeedSplitter::new(seed).seed(Component::Folds, 1 + f as u64);
            Ok(train_probe(&select_rows(reps, &train)?, &lt, &select_rows(reps, &eval)?, &le, spec, classes, seed_f)?.trace)
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&ProbeTrace) -> &Vec<f64>| mean_curve(&folds.iter().map(f).collect::<Vec<_>>());
    let eval_accuracy = pick(|t| &t.eval_accuracy);
    let (pocket_epoch, pocket_accuracy) = eval_accuracy
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (e, &a)| if a > best.1 { (e + 1, a) } else { best });
    let mean = ProbeTrace {
        train_loss: pick(|t| &t.train_loss),
        train_accuracy: pick(|t| &t.train_accuracy),
        eval_loss: pick(|t| &t.eval_loss),
        eval_accuracy,
        pocket_epoch,
        pocket_accuracy,
    };
    Ok(KFoldResult { folds, assignment, mean })
}
