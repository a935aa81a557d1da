//! Multi-head masked sconv layers, batch normalization without trainable
//! parameters, max pooling, layer-wise training and dataset encoding.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CsnnError, Result};
use crate::linalg;
use crate::masks::{mask_batch_update, MaskGate, MaskKind, MaskRuleConfig, NeuronMasks};
use crate::rng::{Component, SeedSplitter};
use crate::sconv::{competitive_update, BmuMap, LearningSchedule, SomMap};
use crate::tensor::{extract_patches_raw, ConvGeometry, Padding, PatchGrid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub heads: usize,
    pub grid: (usize, usize),
    pub geometry: ConvGeometry,
    pub mask_kind: MaskKind,
    pub mask_rule: MaskRuleConfig,
    pub delta: f64,
    pub som_lr: f64,
    pub mask_lr: f64,
    /// Training steps `[start, end)` during which this layer learns.
    pub train_interval: (u64, u64),
    pub batch_norm: bool,
    pub max_pool: bool,
}

impl LayerSpec {
    pub fn neurons_per_head(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn features(&self) -> usize {
        self.heads * self.neurons_per_head()
    }

    pub fn mask_dim(&self, in_channels: usize) -> usize {
        match self.mask_kind {
            MaskKind::Input => self.geometry.patch_len(in_channels),
            MaskKind::Channel => in_channels,
        }
    }

    pub fn schedule(&self, step: u64) -> LearningSchedule {
        LearningSchedule {
            som_lr: self.som_lr,
            mask_lr: self.mask_lr,
            delta: self.delta,
            step,
        }
    }

    fn trains_at(&self, step: u64) -> bool {
        (self.train_interval.0..self.train_interval.1).contains(&step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    SCsnn,
    DCsnn,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub preset: Preset,
    pub batch_size: usize,
    pub layers: Vec<LayerSpec>,
}

fn csnn_layer(
    heads: usize,
    grid: usize,
    stride: usize,
    mask_kind: MaskKind,
    delta: f64,
    interval: (u64, u64),
) -> LayerSpec {
    LayerSpec {
        heads,
        grid: (grid, grid),
        geometry: ConvGeometry::new((3, 3), (stride, stride), Padding::Same),
        mask_kind,
        mask_rule: MaskRuleConfig::hebb_all_masks(),
        delta,
        som_lr: 0.1,
        mask_lr: 0.005,
        train_interval: interval,
        batch_norm: true,
        max_pool: true,
    }
}

fn consecutive(i: u64, steps: u64) -> (u64, u64) {
    (i * steps, (i + 1) * steps)
}

impl NetworkSpec {
    /// Two layers: 10×10×1 grid, stride 2, input masks; 16×16×1 grid, channel masks.
    pub fn s_csnn(steps_per_layer: u64) -> Self {
        NetworkSpec {
            preset: Preset::SCsnn,
            batch_size: 1,
            layers: vec![
                csnn_layer(1, 10, 2, MaskKind::Input, 1.0, consecutive(0, steps_per_layer)),
                csnn_layer(1, 16, 1, MaskKind::Channel, 1.25, consecutive(1, steps_per_layer)),
            ],
        }
    }

    /// Three layers of 3 heads each: 12×12, 14×14, 16×16 grids.
    pub fn d_csnn(steps_per_layer: u64) -> Self {
        NetworkSpec {
            preset: Preset::DCsnn,
            batch_size: 1,
            layers: vec![
                csnn_layer(3, 12, 1, MaskKind::Input, 1.0, consecutive(0, steps_per_layer)),
                csnn_layer(3, 14, 1, MaskKind::Channel, 1.5, consecutive(1, steps_per_layer)),
                csnn_layer(3, 16, 1, MaskKind::Channel, 1.5, consecutive(2, steps_per_layer)),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CsnnError::Config("network has no layers".into()));
        }
        if self.batch_size == 0 {
            return Err(CsnnError::Config("batch_size must be ≥ 1".into()));
        }
        let mut prev_end = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let ctx = |m: String| CsnnError::Config(format!("layers[{i}]: {m}"));
            if l.heads == 0 || l.grid.0 == 0 || l.grid.1 == 0 {
                return Err(ctx("heads and grid extents must be ≥ 1".into()));
            }
            let g = l.geometry;
            if g.kernel.0 == 0 || g.kernel.1 == 0 || g.stride.0 == 0 || g.stride.1 == 0 {
                return Err(ctx("kernel and stride must be ≥ 1".into()));
            }
            l.schedule(0).validate().map_err(|e| ctx(e.to_string()))?;
            l.mask_rule.validate().map_err(|e| ctx(e.to_string()))?;
            let (start, end) = l.train_interval;
            if start > end {
                return Err(ctx(format!("train_interval [{start}, {end}) is reversed")));
            }
            if start < prev_end {
                return Err(ctx(format!(
                    "train_interval [{start}, {end}) overlaps or precedes the previous layer (ends at {prev_end})"
                )));
            }
            prev_end = end.max(prev_end);
        }
        Ok(())
    }

    /// Last step at which any layer trains, plus one.
    pub fn total_steps(&self) -> u64 {
        self.layers.iter().map(|l| l.train_interval.1).max().unwrap_or(0)
    }
}

/// Ablations of the learning procedure. During training they select what is
/// learned; during encoding they override the stored parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Masks drawn once from U[-1, 1] and frozen.
    RandomMasks,
    /// Masks redrawn from U[-1, 1] for every batch.
    NoiseMasks,
    /// Identity masks.
    NoMasks,
    /// SOM weights kept at their initialization.
    RandomSom,
}

impl Ablation {
    pub fn code(self) -> u8 {
        match self {
            Ablation::None => 0,
            Ablation::RandomMasks => 1,
            Ablation::NoiseMasks => 2,
            Ablation::NoMasks => 3,
            Ablation::RandomSom => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Ablation::None,
            1 => Ablation::RandomMasks,
            2 => Ablation::NoiseMasks,
            3 => Ablation::NoMasks,
            4 => Ablation::RandomSom,
            _ => return None,
        })
    }

    fn trains_masks(self) -> bool {
        matches!(self, Ablation::None | Ablation::RandomSom)
    }

    fn trains_som(self) -> bool {
        !matches!(self, Ablation::RandomSom)
    }
}

/// Running statistics of a batch normalization without scale or shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(features: usize) -> Self {
        BatchNormState {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-feature mean and (biased) variance over the rows of `x`.
fn batch_moments(x: &[f32], features: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / features;
    let mut mean = vec![0.0f64; features];
    for row in x.chunks(features) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; features];
    for row in x.chunks(features) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

fn standardize(x: &mut [f32], features: usize, mean: &[f64], var: &[f64], eps: f64) {
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    for row in x.chunks_mut(features) {
        for ((v, &m), &s) in row.iter_mut().zip(mean).zip(&inv) {
            *v = ((*v as f64 - m) * s) as f32;
        }
    }
}

/// Batch normalization of `x` laid out as `[rows, features]` (rows span
/// samples and spatial positions).
///
/// Train mode standardizes with the batch moments and folds them into the
/// running statistics; eval mode standardizes with the running statistics.
pub fn batch_norm_notrain(x: &mut [f32], state: &mut BatchNormState, mode: BnMode) -> Result<()> {
    let f = state.features();
    if f == 0 || x.len() % f != 0 {
        return Err(CsnnError::dim(format!(
            "batch norm over {f} features got {} values",
            x.len()
        )));
    }
    match mode {
        BnMode::Train => {
            if x.len() / f < 2 {
                return Err(CsnnError::Data(
                    "train-mode batch norm needs at least two values per feature".into(),
                ));
            }
            let (mean, var) = batch_moments(x, f);
            standardize(x, f, &mean, &var, state.eps);
            let mo = state.momentum;
            for i in 0..f {
                state.mean[i] = (mo * state.mean[i] as f64 + (1.0 - mo) * mean[i]) as f32;
                state.var[i] = (mo * state.var[i] as f64 + (1.0 - mo) * var[i]) as f32;
            }
        }
        BnMode::Eval => {
            let mean: Vec<f64> = state.mean.iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = state.var.iter().map(|&v| v as f64).collect();
            standardize(x, f, &mean, &var, state.eps);
        }
    }
    Ok(())
}

/// 2×2 max pooling with stride 2 over `[n, h, w, c]`. Odd extents behave as if
/// padded with −∞.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = x.shape()[..] else {
        return Err(CsnnError::dim("max_pool_2x2 needs [n, h, w, c]"));
    };
    let data = max_pool_raw(x.data(), n, h, w, c);
    Tensor::new(vec![n, h.div_ceil(2), w.div_ceil(2), c], data)
}

fn max_pool_raw(x: &[f32], n: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![f32::NEG_INFINITY; n * oh * ow * c];
    for s in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((s * h + y) * w + xx) * c;
                let dst = ((s * oh + y / 2) * ow + xx / 2) * c;
                for ch in 0..c {
                    let v = x[src + ch];
                    if v > out[dst + ch] {
                        out[dst + ch] = v;
                    }
                }
            }
        }
    }
    out
}

/// One SOM map with the masks of its neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub map: SomMap,
    pub masks: NeuronMasks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_channels: usize,
    pub heads: Vec<Head>,
    pub bn: BatchNormState,
}

impl Layer {
    fn init(spec: &LayerSpec, index: usize, in_channels: usize, ablation: Ablation, seeds: &SeedSplitter) -> Self {
        let g = spec.neurons_per_head();
        let dim = spec.geometry.patch_len(in_channels);
        let mdim = spec.mask_dim(in_channels);
        let heads = (0..spec.heads)
            .map(|h| {
                let key = ((index as u64) << 16) | h as u64;
                let map = SomMap::random(spec.grid.0, spec.grid.1, dim, &mut seeds.rng(Component::SomInit, key));
                let masks = match ablation {
                    Ablation::NoMasks => NeuronMasks::identity(spec.mask_kind, g, mdim),
                    _ => NeuronMasks::random(spec.mask_kind, g, mdim, &mut seeds.rng(Component::MaskInit, key)),
                };
                Head { map, masks }
            })
            .collect();
        Layer {
            spec: spec.clone(),
            in_channels,
            heads,
            bn: BatchNormState::new(spec.features()),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.spec.features()
    }

    /// Output extents `(h, w)` after pooling for an `h × w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (m, n) = self.spec.geometry.output_size(h, w)?;
        Ok(if self.spec.max_pool {
            (m.div_ceil(2), n.div_ceil(2))
        } else {
            (m, n)
        })
    }

    fn filters(&self, masks: &[NeuronMasks]) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for (head, m) in self.heads.iter().zip(masks) {
            out.extend(m.effective_filters(&head.map, self.in_channels)?);
        }
        Ok(out)
    }
}

/// Patches of every sample of a `[batch, h, w, c]` buffer, stacked.
fn batch_patches(x: &[f32], batch: usize, h: usize, w: usize, c: usize, geom: ConvGeometry) -> Result<PatchGrid> {
    let len = h * w * c;
    let grids: Vec<PatchGrid> = (0..batch)
        .map(|s| extract_patches_raw(&x[s * len..(s + 1) * len], h, w, c, geom))
        .collect::<Result<_>>()?;
    PatchGrid::concat(&grids)
}

/// Concatenated masked activations of all heads, `[patches, H·G]`.
pub fn multi_head_activations(layer: &Layer, patches: &PatchGrid, masks: &[NeuronMasks]) -> Result<Vec<f32>> {
    if patches.patch_len != layer.spec.geometry.patch_len(layer.in_channels) {
        return Err(CsnnError::dim(format!(
            "layer expects {} input channels",
            layer.in_channels
        )));
    }
    let filters = layer.filters(masks)?;
    Ok(linalg::matmul_nt(
        &patches.patches,
        patches.len(),
        patches.patch_len,
        &filters,
        layer.out_channels(),
    ))
}

/// Masked forward of all heads on one `[h, w, c]` input, features concatenated
/// in head order: `[m, n, H·G]`.
pub fn multi_head_forward(input: &Tensor, layer: &Layer) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if c != layer.in_channels {
        return Err(CsnnError::dim(format!(
            "input has {c} channels, layer expects {}",
            layer.in_channels
        )));
    }
    let grid = extract_patches_raw(input.data(), h, w, c, layer.spec.geometry)?;
    let masks: Vec<NeuronMasks> = layer.heads.iter().map(|h| h.masks.clone()).collect();
    let act = multi_head_activations(layer, &grid, &masks)?;
    Tensor::new(vec![grid.rows, grid.cols, layer.out_channels()], act)
}

/// Winning head per patch and per-head gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGate {
    pub winner: Vec<usize>,
    /// `gates[h][p]` is the gated neuron of head `h` for patch `p`.
    pub gates: Vec<Vec<Option<usize>>>,
}

impl GlobalGate {
    pub fn bool_gate(&self, head: usize) -> Vec<bool> {
        self.gates[head].iter().map(Option::is_some).collect()
    }
}

/// For each patch the head whose BMU scored highest wins (ties: lowest head).
pub fn global_bmu_gate(per_head: &[BmuMap]) -> Result<GlobalGate> {
    let first = per_head
        .first()
        .ok_or_else(|| CsnnError::dim("no heads to gate"))?;
    let n = first.len();
    if per_head.iter().any(|b| b.len() != n) {
        return Err(CsnnError::dim("heads scored different patch counts"));
    }
    let mut winner = vec![0usize; n];
    let mut gates = vec![vec![None; n]; per_head.len()];
    for p in 0..n {
        let mut best = 0;
        for (h, b) in per_head.iter().enumerate().skip(1) {
            if b.scores[p] > per_head[best].scores[p] {
                best = h;
            }
        }
        winner[p] = best;
        gates[best][p] = Some(per_head[best].indices[p]);
    }
    Ok(GlobalGate { winner, gates })
}

/// Fraction of the layer's neurons that were the overall BMU of at least one patch.
pub fn utilization(gate: &GlobalGate, neurons_per_head: usize) -> f64 {
    let heads = gate.gates.len();
    let mut used = vec![false; heads * neurons_per_head];
    for (h, g) in gate.gates.iter().enumerate() {
        for i in g.iter().flatten() {
            used[h * neurons_per_head + i] = true;
        }
    }
    used.iter().filter(|&&u| u).count() as f64 / used.len() as f64
}

fn split_bmus(act: &[f32], rows: usize, heads: usize, g: usize) -> Vec<BmuMap> {
    let total = heads * g;
    (0..heads)
        .map(|h| {
            let mut indices = Vec::with_capacity(rows);
            let mut scores = Vec::with_capacity(rows);
            for r in 0..rows {
                let slice = &act[r * total + h * g..r * total + (h + 1) * g];
                let i = crate::sconv::bmu(slice);
                indices.push(i);
                scores.push(slice[i]);
            }
            BmuMap {
                rows,
                cols: 1,
                indices,
                scores,
            }
        })
        .collect()
}

/// A trained or initialized CSNN.
#[derive(Debug, Clone, PartialEq)]
pub struct Csnn {
    pub spec: NetworkSpec,
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer>,
    pub ablation: Ablation,
    pub seed: u64,
    pub step: u64,
}

/// How lower layers normalize while an upper layer trains.
#[derive(Clone, Copy)]
enum Normalization {
    Batch,
    Running,
}

impl Csnn {
    pub fn init(spec: &NetworkSpec, input_shape: (usize, usize, usize), ablation: Ablation, seed: u64) -> Result<Self> {
        spec.validate()?;
        let seeds = SeedSplitter::new(seed);
        let (mut h, mut w, mut c) = input_shape;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let layer = Layer::init(ls, i, c, ablation, &seeds);
            (h, w) = layer
                .output_extent(h, w)
                .map_err(|e| CsnnError::Config(format!("layers[{i}]: {e}")))?;
            c = layer.out_channels();
            layers.push(layer);
        }
        Ok(Csnn {
            spec: spec.clone(),
            input_shape,
            layers,
            ablation,
            seed,
            step: 0,
        })
    }

    /// Output shape `(h, w, c)` of layer `upto` (exclusive) or of the whole model.
    pub fn output_shape(&self, upto: usize) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = self.input_shape;
        for layer in &self.layers[..upto] {
            (h, w) = layer.output_extent(h, w)?;
            c = layer.out_channels();
        }
        Ok((h, w, c))
    }

    pub fn representation_len(&self) -> usize {
        let (h, w, c) = self.output_shape(self.layers.len()).unwrap_or((0, 0, 0));
        h * w * c
    }

    fn noise_masks(&self, layer: usize, stream: u64) -> Vec<NeuronMasks> {
        let seeds = SeedSplitter::new(self.seed);
        let l = &self.layers[layer];
        let g = l.spec.neurons_per_head();
        let mdim = l.spec.mask_dim(l.in_channels);
        let mut rng = seeds.rng(Component::NoiseMasks, stream.wrapping_mul(1 << 8) ^ layer as u64);
        (0..l.heads.len())
            .map(|_| NeuronMasks::random(l.spec.mask_kind, g, mdim, &mut rng))
            .collect()
    }

    fn stored_masks(&self, layer: usize) -> Vec<NeuronMasks> {
        self.layers[layer].heads.iter().map(|h| h.masks.clone()).collect()
    }

    /// Masks used by `layer` under the model's own training ablation at `step`.
    fn training_masks(&self, layer: usize, step: u64) -> Vec<NeuronMasks> {
        match self.ablation {
            Ablation::NoiseMasks => self.noise_masks(layer, step),
            _ => self.stored_masks(layer),
        }
    }

    /// Runs layer `index` on a `[batch, h, w, c]` buffer and returns its
    /// post-processed output and extents.
    fn layer_forward(
        &self,
        index: usize,
        x: &[f32],
        batch: usize,
        (h, w, c): (usize, usize, usize),
        masks: &[NeuronMasks],
        norm: Normalization,
    ) -> Result<(Vec<f32>, (usize, usize, usize))> {
        let layer = &self.layers[index];
        let patches = batch_patches(x, batch, h, w, c, layer.spec.geometry)?;
        let (m, n) = layer.spec.geometry.output_size(h, w)?;
        let f = layer.out_channels();
        let mut act = multi_head_activations(layer, &patches, masks)?;
        if layer.spec.batch_norm {
            match norm {
                Normalization::Batch => {
                    if act.len() / f >= 2 {
                        let (mean, var) = batch_moments(&act, f);
                        standardize(&mut act, f, &mean, &var, layer.bn.eps);
                    }
                }
                Normalization::Running => {
                    let mut bn = layer.bn.clone();
                    batch_norm_notrain(&mut act, &mut bn, BnMode::Eval)?;
                }
            }
        }
        if layer.spec.max_pool {
            let pooled = max_pool_raw(&act, batch, m, n, f);
            Ok((pooled, (m.div_ceil(2), n.div_ceil(2), f)))
        } else {
            Ok((act, (m, n, f)))
        }
    }

    /// One training step on a `[batch, h, w, c]` buffer. Returns `None` when no
    /// layer trains at `self.step`.
    pub fn train_step(&mut self, batch_data: &[f32], batch: usize) -> Result<Option<StepRecord>> {
        let step = self.step;
        let Some(index) = self.layers.iter().position(|l| l.spec.trains_at(step)) else {
            self.step += 1;
            return Ok(None);
        };
        let mut x = batch_data.to_vec();
        let mut shape = self.input_shape;
        for lower in 0..index {
            let masks = self.training_masks(lower, step);
            (x, shape) = self.layer_forward(lower, &x, batch, shape, &masks, Normalization::Batch)?;
        }
        let masks = self.training_masks(index, step);
        let ablation = self.ablation;
        let layer = &mut self.layers[index];
        let (h, w, c) = shape;
        let patches = batch_patches(&x, batch, h, w, c, layer.spec.geometry)?;
        let mut act = multi_head_activations(layer, &patches, &masks)?;
        let g = layer.spec.neurons_per_head();
        let bmus = split_bmus(&act, patches.len(), layer.heads.len(), g);
        let gate = global_bmu_gate(&bmus)?;
        let sched = layer.spec.schedule(step);
        let mut record = StepRecord {
            step,
            layer: index,
            utilization: utilization(&gate, g),
            change_norm: 0.0,
            degenerate: 0,
        };
        let mut change = 0.0;
        for (hi, head) in layer.heads.iter_mut().enumerate() {
            if ablation.trains_som() {
                let stats = competitive_update(&mut head.map, &patches, &bmus[hi], &sched, &gate.bool_gate(hi))?;
                change += stats.change_norm * stats.change_norm;
                record.degenerate += stats.degenerate;
            }
            if ablation.trains_masks() {
                mask_batch_update(
                    &mut head.masks,
                    &patches,
                    MaskGate::PerPatch(&gate.gates[hi]),
                    &layer.spec.mask_rule,
                    sched.mask_lr,
                )?;
            }
        }
        record.change_norm = change.sqrt();
        if layer.spec.batch_norm && act.len() / layer.out_channels() >= 2 {
            batch_norm_notrain(&mut act, &mut layer.bn, BnMode::Train)?;
        }
        self.step += 1;
        Ok(Some(record))
    }

    /// Representation of each sample: the flattened output of the last layer,
    /// normalized with running statistics.
    pub fn encode(&self, images: &Tensor, ablation: Ablation, seed: u64) -> Result<Tensor> {
        encode(images, self, ablation, seed)
    }
}

/// Diagnostics of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub layer: usize,
    pub utilization: f64,
    pub change_norm: f64,
    pub degenerate: usize,
}

/// Samples processed per encode work item; noise masks are redrawn per chunk.
pub const ENCODE_CHUNK: usize = 16;

/// Encodes `[n, h, w, c]` images into `[n, rep_len]` representations.
///
/// The result depends only on (model, images, ablation, seed).
pub fn encode(images: &Tensor, model: &Csnn, ablation: Ablation, seed: u64) -> Result<Tensor> {
    let [n, h, w, c] = images.shape()[..] else {
        return Err(CsnnError::dim("encode needs [n, h, w, c] images"));
    };
    if (h, w, c) != model.input_shape {
        return Err(CsnnError::dim(format!(
            "model expects {:?} inputs, got {:?}",
            model.input_shape,
            (h, w, c)
        )));
    }
    let mut view = model.clone();
    view.seed = seed;
    let seeds = SeedSplitter::new(seed);
    for (li, layer) in view.layers.iter_mut().enumerate() {
        let g = layer.spec.neurons_per_head();
        let mdim = layer.spec.mask_dim(layer.in_channels);
        let dim = layer.spec.geometry.patch_len(layer.in_channels);
        for (hi, head) in layer.heads.iter_mut().enumerate() {
            let key = ((li as u64) << 16) | hi as u64;
            match ablation {
                Ablation::RandomMasks => {
                    let mut rng = seeds.rng(Component::MaskInit, key ^ (1 << 40));
                    head.masks = NeuronMasks::random(layer.spec.mask_kind, g, mdim, &mut rng);
                }
                Ablation::NoMasks => head.masks = NeuronMasks::identity(layer.spec.mask_kind, g, mdim),
                Ablation::RandomSom => {
                    let mut rng = seeds.rng(Component::SomInit, key);
                    head.map = SomMap::random(layer.spec.grid.0, layer.spec.grid.1, dim, &mut rng);
                }
                Ablation::None | Ablation::NoiseMasks => {}
            }
        }
    }
    let rep_len = view.representation_len();
    let sample_len = h * w * c;
    let chunks: Vec<Vec<f32>> = images
        .data()
        .par_chunks(ENCODE_CHUNK * sample_len)
        .enumerate()
        .map(|(ci, chunk)| -> Result<Vec<f32>> {
            let mut out = Vec::with_capacity(chunk.len() / sample_len * rep_len);
            for (si, sample) in chunk.chunks(sample_len).enumerate() {
                let mut x = sample.to_vec();
                let mut shape = view.input_shape;
                for li in 0..view.layers.len() {
                    let masks = if ablation == Ablation::NoiseMasks {
                        view.noise_masks(li, (ci * ENCODE_CHUNK + si) as u64 / ENCODE_CHUNK as u64)
                    } else {
                        view.stored_masks(li)
                    };
                    (x, shape) = view.layer_forward(li, &x, 1, shape, &masks, Normalization::Running)?;
                }
                out.extend(x);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Tensor::new(vec![n, rep_len], chunks.concat())
}

/// Mean per-batch utilization of every layer's neurons over `images`
/// (inference only, running statistics).
pub fn layer_utilization(model: &Csnn, images: &Tensor, batch_size: usize) -> Result<Vec<f64>> {
    let [n, h, w, c] = images.shape()[..] else {
        return Err(CsnnError::dim("layer_utilization needs [n, h, w, c] images"));
    };
    if batch_size == 0 || n == 0 {
        return Err(CsnnError::Data("utilization needs a non-empty batch".into()));
    }
    let sample_len = h * w * c;
    let per_batch: Vec<Vec<f64>> = images
        .data()
        .par_chunks(batch_size * sample_len)
        .map(|chunk| -> Result<Vec<f64>> {
            let batch = chunk.len() / sample_len;
            let mut x = chunk.to_vec();
            let mut shape = model.input_shape;
            let mut utils = Vec::with_capacity(model.layers.len());
            for li in 0..model.layers.len() {
                let layer = &model.layers[li];
                let (lh, lw, lc) = shape;
                let patches = batch_patches(&x, batch, lh, lw, lc, layer.spec.geometry)?;
                let masks = model.stored_masks(li);
                let act = multi_head_activations(layer, &patches, &masks)?;
                let g = layer.spec.neurons_per_head();
                let gate = global_bmu_gate(&split_bmus(&act, patches.len(), layer.heads.len(), g))?;
                utils.push(utilization(&gate, g));
                (x, shape) = model.layer_forward(li, &x, batch, shape, &masks, Normalization::Running)?;
            }
            Ok(utils)
        })
        .collect::<Result<_>>()?;
    let layers = model.layers.len();
    Ok((0..layers)
        .map(|l| per_batch.iter().map(|u| u[l]).sum::<f64>() / per_batch.len() as f64)
        .collect())
}

/// Overall BMU `(head, neuron)` of every patch of layer `index` for one `[h, w, c]` input.
pub fn layer_bmus(model: &Csnn, image: &Tensor, index: usize) -> Result<(PatchGrid, Vec<(usize, usize)>)> {
    if index >= model.layers.len() {
        return Err(CsnnError::dim(format!("layer {index} out of {}", model.layers.len())));
    }
    let (h, w, c) = image.hwc()?;
    let mut x = image.data().to_vec();
    let mut shape = (h, w, c);
    for li in 0..index {
        (x, shape) = model.layer_forward(li, &x, 1, shape, &model.stored_masks(li), Normalization::Running)?;
    }
    let layer = &model.layers[index];
    let patches = batch_patches(&x, 1, shape.0, shape.1, shape.2, layer.spec.geometry)?;
    let act = multi_head_activations(layer, &patches, &model.stored_masks(index))?;
    let g = layer.spec.neurons_per_head();
    let bmus = split_bmus(&act, patches.len(), layer.heads.len(), g);
    let gate = global_bmu_gate(&bmus)?;
    let picks = gate
        .winner
        .iter()
        .enumerate()
        .map(|(p, &hd)| (hd, bmus[hd].indices[p]))
        .collect();
    Ok((patches, picks))
}

/// Result of [`train_layerwise`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Csnn,
    pub records: Vec<StepRecord>,
}

/// Trains all layers bottom-up. `on_checkpoint` receives the model state after
/// exactly `s` steps for every requested `s` (0 = initialization).
pub fn train_layerwise<F>(
    images: &Tensor,
    spec: &NetworkSpec,
    ablation: Ablation,
    seed: u64,
    checkpoints: &[u64],
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Csnn) -> Result<()>,
{
    let [n, h, w, c] = images.shape()[..] else {
        return Err(CsnnError::dim("training data must be [n, h, w, c]"));
    };
    if n == 0 {
        return Err(CsnnError::Data("empty training set".into()));
    }
    let mut model = Csnn::init(spec, (h, w, c), ablation, seed)?;
    let order = {
        let mut rng = SeedSplitter::new(seed).rng(Component::DataOrder, 0);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        idx
    };
    let mut wanted: Vec<u64> = checkpoints.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let last = spec.total_steps().max(wanted.last().copied().unwrap_or(0));
    let sample_len = h * w * c;
    let b = spec.batch_size;
    let mut records = Vec::new();
    let mut next_ckpt = 0;
    let mut batch = vec![0.0f32; b * sample_len];
    for step in 0..=last {
        while next_ckpt < wanted.len() && wanted[next_ckpt] == step {
            on_checkpoint(&model)?;
            next_ckpt += 1;
        }
        if step == last {
            break;
        }
        if !model.layers.iter().any(|l| l.spec.trains_at(step)) {
            model.step += 1;
            continue;
        }
        for j in 0..b {
            let src = order[((step as usize) * b + j) % n];
            batch[j * sample_len..(j + 1) * sample_len]
                .copy_from_slice(&images.data()[src * sample_len..(src + 1) * sample_len]);
        }
        if let Some(r) = model.train_step(&batch, b)? {
            records.push(r);
        }
    }
    Ok(TrainOutcome { model, records })
}
