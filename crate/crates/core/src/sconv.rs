//! The self-organizing convolution: dot-product activations against a grid of
//! unit-norm SOM weights, best-matching-unit selection, Gaussian neighborhood
//! and the batch-averaged competitive update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CsnnError, Result};
use crate::linalg;
use crate::masks::NeuronMasks;
use crate::tensor::{l2_normalize_in_place, PatchGrid, Tensor};

/// One head: a `grid_h × grid_w` lattice of unit-norm weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SomMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    weights: Vec<f32>,
}

impl SomMap {
    /// Uniform `[-1, 1]` components, then normalized.
    pub fn random<R: Rng>(grid_h: usize, grid_w: usize, dim: usize, rng: &mut R) -> Self {
        let mut weights = vec![0.0f32; grid_h * grid_w * dim];
        for w in weights.chunks_mut(dim) {
            loop {
                for x in w.iter_mut() {
                    *x = rng.random_range(-1.0f32..=1.0);
                }
                if l2_normalize_in_place(w).is_ok() {
                    break;
                }
            }
        }
        SomMap {
            grid_h,
            grid_w,
            dim,
            weights,
        }
    }

    pub fn from_weights(grid_h: usize, grid_w: usize, dim: usize, weights: Vec<f32>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 {
            return Err(CsnnError::dim("empty SOM grid"));
        }
        if weights.len() != grid_h * grid_w * dim {
            return Err(CsnnError::dim(format!(
                "{}x{} map of dim {dim} needs {} weights, got {}",
                grid_h,
                grid_w,
                grid_h * grid_w * dim,
                weights.len()
            )));
        }
        Ok(SomMap {
            grid_h,
            grid_w,
            dim,
            weights,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> &[f32] {
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    /// Lattice coordinate `(row, col)` of neuron `i` (row-major flat index).
    pub fn coord(&self, i: usize) -> (usize, usize) {
        (i / self.grid_w, i % self.grid_w)
    }

    /// Neighborhood coefficients for every (bmu, neuron) pair, row-major by bmu.
    pub fn neighborhood_table(&self, delta: f64) -> Vec<f32> {
        let g = self.len();
        let mut table = vec![0.0f32; g * g];
        for b in 0..g {
            for i in 0..g {
                table[b * g + i] = neighborhood(self, b, i, delta) as f32;
            }
        }
        table
    }
}

/// Learning rates and neighborhood radius of one layer at step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningSchedule {
    pub som_lr: f64,
    pub mask_lr: f64,
    pub delta: f64,
    pub step: u64,
}

impl LearningSchedule {
    pub fn new(som_lr: f64, mask_lr: f64, delta: f64) -> Result<Self> {
        let s = LearningSchedule {
            som_lr,
            mask_lr,
            delta,
            step: 0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.som_lr >= 0.0 && self.som_lr.is_finite()) {
            return Err(CsnnError::Config(format!("som_lr must be ≥ 0, got {}", self.som_lr)));
        }
        if !(self.mask_lr >= 0.0 && self.mask_lr.is_finite()) {
            return Err(CsnnError::Config(format!("mask_lr must be ≥ 0, got {}", self.mask_lr)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(CsnnError::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Best-matching unit and its activation for every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct BmuMap {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f32>,
}

impl BmuMap {
    pub fn from_activations(act: &Tensor) -> Result<Self> {
        let [rows, cols, g] = act.shape()[..] else {
            return Err(CsnnError::dim("activations must be [m, n, G]"));
        };
        let (indices, scores) = act
            .data()
            .chunks(g)
            .map(|slice| {
                let i = bmu(slice);
                (i, slice[i])
            })
            .unzip();
        Ok(BmuMap {
            rows,
            cols,
            indices,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Activations `y[m,n,i] = q·w_i`, where `q` is the patch masked by neuron
/// `i`'s mask when masks are given.
pub fn forward(patches: &PatchGrid, map: &SomMap, masks: Option<&NeuronMasks>) -> Result<Tensor> {
    if patches.patch_len != map.dim() {
        return Err(CsnnError::dim(format!(
            "patch length {} != map dim {}",
            patches.patch_len,
            map.dim()
        )));
    }
    let filters = match masks {
        Some(m) => m.effective_filters(map, patches.channels)?,
        None => map.weights().to_vec(),
    };
    let act = linalg::matmul_nt(&patches.patches, patches.len(), map.dim(), &filters, map.len());
    Tensor::new(vec![patches.rows, patches.cols, map.len()], act)
}

/// Argmax; ties go to the lowest index.
pub fn bmu(activations: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in activations.iter().enumerate().skip(1) {
        if v > activations[best] {
            best = i;
        }
    }
    best
}

/// `exp(-d²/(2δ²))` with `d` the lattice distance between `bmu` and `i`.
pub fn neighborhood(map: &SomMap, bmu: usize, i: usize, delta: f64) -> f64 {
    let (br, bc) = map.coord(bmu);
    let (ir, ic) = map.coord(i);
    let dr = br as f64 - ir as f64;
    let dc = bc as f64 - ic as f64;
    (-(dr * dr + dc * dc) / (2.0 * delta * delta)).exp()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Patches that contributed to the update.
    pub gated: usize,
    /// Neurons whose post-update vector could not be normalized and were kept.
    pub degenerate: usize,
    /// Frobenius norm of the applied weight change.
    pub change_norm: f64,
}

/// Competitive update averaged over all gated patches of a batch.
///
/// For each neuron `Δw_i = a/N · Σ h(c_p, i)·p` over the `N` gated patches,
/// then `w_i ← (w_i + Δw_i)/‖w_i + Δw_i‖`. The SOM always moves towards the
/// unmasked patches.
pub fn competitive_update(
    map: &mut SomMap,
    patches: &PatchGrid,
    bmus: &BmuMap,
    sched: &LearningSchedule,
    gate: &[bool],
) -> Result<UpdateStats> {
    if gate.len() != patches.len() || bmus.len() != patches.len() {
        return Err(CsnnError::dim(format!(
            "gate ({}) and bmus ({}) must cover all {} patches",
            gate.len(),
            bmus.len(),
            patches.len()
        )));
    }
    if patches.patch_len != map.dim() {
        return Err(CsnnError::dim("patch length differs from map dim"));
    }
    sched.validate()?;
    let g = map.len();
    let d = map.dim();
    let gated: Vec<usize> = (0..patches.len()).filter(|&p| gate[p]).collect();
    let mut stats = UpdateStats {
        gated: gated.len(),
        ..Default::default()
    };
    if gated.is_empty() || sched.som_lr == 0.0 {
        return Ok(stats);
    }
    let table = map.neighborhood_table(sched.delta);
    let mut h = vec![0.0f32; gated.len() * g];
    let mut p = vec![0.0f32; gated.len() * d];
    for (row, &idx) in gated.iter().enumerate() {
        let b = bmus.indices[idx];
        h[row * g..(row + 1) * g].copy_from_slice(&table[b * g..(b + 1) * g]);
        p[row * d..(row + 1) * d].copy_from_slice(patches.patch(idx));
    }
    let summed = linalg::matmul_tn(&h, gated.len(), g, &p, d);
    let scale = sched.som_lr / gated.len() as f64;
    let mut change = 0.0f64;
    for i in 0..g {
        let acc = &summed[i * d..(i + 1) * d];
        if acc.iter().all(|&v| v == 0.0) {
            continue;
        }
        let w = &mut map.weights[i * d..(i + 1) * d];
        let mut next: Vec<f32> = w
            .iter()
            .zip(acc)
            .map(|(&w, &a)| (w as f64 + scale * a as f64) as f32)
            .collect();
        if l2_normalize_in_place(&mut next).is_err() {
            stats.degenerate += 1;
            continue;
        }
        for (old, new) in w.iter_mut().zip(next) {
            let diff = new as f64 - *old as f64;
            change += diff * diff;
            *old = new;
        }
    }
    stats.change_norm = change.sqrt();
    Ok(stats)
}
