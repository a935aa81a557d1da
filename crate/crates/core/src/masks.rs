//! Per-neuron input masks and between-layer channel masks, trained with local
//! Hebbian / Oja rules on a GHA-style modified input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CsnnError, Result};
use crate::sconv::SomMap;
use crate::tensor::PatchGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// One coefficient per patch element.
    Input,
    /// One coefficient per input channel, broadcast over the kernel window.
    Channel,
}

/// Masks of every neuron of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMasks {
    kind: MaskKind,
    count: usize,
    dim: usize,
    values: Vec<f32>,
}

impl NeuronMasks {
    /// Uniform `[-1, 1]` initialization.
    pub fn random<R: Rng>(kind: MaskKind, count: usize, dim: usize, rng: &mut R) -> Self {
        let values = (0..count * dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        NeuronMasks {
            kind,
            count,
            dim,
            values,
        }
    }

    /// All-ones masks, equivalent to no masking.
    pub fn identity(kind: MaskKind, count: usize, dim: usize) -> Self {
        NeuronMasks {
            kind,
            count,
            dim,
            values: vec![1.0; count * dim],
        }
    }

    pub fn from_values(kind: MaskKind, count: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != count * dim {
            return Err(CsnnError::dim(format!(
                "{count} masks of dim {dim} need {} values, got {}",
                count * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CsnnError::Invariant("non-finite mask value".into()));
        }
        Ok(NeuronMasks {
            kind,
            count,
            dim,
            values,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks that these masks fit patches of `patch_len` with `channels` channels.
    pub fn check_geometry(&self, patch_len: usize, channels: usize) -> Result<()> {
        let ok = match self.kind {
            MaskKind::Input => self.dim == patch_len,
            MaskKind::Channel => self.dim == channels && channels > 0 && patch_len % channels == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(CsnnError::dim(format!(
                "{:?} masks of dim {} do not fit patches of length {patch_len} with {channels} channels",
                self.kind, self.dim
            )))
        }
    }

    /// The masked patch `ŷ_i` of neuron `i`.
    pub fn masked_patch(&self, i: usize, patch: &[f32]) -> Result<Vec<f32>> {
        match self.kind {
            MaskKind::Input => apply_input_mask(patch, self.mask(i)),
            MaskKind::Channel => apply_channel_mask(patch, self.mask(i)),
        }
    }

    /// Folds each mask into its SOM weight: `(p∘m_i)·w_i = p·(m_i∘w_i)`.
    pub fn effective_filters(&self, map: &SomMap, channels: usize) -> Result<Vec<f32>> {
        if self.count != map.len() {
            return Err(CsnnError::dim(format!(
                "{} masks for a map of {} neurons",
                self.count,
                map.len()
            )));
        }
        self.check_geometry(map.dim(), channels)?;
        let d = map.dim();
        let mut out = Vec::with_capacity(self.count * d);
        for i in 0..self.count {
            let w = map.weight(i);
            let m = self.mask(i);
            match self.kind {
                MaskKind::Input => out.extend(w.iter().zip(m).map(|(&w, &m)| w * m)),
                MaskKind::Channel => {
                    out.extend(w.iter().enumerate().map(|(j, &w)| w * m[j % channels]))
                }
            }
        }
        Ok(out)
    }
}

/// Elementwise `p ∘ m`.
pub fn apply_input_mask(patch: &[f32], mask: &[f32]) -> Result<Vec<f32>> {
    if patch.len() != mask.len() {
        return Err(CsnnError::dim(format!(
            "patch length {} != mask length {}",
            patch.len(),
            mask.len()
        )));
    }
    Ok(patch.iter().zip(mask).map(|(&p, &m)| p * m).collect())
}

/// Multiplies every spatial channel vector of the patch by `mask`.
pub fn apply_channel_mask(patch: &[f32], mask: &[f32]) -> Result<Vec<f32>> {
    let c = mask.len();
    if c == 0 || patch.len() % c != 0 {
        return Err(CsnnError::dim(format!(
            "patch length {} not divisible by channel count {c}",
            patch.len()
        )));
    }
    Ok(patch.iter().enumerate().map(|(j, &p)| p * mask[j % c]).collect())
}

/// Plain Hebbian term `ŷ ∘ p`.
pub fn hebb_delta(p: &[f32], y: &[f32]) -> Vec<f32> {
    p.iter().zip(y).map(|(&p, &y)| y * p).collect()
}

/// Oja's rule in elementwise form: `ŷ ∘ (p − ŷ ∘ m)`.
pub fn oja_delta(p: &[f32], y: &[f32], m: &[f32]) -> Vec<f32> {
    p.iter()
        .zip(y)
        .zip(m)
        .map(|((&p, &y), &m)| y * (p - y * m))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseRule {
    Hebb,
    Oja,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputModification {
    /// Subtract the masked outputs of every mask of the map.
    AllMasks,
    /// Subtract only the masks preceding the neuron in row-major grid order.
    PrefixMasks,
}

/// Denominator of the batch mask update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAveraging {
    /// Every (spatial) patch vector of the batch, gated or not.
    #[default]
    AllPatches,
    /// Only the vectors that contributed to the neuron's update.
    GatedPatches,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRuleConfig {
    pub base_rule: BaseRule,
    pub input_mod: InputModification,
    pub gamma: f64,
    #[serde(default)]
    pub averaging: MaskAveraging,
}

impl MaskRuleConfig {
    /// Hebbian rule on the all-masks modified input, `γ = 1`.
    pub fn hebb_all_masks() -> Self {
        MaskRuleConfig {
            base_rule: BaseRule::Hebb,
            input_mod: InputModification::AllMasks,
            gamma: 1.0,
            averaging: MaskAveraging::AllPatches,
        }
    }

    /// Oja's rule on the prefix-masks modified input, `γ = 0.5`.
    pub fn oja_prefix_masks() -> Self {
        MaskRuleConfig {
            base_rule: BaseRule::Oja,
            input_mod: InputModification::PrefixMasks,
            gamma: 0.5,
            averaging: MaskAveraging::AllPatches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CsnnError::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    fn rule(&self, modified: &[f32], y: &[f32], m: &[f32]) -> Vec<f32> {
        match self.base_rule {
            BaseRule::Hebb => hebb_delta(modified, y),
            BaseRule::Oja => oja_delta(modified, y, m),
        }
    }
}

/// Modified input of neuron `i`: `p − γ Σ_k ŷ_k∘m_k` over all masks, or over
/// `k < i` for the prefix variant.
///
/// `masked_outputs[k]` holds `ŷ_k ∘ m_k`.
pub fn modified_input(p: &[f32], masked_outputs: &[Vec<f32>], cfg: &MaskRuleConfig, i: usize) -> Vec<f32> {
    let upto = match cfg.input_mod {
        InputModification::AllMasks => masked_outputs.len(),
        InputModification::PrefixMasks => i.min(masked_outputs.len()),
    };
    let mut out: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    for term in &masked_outputs[..upto] {
        for (o, &t) in out.iter_mut().zip(term) {
            *o -= cfg.gamma * t as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Which neurons receive a mask update from which patches.
#[derive(Debug, Clone, Copy)]
pub enum MaskGate<'a> {
    /// At most one neuron per patch (the overall BMU, if it belongs to this map).
    PerPatch(&'a [Option<usize>]),
    /// Every neuron learns from every patch.
    Dense,
}

/// One batch update of all masks of a map.
///
/// For each gated (patch, neuron) pair the rule is evaluated on every spatial
/// vector of the patch (one vector for input masks, `k_h·k_w` channel vectors
/// for channel masks), summed, and scaled by `lr/D`. Masks without gated
/// contributions are left unchanged.
pub fn mask_batch_update(
    masks: &mut NeuronMasks,
    patches: &PatchGrid,
    gate: MaskGate<'_>,
    cfg: &MaskRuleConfig,
    lr: f64,
) -> Result<()> {
    cfg.validate()?;
    masks.check_geometry(patches.patch_len, patches.channels)?;
    if let MaskGate::PerPatch(g) = gate {
        if g.len() != patches.len() {
            return Err(CsnnError::dim(format!(
                "gate covers {} patches, grid has {}",
                g.len(),
                patches.len()
            )));
        }
        if let Some(bad) = g.iter().flatten().find(|&&i| i >= masks.count) {
            return Err(CsnnError::dim(format!("gated neuron {bad} out of {}", masks.count)));
        }
    }
    if lr == 0.0 || patches.is_empty() {
        return Ok(());
    }
    let dim = masks.dim;
    let spatial = patches.patch_len / dim;
    let count = masks.count;

    // Σ_k ŷ_k∘m_k = p ∘ Σ_k m_k∘m_k, so the modification only needs the
    // (prefix) sums of squared masks.
    let squares: Vec<f64> = masks.values.iter().map(|&m| m as f64 * m as f64).collect();
    let energy_for = |i: usize| -> Vec<f64> {
        let upto = match cfg.input_mod {
            InputModification::AllMasks => count,
            InputModification::PrefixMasks => i,
        };
        let mut e = vec![0.0f64; dim];
        for k in 0..upto {
            for (e, &s) in e.iter_mut().zip(&squares[k * dim..(k + 1) * dim]) {
                *e += s;
            }
        }
        e
    };
    let mut energies: Vec<Option<Vec<f64>>> = vec![None; count];

    let mut acc = vec![0.0f64; count * dim];
    let mut hits = vec![0usize; count];
    let mut modified = vec![0.0f32; dim];
    let mut y = vec![0.0f32; dim];
    let mut visit = |i: usize, patch: &[f32], acc: &mut [f64], hits: &mut [usize]| {
        let energy = energies[i].get_or_insert_with(|| energy_for(i));
        let m = &masks.values[i * dim..(i + 1) * dim];
        for s in 0..spatial {
            let ps = &patch[s * dim..(s + 1) * dim];
            for j in 0..dim {
                y[j] = ps[j] * m[j];
                modified[j] = (ps[j] as f64 - cfg.gamma * ps[j] as f64 * energy[j]) as f32;
            }
            let delta = cfg.rule(&modified, &y, m);
            for (a, d) in acc[i * dim..(i + 1) * dim].iter_mut().zip(delta) {
                *a += d as f64;
            }
        }
        hits[i] += spatial;
    };
    match gate {
        MaskGate::PerPatch(g) => {
            for (p, neuron) in g.iter().enumerate() {
                if let Some(i) = *neuron {
                    visit(i, patches.patch(p), &mut acc, &mut hits);
                }
            }
        }
        MaskGate::Dense => {
            for p in 0..patches.len() {
                for i in 0..count {
                    visit(i, patches.patch(p), &mut acc, &mut hits);
                }
            }
        }
    }

    let total = (patches.len() * spatial) as f64;
    for i in 0..count {
        if hits[i] == 0 {
            continue;
        }
        let denom = match cfg.averaging {
            MaskAveraging::AllPatches => total,
            MaskAveraging::GatedPatches => hits[i] as f64,
        };
        let scale = lr / denom;
        for (m, &a) in masks.values[i * dim..(i + 1) * dim]
            .iter_mut()
            .zip(&acc[i * dim..(i + 1) * dim])
        {
            let next = *m as f64 + scale * a;
            if !next.is_finite() {
                return Err(CsnnError::Invariant(format!("mask {i} diverged to a non-finite value")));
            }
            *m = next as f32;
        }
    }
    Ok(())
}
