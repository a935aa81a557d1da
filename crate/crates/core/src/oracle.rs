//! Brute-force equivalence checks of the optimized kernels against direct
//! loop implementations, runnable outside the test harness.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::masks::{
    apply_input_mask, hebb_delta, mask_batch_update, modified_input, oja_delta, BaseRule, InputModification, MaskAveraging,
    MaskGate, MaskKind, MaskRuleConfig, NeuronMasks,
};
use crate::probes::{cross_entropy, Activation, draw_dropout, probe_backward, probe_forward, Mode, ProbeParams, ProbeSpec};
use crate::rng::{Component, SeedSplitter};
use crate::sconv::{competitive_update, forward, neighborhood, BmuMap, LearningSchedule, SomMap};
use crate::tensor::{extract_patches, naive_sconv_oracle, ConvGeometry, Padding, PatchGrid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: impl Into<String>, cases: usize, max_error: f64, tolerance: f64) -> Self {
        OracleCheck {
            name: name.into(),
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

fn rng(seed: u64, case: u64) -> ChaCha8Rng {
    SeedSplitter::new(seed).rng(Component::Synthetic, 0x0000_AC1E_0000 + case)
}

fn max_rel(a: &[f32], b: &[f32]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs() as f64).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Masked filter `m_i ∘ w_i` for neuron `i`, spelled out per kernel position.
fn explicit_filter(map: &SomMap, masks: Option<&NeuronMasks>, i: usize, geom: ConvGeometry, c: usize) -> Vec<f32> {
    let w = map.weight(i);
    let (kh, kw) = geom.kernel;
    let mut f = vec![0.0f32; kh * kw * c];
    for dy in 0..kh {
        for dx in 0..kw {
            for ch in 0..c {
                let j = (dy * kw + dx) * c + ch;
                let m = match masks {
                    None => 1.0,
                    Some(m) if m.kind() == MaskKind::Input => m.mask(i)[j],
                    Some(m) => m.mask(i)[ch],
                };
                f[j] = w[j] * m;
            }
        }
    }
    f
}

/// Optimized masked sconv forward (patch matrix + GEMM) against the direct
/// convolution loop on random inputs, geometries and masks.
pub fn sconv_equivalence(cases: usize, seed: u64) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut r = rng(seed, case as u64);
        let h = r.random_range(3..=14);
        let w = r.random_range(3..=14);
        let c = r.random_range(1..=4);
        let kh = r.random_range(1..=4.min(h));
        let kw = r.random_range(1..=4.min(w));
        let stride = (r.random_range(1..=3), r.random_range(1..=3));
        let padding = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let geom = ConvGeometry::new((kh, kw), stride, padding);
        let (gh, gw) = (r.random_range(1..=4), r.random_range(1..=4));
        let dim = kh * kw * c;
        let input = Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| r.random_range(-1.0..1.0)).collect())?;
        let map = SomMap::random(gh, gw, dim, &mut r);
        let masks = match r.random_range(0..3) {
            0 => None,
            1 => Some(NeuronMasks::random(MaskKind::Input, gh * gw, dim, &mut r)),
            _ => Some(NeuronMasks::random(MaskKind::Channel, gh * gw, c, &mut r)),
        };
        let grid = extract_patches(&input, geom)?;
        let fast = forward(&grid, &map, masks.as_ref())?;
        let filters: Vec<Vec<f32>> = (0..map.len()).map(|i| explicit_filter(&map, masks.as_ref(), i, geom, c)).collect();
        let slow = naive_sconv_oracle(&input, &filters, geom)?;
        assert_eq!(fast.shape(), slow.shape(), "oracle and forward disagree on shape");
        worst = worst.max(max_rel(fast.data(), slow.data()));
    }
    Ok(OracleCheck::new("sconv forward vs direct convolution", cases, worst, 1e-5))
}

/// Competitive update against `Δw_i = a/N Σ h(bmu(p), i)·p` followed by
/// normalization, evaluated neuron by neuron.
pub fn competitive_update_equivalence(cases: usize, seed: u64) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut r = rng(seed, 1000 + case as u64);
        let (gh, gw, dim, n) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(2..=12), r.random_range(1..=40));
        let mut map = SomMap::random(gh, gw, dim, &mut r);
        let patches: Vec<f32> = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let grid = PatchGrid {
            rows: 1,
            cols: n,
            patch_len: dim,
            channels: dim,
            anchors: vec![(0, 0); n],
            patches,
        };
        let act = forward(&grid, &map, None)?;
        let bmus = BmuMap::from_activations(&act)?;
        let gate: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        let sched = LearningSchedule::new(r.random_range(0.01..0.5), 0.0, r.random_range(0.3..2.0))?;
        let before = map.clone();
        competitive_update(&mut map, &grid, &bmus, &sched, &gate)?;
        let gated = gate.iter().filter(|&&g| g).count();
        for i in 0..before.len() {
            let mut delta = vec![0.0f64; dim];
            for p in (0..n).filter(|&p| gate[p]) {
                let h = neighborhood(&before, bmus.indices[p], i, sched.delta);
                for (d, &x) in delta.iter_mut().zip(grid.patch(p)) {
                    *d += h * x as f64;
                }
            }
            let want: Vec<f32> = if gated == 0 || delta.iter().all(|&d| d == 0.0) {
                before.weight(i).to_vec()
            } else {
                let raw: Vec<f64> = before
                    .weight(i)
                    .iter()
                    .zip(&delta)
                    .map(|(&w, d)| w as f64 + sched.som_lr / gated as f64 * d)
                    .collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                raw.iter().map(|v| (v / norm) as f32).collect()
            };
            let err = map.weight(i).iter().zip(&want).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    Ok(OracleCheck::new("competitive update vs per-neuron sum", cases, worst, 1e-5))
}

/// Literal mask update: modified inputs built from every neuron's masked
/// output, the base rule per spatial vector, then `lr/D` scaling.
fn literal_mask_update(masks: &NeuronMasks, patches: &[Vec<f32>], gate: &[Option<usize>], cfg: &MaskRuleConfig, lr: f64) -> Vec<Vec<f64>> {
    let (count, dim) = (masks.count(), masks.dim());
    let spatial = patches[0].len() / dim;
    let mut next: Vec<Vec<f64>> = (0..count).map(|i| masks.mask(i).iter().map(|&v| v as f64).collect()).collect();
    let mut acc = vec![vec![0.0f64; dim]; count];
    let mut hits = vec![0usize; count];
    for (p, n) in patches.iter().zip(gate) {
        let Some(i) = *n else { continue };
        for s in 0..spatial {
            let ps = &p[s * dim..(s + 1) * dim];
            let outs: Vec<Vec<f32>> = (0..count)
                .map(|k| apply_input_mask(&apply_input_mask(ps, masks.mask(k)).unwrap(), masks.mask(k)).unwrap())
                .collect();
            let modi = modified_input(ps, &outs, cfg, i);
            let y = apply_input_mask(ps, masks.mask(i)).unwrap();
            let d = match cfg.base_rule {
                BaseRule::Hebb => hebb_delta(&modi, &y),
                BaseRule::Oja => oja_delta(&modi, &y, masks.mask(i)),
            };
            for (a, v) in acc[i].iter_mut().zip(d) {
                *a += v as f64;
            }
            hits[i] += 1;
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
        for (m, a) in next[i].iter_mut().zip(&acc[i]) {
            *m += lr / denom * a;
        }
    }
    next
}

/// Factored mask update against the literal rule composition, over both
/// mask kinds, both base rules and both input modifications.
pub fn mask_update_equivalence(cases: usize, seed: u64) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut r = rng(seed, 2000 + case as u64);
        let kind = if r.random_bool(0.5) { MaskKind::Input } else { MaskKind::Channel };
        let (count, c, spatial) = (r.random_range(1..=6), r.random_range(1..=4), r.random_range(1..=4));
        let (dim, patch_len) = match kind {
            MaskKind::Input => (spatial * c, spatial * c),
            MaskKind::Channel => (c, spatial * c),
        };
        let cfg = MaskRuleConfig {
            base_rule: if r.random_bool(0.5) { BaseRule::Hebb } else { BaseRule::Oja },
            input_mod: if r.random_bool(0.5) { InputModification::AllMasks } else { InputModification::PrefixMasks },
            gamma: r.random_range(0.0..=1.0),
            averaging: if r.random_bool(0.5) { MaskAveraging::AllPatches } else { MaskAveraging::GatedPatches },
        };
        let mut masks = NeuronMasks::random(kind, count, dim, &mut r);
        let n = r.random_range(1..=8);
        let patches: Vec<Vec<f32>> = (0..n).map(|_| (0..patch_len).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let gate: Vec<Option<usize>> = (0..n).map(|_| r.random_bool(0.8).then(|| r.random_range(0..count))).collect();
        let lr = r.random_range(0.001..0.2);
        let want = literal_mask_update(&masks, &patches, &gate, &cfg, lr);
        let grid = PatchGrid {
            rows: 1,
            cols: n,
            patch_len,
            channels: c,
            anchors: vec![(0, 0); n],
            patches: patches.concat(),
        };
        mask_batch_update(&mut masks, &grid, MaskGate::PerPatch(&gate), &cfg, lr)?;
        for (i, w) in want.iter().enumerate() {
            let err = masks.mask(i).iter().zip(w).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    Ok(OracleCheck::new("mask update vs literal rule composition", cases, worst, 1e-5))
}

/// Relative error (per trainable tensor) between analytic probe gradients and
/// central finite differences with `h = 1e-5`, on a 5-sample train-mode batch
/// with fixed dropout masks. For ReLU probes, coordinates whose perturbation
/// switches a unit on or off are left out: the loss has a kink inside
/// `[-h, h]` there and the difference quotient is not a derivative.
pub fn probe_gradient_errors(spec: &ProbeSpec, inputs: usize, classes: usize, seed: u64) -> Result<Vec<f64>> {
    let n = 5;
    let mut r = rng(seed, 3000);
    let mut p = ProbeParams::init(spec, inputs, classes, &mut r);
    for l in &mut p.layers {
        if let Some(bn) = &mut l.bn {
            bn.gamma.iter_mut().for_each(|g| *g = r.random_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        }
        if let Some(b) = &mut l.b {
            b.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        }
    }
    let x: Vec<f32> = (0..n * inputs).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let masks = draw_dropout(spec, n, &mut r);
    let relu = spec.activation == Activation::Relu;
    let eval = |p: &ProbeParams| -> Result<(f64, Vec<bool>)> {
        let c = probe_forward(&x, n, spec, p, Mode::Train, &masks)?;
        let units = if relu { c.active_units() } else { vec![] };
        Ok((cross_entropy(&c.logits, &y, classes).0, units))
    };
    let cache = probe_forward(&x, n, spec, &p, Mode::Train, &masks)?;
    let base_units = if relu { cache.active_units() } else { vec![] };
    let analytic = probe_backward(&cache, &p, &y)?.tensors;
    let h = 1e-5;
    let mut errors = Vec::with_capacity(analytic.len());
    for (t, grad) in analytic.iter().enumerate() {
        let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
        for (j, &a) in grad.iter().enumerate() {
            let mut plus = p.clone();
            plus.trainable_mut()[t][j] += h;
            let mut minus = p.clone();
            minus.trainable_mut()[t][j] -= h;
            let (lp, up) = eval(&plus)?;
            let (lm, um) = eval(&minus)?;
            if up != base_units || um != base_units {
                continue;
            }
            let num = (lp - lm) / (2.0 * h);
            diff += (a - num).powi(2);
            norm_a += a * a;
            norm_n += num * num;
        }
        let (diff, scale) = (diff.sqrt(), norm_a.sqrt().max(norm_n.sqrt()));
        errors.push(if scale < 1e-10 { diff } else { diff / scale });
    }
    Ok(errors)
}

/// Gradient checks of the FC, 2FC and 3FC probe families (hidden widths
/// reduced so the finite differences stay cheap).
pub fn probe_gradient_check(seed: u64) -> Result<Vec<OracleCheck>> {
    let specs = [
        ("fc", ProbeSpec::fc()),
        ("2fc", ProbeSpec { hidden: vec![16], ..ProbeSpec::two_fc() }),
        ("3fc", ProbeSpec { hidden: vec![24, 12], ..ProbeSpec::three_fc() }),
        ("3fc-relu", ProbeSpec { hidden: vec![24, 12], ..ProbeSpec::three_fc_relu() }),
    ];
    specs
        .iter()
        .map(|(name, spec)| {
            let errs = probe_gradient_errors(spec, 20, 10, seed)?;
            let worst = errs.iter().copied().fold(0.0, f64::max);
            Ok(OracleCheck::new(format!("{name} probe gradients vs finite differences"), errs.len(), worst, 1e-4))
        })
        .collect()
}

/// Every check with its default case count.
pub fn run_all(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = vec![
        sconv_equivalence(50, seed)?,
        competitive_update_equivalence(50, seed)?,
        mask_update_equivalence(50, seed)?,
    ];
    out.extend(probe_gradient_check(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for check in run_all(7).unwrap() {
            assert!(check.passed, "{check:?}");
        }
    }

    #[test]
    fn relu_gradient_check_is_stable_across_seeds() {
        // Pre-activations near zero used to make the difference quotient jump.
        let spec = ProbeSpec {
            hidden: vec![24, 12],
            ..ProbeSpec::three_fc_relu()
        };
        for seed in 0..60 {
            let worst = probe_gradient_errors(&spec, 20, 10, seed).unwrap().into_iter().fold(0.0, f64::max);
            assert!(worst < 1e-6, "seed {seed}: {worst:e}");
        }
    }

    #[test]
    fn sconv_check_detects_a_wrong_filter() {
        // Sanity of the harness itself: a perturbed filter must register.
        let mut r = rng(1, 0);
        let input = Tensor::new(vec![5, 5, 2], (0..50).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let geom = ConvGeometry::new((3, 3), (1, 1), Padding::Same);
        let map = SomMap::random(2, 2, 18, &mut r);
        let grid = extract_patches(&input, geom).unwrap();
        let fast = forward(&grid, &map, None).unwrap();
        let mut filters: Vec<Vec<f32>> = (0..4).map(|i| explicit_filter(&map, None, i, geom, 2)).collect();
        filters[3][4] += 0.1;
        let slow = naive_sconv_oracle(&input, &filters, geom).unwrap();
        assert!(max_rel(fast.data(), slow.data()) > 1e-3);
    }
}
