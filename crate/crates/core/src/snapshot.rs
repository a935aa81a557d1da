//! Binary model snapshots.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "CSNN" | version u32 | step u64 | seed u64 | ablation u8 | preset u8 | batch u32
//! input h, w, c: u32 | layers u32
//! per layer:
//!   heads, grid_h, grid_w, k_h, k_w, s_h, s_w: u32 | padding u8 | mask kind u8
//!   in_channels u32 | batch_norm u8 | max_pool u8
//!   delta, som_lr, mask_lr: f64 | rule u8 | input mod u8 | gamma f64 | averaging u8
//!   interval start, end: u64
//!   per head: weights f32[G·dim] | masks f32[G·mask_dim]
//!   bn momentum, eps: f64 | mean f32[F] | var f32[F]
//! crc32 of everything above: u32
//! ```

use std::path::Path;

use crate::error::{CsnnError, Result};
use crate::masks::{BaseRule, InputModification, MaskAveraging, MaskKind, MaskRuleConfig, NeuronMasks};
use crate::network::{Ablation, BatchNormState, Csnn, Head, Layer, LayerSpec, NetworkSpec, Preset};
use crate::sconv::SomMap;
use crate::tensor::{ConvGeometry, Padding};

const MAGIC: &[u8; 4] = b"CSNN";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn preset_code(p: Preset) -> u8 {
    match p {
        Preset::SCsnn => 0,
        Preset::DCsnn => 1,
        Preset::Custom => 2,
    }
}

pub fn to_bytes(model: &Csnn) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(VERSION as usize);
    w.u64(model.step);
    w.u64(model.seed);
    w.u8(model.ablation.code());
    w.u8(preset_code(model.spec.preset));
    w.u32(model.spec.batch_size);
    let (h, wd, c) = model.input_shape;
    w.u32(h);
    w.u32(wd);
    w.u32(c);
    w.u32(model.layers.len());
    for layer in &model.layers {
        let s = &layer.spec;
        for v in [s.heads, s.grid.0, s.grid.1, s.geometry.kernel.0, s.geometry.kernel.1, s.geometry.stride.0, s.geometry.stride.1] {
            w.u32(v);
        }
        w.u8(matches!(s.geometry.padding, Padding::Valid) as u8);
        w.u8(matches!(s.mask_kind, MaskKind::Channel) as u8);
        w.u32(layer.in_channels);
        w.u8(s.batch_norm as u8);
        w.u8(s.max_pool as u8);
        w.f64(s.delta);
        w.f64(s.som_lr);
        w.f64(s.mask_lr);
        w.u8(matches!(s.mask_rule.base_rule, BaseRule::Oja) as u8);
        w.u8(matches!(s.mask_rule.input_mod, InputModification::PrefixMasks) as u8);
        w.f64(s.mask_rule.gamma);
        w.u8(matches!(s.mask_rule.averaging, MaskAveraging::GatedPatches) as u8);
        w.u64(s.train_interval.0);
        w.u64(s.train_interval.1);
        for head in &layer.heads {
            w.f32s(head.map.weights());
            w.f32s(head.masks.values());
        }
        w.f64(layer.bn.momentum);
        w.f64(layer.bn.eps);
        w.f32s(&layer.bn.mean);
        w.f32s(&layer.bn.var);
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend(crc.to_le_bytes());
    w.0
}

fn flag(v: u8, what: &str) -> std::result::Result<bool, String> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(format!("invalid {what} code {v}")),
    }
}

fn parse(buf: &[u8]) -> std::result::Result<Csnn, String> {
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err("not a CSNN snapshot (bad magic)".into());
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err("checksum mismatch".into());
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    let ablation = Ablation::from_code(r.u8()?).ok_or("invalid ablation code")?;
    let preset = match r.u8()? {
        0 => Preset::SCsnn,
        1 => Preset::DCsnn,
        2 => Preset::Custom,
        v => return Err(format!("invalid preset code {v}")),
    };
    let batch_size = r.u32()?;
    let input_shape = (r.u32()?, r.u32()?, r.u32()?);
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    let mut specs = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let heads = r.u32()?;
        let grid = (r.u32()?, r.u32()?);
        let kernel = (r.u32()?, r.u32()?);
        let stride = (r.u32()?, r.u32()?);
        let padding = if flag(r.u8()?, "padding")? { Padding::Valid } else { Padding::Same };
        let mask_kind = if flag(r.u8()?, "mask kind")? { MaskKind::Channel } else { MaskKind::Input };
        let in_channels = r.u32()?;
        let batch_norm = flag(r.u8()?, "batch norm")?;
        let max_pool = flag(r.u8()?, "max pool")?;
        let delta = r.f64()?;
        let som_lr = r.f64()?;
        let mask_lr = r.f64()?;
        let base_rule = if flag(r.u8()?, "rule")? { BaseRule::Oja } else { BaseRule::Hebb };
        let input_mod = if flag(r.u8()?, "input modification")? {
            InputModification::PrefixMasks
        } else {
            InputModification::AllMasks
        };
        let gamma = r.f64()?;
        let averaging = if flag(r.u8()?, "averaging")? {
            MaskAveraging::GatedPatches
        } else {
            MaskAveraging::AllPatches
        };
        let train_interval = (r.u64()?, r.u64()?);
        let spec = LayerSpec {
            heads,
            grid,
            geometry: ConvGeometry::new(kernel, stride, padding),
            mask_kind,
            mask_rule: MaskRuleConfig {
                base_rule,
                input_mod,
                gamma,
                averaging,
            },
            delta,
            som_lr,
            mask_lr,
            train_interval,
            batch_norm,
            max_pool,
        };
        let g = spec.neurons_per_head();
        let dim = spec.geometry.patch_len(in_channels);
        let mdim = spec.mask_dim(in_channels);
        let mut hs = Vec::with_capacity(heads.min(64));
        for _ in 0..heads {
            let weights = r.f32s(g * dim)?;
            let map = SomMap::from_weights(grid.0, grid.1, dim, weights).map_err(|e| e.to_string())?;
            let values = r.f32s(g * mdim)?;
            let masks = NeuronMasks::from_values(mask_kind, g, mdim, values).map_err(|e| e.to_string())?;
            hs.push(Head { map, masks });
        }
        let momentum = r.f64()?;
        let eps = r.f64()?;
        let f = spec.features();
        let bn = BatchNormState {
            mean: r.f32s(f)?,
            var: r.f32s(f)?,
            momentum,
            eps,
        };
        specs.push(spec.clone());
        layers.push(Layer {
            spec,
            in_channels,
            heads: hs,
            bn,
        });
    }
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes", body.len() - r.pos));
    }
    let spec = NetworkSpec {
        preset,
        batch_size,
        layers: specs,
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(Csnn {
        spec,
        input_shape,
        layers,
        ablation,
        seed,
        step,
    })
}

pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Csnn> {
    parse(buf).map_err(|reason| CsnnError::format(origin, reason))
}

/// Writes atomically: temporary sibling file, then rename.
pub fn save(model: &Csnn, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<Csnn> {
    let buf = std::fs::read(path).map_err(|e| CsnnError::io(path, e))?;
    from_bytes(&buf, path)
}
