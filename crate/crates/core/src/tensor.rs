//! Dense tensors, patch extraction and the reference convolution.

use serde::{Deserialize, Serialize};

use crate::error::{CsnnError, Result};
use crate::linalg;

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major tensor of rank ≤ 4, sample-major then height, width, channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(CsnnError::dim(format!("rank {} not in 1..=4", shape.len())));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(CsnnError::dim(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CsnnError::Invariant(format!("non-finite value at flat index {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the trailing three extents as `(h, w, c)`.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w, c] | [_, h, w, c] => Ok((*h, *w, *c)),
            s => Err(CsnnError::dim(format!("expected [h,w,c] or [n,h,w,c], got {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(CsnnError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Sample `i` of a rank-4 tensor as an `[h, w, c]` tensor.
    pub fn sample(&self, i: usize) -> Result<Tensor> {
        let [n, h, w, c] = self.shape[..] else {
            return Err(CsnnError::dim("sample() needs a rank-4 tensor"));
        };
        if i >= n {
            return Err(CsnnError::dim(format!("sample {i} out of {n}")));
        }
        let len = h * w * c;
        Ok(Tensor {
            shape: vec![h, w, c],
            data: self.data[i * len..(i + 1) * len].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Kernel, stride and padding of a patchwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent and leading pad along one axis.
    pub fn axis(size: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize)> {
        if k == 0 || s == 0 {
            return Err(CsnnError::dim("kernel and stride must be ≥ 1"));
        }
        match padding {
            Padding::Valid => {
                if k > size {
                    return Err(CsnnError::dim(format!("kernel {k} larger than input {size}")));
                }
                Ok(((size - k) / s + 1, 0))
            }
            Padding::Same => {
                if size == 0 {
                    return Err(CsnnError::dim("empty input"));
                }
                let out = size.div_ceil(s);
                let total = ((out - 1) * s + k).saturating_sub(size);
                Ok((out, total / 2))
            }
        }
    }

    /// Output grid `(rows, cols)` for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (m, _) = Self::axis(h, self.kernel.0, self.stride.0, self.padding)?;
        let (n, _) = Self::axis(w, self.kernel.1, self.stride.1, self.padding)?;
        Ok((m, n))
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        self.kernel.0 * self.kernel.1 * channels
    }
}

/// Flattened convolution windows of one input, row-major over the grid.
///
/// Each patch is laid out as `k_h × k_w` stacked channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_len: usize,
    pub channels: usize,
    /// `rows·cols` patches of `patch_len` values each.
    pub patches: Vec<f32>,
    /// Top-left input coordinate of each window (may be negative with padding).
    pub anchors: Vec<(isize, isize)>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }

    /// Stacks several grids of identical geometry (one per batch sample).
    pub fn concat(grids: &[PatchGrid]) -> Result<PatchGrid> {
        let first = grids
            .first()
            .ok_or_else(|| CsnnError::dim("cannot concatenate zero patch grids"))?;
        let mut out = PatchGrid {
            rows: 0,
            cols: first.cols,
            patch_len: first.patch_len,
            channels: first.channels,
            patches: Vec::with_capacity(grids.len() * first.patches.len()),
            anchors: Vec::new(),
        };
        for g in grids {
            if g.patch_len != first.patch_len || g.cols != first.cols {
                return Err(CsnnError::dim("patch grids differ in geometry"));
            }
            out.rows += g.rows;
            out.patches.extend_from_slice(&g.patches);
            out.anchors.extend_from_slice(&g.anchors);
        }
        Ok(out)
    }
}

/// Extracts every convolution window of an `[h, w, c]` input.
///
/// Same padding pads with zeros, `floor` of the total pad on the leading
/// side, so the grid is `ceil(h/s_h) × ceil(w/s_w)`.
pub fn extract_patches(input: &Tensor, geom: ConvGeometry) -> Result<PatchGrid> {
    let (h, w, c) = match input.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(CsnnError::dim(format!("extract_patches needs [h,w,c], got {s:?}"))),
    };
    extract_patches_raw(input.data(), h, w, c, geom)
}

pub(crate) fn extract_patches_raw(
    data: &[f32],
    h: usize,
    w: usize,
    c: usize,
    geom: ConvGeometry,
) -> Result<PatchGrid> {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (rows, pad_top) = ConvGeometry::axis(h, kh, sh, geom.padding)?;
    let (cols, pad_left) = ConvGeometry::axis(w, kw, sw, geom.padding)?;
    let patch_len = kh * kw * c;
    let mut patches = vec![0.0f32; rows * cols * patch_len];
    let mut anchors = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let y0 = (r * sh) as isize - pad_top as isize;
            let x0 = (q * sw) as isize - pad_left as isize;
            anchors.push((y0, x0));
            let base = (r * cols + q) * patch_len;
            for dy in 0..kh {
                let y = y0 + dy as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let x = x0 + dx as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let src = (y as usize * w + x as usize) * c;
                    let dst = base + (dy * kw + dx) * c;
                    patches[dst..dst + c].copy_from_slice(&data[src..src + c]);
                }
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch_len,
        channels: c,
        patches,
        anchors,
    })
}

/// Returns `v / ‖v‖`.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out)?;
    Ok(out)
}

/// Normalizes in place; leaves `v` untouched and errors when `‖v‖ ≤ ε`.
pub fn l2_normalize_in_place(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if !(norm > NORM_EPS) {
        return Err(CsnnError::DegenerateVector {
            norm,
            eps: NORM_EPS,
        });
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Reference patchwise convolution by explicit loops.
///
/// Reads the input directly (no patch matrix) and accumulates each output in
/// `f64` in natural index order. Used as the correctness oracle for the
/// optimized layer forward.
pub fn naive_sconv_oracle(input: &Tensor, filters: &[Vec<f32>], geom: ConvGeometry) -> Result<Tensor> {
    let (h, w, c) = match input.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(CsnnError::dim(format!("oracle needs [h,w,c], got {s:?}"))),
    };
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (rows, pad_top) = ConvGeometry::axis(h, kh, sh, geom.padding)?;
    let (cols, pad_left) = ConvGeometry::axis(w, kw, sw, geom.padding)?;
    let len = kh * kw * c;
    if let Some(f) = filters.iter().find(|f| f.len() != len) {
        return Err(CsnnError::dim(format!("filter length {} != {len}", f.len())));
    }
    let x = input.data();
    let nf = filters.len();
    let mut out = vec![0.0f32; rows * cols * nf];
    for r in 0..rows {
        for q in 0..cols {
            for (i, f) in filters.iter().enumerate() {
                let mut acc = 0.0f64;
                for dy in 0..kh {
                    for dx in 0..kw {
                        for ch in 0..c {
                            let y = (r * sh + dy) as isize - pad_top as isize;
                            let xx = (q * sw + dx) as isize - pad_left as isize;
                            let v = if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                0.0
                            } else {
                                x[(y as usize * w + xx as usize) * c + ch]
                            };
                            acc += v as f64 * f[(dy * kw + dx) * c + ch] as f64;
                        }
                    }
                }
                out[(r * cols + q) * nf + i] = acc as f32;
            }
        }
    }
    Tensor::new(vec![rows, cols, nf], out)
}

/// Output of extracting patches then dotting each with every filter.
pub fn patch_dot_filters(grid: &PatchGrid, filters: &[Vec<f32>]) -> Vec<f32> {
    let flat: Vec<f32> = filters.iter().flatten().copied().collect();
    linalg::matmul_nt(&grid.patches, grid.len(), grid.patch_len, &flat, filters.len())
}
