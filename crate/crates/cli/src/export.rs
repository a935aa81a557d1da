//! `csnn export`: BMU reconstructions and representation statistics.

use std::path::{Path, PathBuf};

use csnn_core::network::{encode, layer_bmus, layer_utilization};
use csnn_core::tensor::PatchGrid;
use csnn_core::{snapshot, Csnn, CsnnError, Result, Tensor};

use crate::data::prepare;
use crate::run::{default_encode_ablation, load_run, CheckpointSelector};
use crate::trace::{parse_records_csv, PRETEXT_FILE};

/// How overlapping patch contributions combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overlap {
    Average,
    /// Later patches (row-major) overwrite earlier ones.
    Last,
}

/// Writes `patch_values[p]` (laid out like the patches of `grid`) back at
/// each patch location of an `[h, w, c]` image. Out-of-image (padding)
/// elements are dropped; uncovered pixels stay 0.
pub fn reconstruct(
    grid: &PatchGrid,
    kernel: (usize, usize),
    shape: (usize, usize, usize),
    patch_values: &[&[f32]],
    overlap: Overlap,
) -> Result<Vec<f32>> {
    let (h, w, c) = shape;
    let (kh, kw) = kernel;
    if patch_values.len() != grid.len() || grid.anchors.len() != grid.len() {
        return Err(CsnnError::dim(format!("{} patch values for {} patches", patch_values.len(), grid.len())));
    }
    if kh * kw * c != grid.patch_len {
        return Err(CsnnError::dim(format!(
            "kernel {kh}×{kw} with {c} channels does not match patch length {}",
            grid.patch_len
        )));
    }
    let mut sum = vec![0.0f64; h * w * c];
    let mut count = vec![0u32; h * w];
    for (p, values) in patch_values.iter().enumerate() {
        if values.len() != grid.patch_len {
            return Err(CsnnError::dim(format!("patch {p} value has length {}", values.len())));
        }
        let (y0, x0) = grid.anchors[p];
        for dy in 0..kh {
            for dx in 0..kw {
                let (y, x) = (y0 + dy as isize, x0 + dx as isize);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let px = y as usize * w + x as usize;
                let src = &values[(dy * kw + dx) * c..(dy * kw + dx + 1) * c];
                let dst = &mut sum[px * c..(px + 1) * c];
                match overlap {
                    Overlap::Average => {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s as f64;
                        }
                        count[px] += 1;
                    }
                    Overlap::Last => {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s as f64;
                        }
                        count[px] = 1;
                    }
                }
            }
        }
    }
    Ok(sum
        .iter()
        .enumerate()
        .map(|(i, &s)| match count[i / c] {
            0 => 0.0,
            n => (s / n as f64) as f32,
        })
        .collect())
}

/// First three channels of an `[h, w, c]` image, or the first channel when
/// there are fewer than three.
pub fn display_slice(img: &[f32], c: usize) -> (usize, Vec<f32>) {
    let out_c = if c >= 3 { 3 } else { 1 };
    let data = img.chunks_exact(c).flat_map(|px| px[..out_c].iter().copied()).collect();
    (out_c, data)
}

/// Min-max scaling to bytes; a constant image maps to 0.
pub fn to_bytes(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary PGM (one channel) or PPM (three channels).
pub fn encode_pnm(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(CsnnError::dim(format!("PNM images have 1 or 3 channels, not {channels}"))),
    };
    if pixels.len() != width * height * channels {
        return Err(CsnnError::dim("pixel count does not match the image size"));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses the images written by [`encode_pnm`]: `(width, height, channels, pixels)`.
pub fn decode_pnm(bytes: &[u8], origin: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |m: &str| CsnnError::format(origin, m.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * channels {
        return Err(bad("pixel data length does not match the header"));
    }
    Ok((w, h, channels, body.to_vec()))
}

/// Scales an `[h, w, c]` image to bytes and writes it as PGM/PPM.
pub fn write_image(path: &Path, img: &[f32], shape: (usize, usize, usize)) -> Result<()> {
    let (h, w, c) = shape;
    let (out_c, data) = display_slice(img, c);
    let bytes = encode_pnm(w, h, out_c, &to_bytes(&data))?;
    csnn_core::io::write_atomic(path, &bytes)
}

/// The input of layer `layer` for one sample, and its BMU reconstruction.
pub fn bmu_image(model: &Csnn, sample: &Tensor, layer: usize, overlap: Overlap) -> Result<(Vec<f32>, (usize, usize, usize))> {
    let (grid, picks) = layer_bmus(model, sample, layer)?;
    let shape = model.output_shape(layer)?;
    let l = &model.layers[layer];
    let values: Vec<&[f32]> = picks.iter().map(|&(h, n)| l.heads[h].map.weight(n)).collect();
    let img = reconstruct(&grid, l.spec.geometry.kernel, shape, &values, overlap)?;
    Ok((img, shape))
}

/// Per-class mean over samples of the spatially averaged `[h, w, f]`
/// representations. Classes without samples are `None`.
pub fn class_averages(reps: &Tensor, labels: &[usize], classes: usize, shape: (usize, usize, usize)) -> Result<Vec<Option<Vec<f64>>>> {
    let (h, w, f) = shape;
    let [n, d] = reps.shape()[..] else {
        return Err(CsnnError::dim("representations must be [n, d]"));
    };
    if d != h * w * f || labels.len() != n {
        return Err(CsnnError::dim("representation shape does not match labels or layout"));
    }
    let mut sums = vec![vec![0.0f64; f]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in reps.data().chunks_exact(d).zip(labels) {
        if y >= classes {
            return Err(CsnnError::Data(format!("label {y} outside {classes} classes")));
        }
        for px in row.chunks_exact(f) {
            for (s, &v) in sums[y].iter_mut().zip(px) {
                *s += v as f64 / (h * w) as f64;
            }
        }
        counts[y] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Lays out per-head feature vectors as grids stacked vertically:
/// `(rows, cols, values)`.
pub fn feature_grid(features: &[f64], heads: usize, grid: (usize, usize)) -> (usize, usize, Vec<f32>) {
    let (gh, gw) = grid;
    debug_assert_eq!(features.len(), heads * gh * gw);
    (heads * gh, gw, features.iter().map(|&v| v as f32).collect())
}

fn step_of(selector: &CheckpointSelector, trace: &crate::trace::RunTrace) -> Result<u64> {
    let steps = selector.select(trace)?;
    match steps[..] {
        [s] => Ok(s),
        _ => Err(CsnnError::Config("export needs exactly one checkpoint".into())),
    }
}

/// Writes `input.ppm|pgm` and `bmu-layer{N}.ppm|pgm` for one test sample.
pub fn cmd_export_bmu(
    run: &Path,
    selector: &CheckpointSelector,
    layer: usize,
    sample: usize,
    overlap: Overlap,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (cfg, trace) = load_run(run)?;
    let step = step_of(selector, &trace)?;
    let model = snapshot::load(&run.join(&trace.checkpoint(step)?.snapshot))?;
    if layer >= model.layers.len() {
        return Err(CsnnError::Config(format!("layer: {layer} out of {} layers", model.layers.len())));
    }
    let data = prepare(&cfg.dataset, cfg.seed())?;
    if sample >= data.test.len() {
        return Err(CsnnError::Config(format!("sample: {sample} out of {} test samples", data.test.len())));
    }
    let x = data.test.images.sample(sample)?;
    let (img, shape) = bmu_image(&model, &x, layer, overlap)?;
    let ext = |c: usize| if c >= 3 { "ppm" } else { "pgm" };
    let input_path = out.join(format!("input.{}", ext(model.input_shape.2)));
    write_image(&input_path, x.data(), model.input_shape)?;
    let bmu_path = out.join(format!("bmu-layer{layer}.{}", ext(shape.2)));
    write_image(&bmu_path, &img, shape)?;
    Ok(vec![input_path, bmu_path])
}

/// Writes utilization, weight-change and class-average statistics of one
/// checkpoint, computed on the test split.
pub fn cmd_export_stats(run: &Path, selector: &CheckpointSelector, out: &Path) -> Result<Vec<PathBuf>> {
    let (cfg, trace) = load_run(run)?;
    let step = step_of(selector, &trace)?;
    let model = snapshot::load(&run.join(&trace.checkpoint(step)?.snapshot))?;
    let data = prepare(&cfg.dataset, cfg.seed())?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = out.join(name);
        csnn_core::io::write_atomic_str(&p, &text)?;
        written.push(p);
        Ok(())
    };

    let util = layer_utilization(&model, &data.test.images, model.spec.batch_size)?;
    let mut text = String::from("layer\tutilization\n");
    for (l, u) in util.iter().enumerate() {
        text.push_str(&format!("{l}\t{u}\n"));
    }
    put("utilization.tsv".into(), text)?;

    let pretext = run.join(PRETEXT_FILE);
    let records = parse_records_csv(
        &std::fs::read_to_string(&pretext).map_err(|e| CsnnError::io(&pretext, e))?,
        &pretext,
    )?;
    let mut text = String::from("step\tlayer\tchange_norm\tutilization\n");
    for r in &records {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", r.step, r.layer, r.change_norm, r.utilization));
    }
    put("weight_change.tsv".into(), text)?;

    let reps = encode(&data.test.images, &model, default_encode_ablation(&model), cfg.seed())?;
    let last = model.layers.last().expect("at least one layer");
    let shape = model.output_shape(model.layers.len())?;
    let avgs = class_averages(&reps, &data.test.labels, data.classes(), shape)?;
    let mut text = String::from("class\tfeature\tvalue\n");
    for (k, a) in avgs.iter().enumerate() {
        if let Some(a) = a {
            for (j, v) in a.iter().enumerate() {
                text.push_str(&format!("{k}\t{j}\t{v}\n"));
            }
        }
    }
    put("class_average.tsv".into(), text)?;
    let present: Vec<(usize, &Vec<f64>)> = avgs.iter().enumerate().filter_map(|(k, a)| a.as_ref().map(|a| (k, a))).collect();
    let mut text = String::from("class_a\tclass_b\tl1\n");
    for (i, &(a, va)) in present.iter().enumerate() {
        for &(b, vb) in &present[i + 1..] {
            text.push_str(&format!("{a}\t{b}\t{}\n", l1_distance(va, vb)));
        }
    }
    put("class_l1.tsv".into(), text)?;

    for &(k, a) in &present {
        let (rows, cols, img) = feature_grid(a, last.heads.len(), last.spec.grid);
        let p = out.join(format!("class-{k}.pgm"));
        write_image(&p, &img, (rows, cols, 1))?;
        written.push(p);
    }
    for (i, &(a, va)) in present.iter().enumerate() {
        for &(b, vb) in &present[i + 1..] {
            let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
            let (rows, cols, img) = feature_grid(&diff, last.heads.len(), last.spec.grid);
            let p = out.join(format!("diff-{a}-{b}.pgm"));
            write_image(&p, &img, (rows, cols, 1))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use csnn_core::network::{global_bmu_gate, utilization};
    use csnn_core::sconv::BmuMap;
    use csnn_core::tensor::extract_patches;
    use csnn_core::{ConvGeometry, Padding};

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn non_overlapping_patches_tile_exactly() {
        let x = ramp(6, 4, 2);
        let geom = ConvGeometry::new((2, 2), (2, 2), Padding::Valid);
        let grid = extract_patches(&x, geom).unwrap();
        let values: Vec<&[f32]> = (0..grid.len()).map(|p| grid.patch(p)).collect();
        for overlap in [Overlap::Average, Overlap::Last] {
            assert_eq!(reconstruct(&grid, (2, 2), (6, 4, 2), &values, overlap).unwrap(), x.data());
        }
    }

    #[test]
    fn overlapping_patches_average_back_to_the_input() {
        let x = ramp(5, 5, 3);
        let geom = ConvGeometry::new((3, 3), (1, 1), Padding::Same);
        let grid = extract_patches(&x, geom).unwrap();
        let values: Vec<&[f32]> = (0..grid.len()).map(|p| grid.patch(p)).collect();
        let back = reconstruct(&grid, (3, 3), (5, 5, 3), &values, Overlap::Average).unwrap();
        for (a, b) in back.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn single_neuron_map_tiles_its_weight() {
        let x = ramp(4, 4, 1);
        let geom = ConvGeometry::new((2, 2), (2, 2), Padding::Valid);
        let grid = extract_patches(&x, geom).unwrap();
        let weight = [0.1f32, 0.2, 0.3, 0.4];
        let values: Vec<&[f32]> = vec![&weight; grid.len()];
        let img = reconstruct(&grid, (2, 2), (4, 4, 1), &values, Overlap::Average).unwrap();
        let expected = [0.1, 0.2, 0.1, 0.2, 0.3, 0.4, 0.3, 0.4, 0.1, 0.2, 0.1, 0.2, 0.3, 0.4, 0.3, 0.4];
        assert_eq!(img, expected);
    }

    #[test]
    fn overwrite_keeps_the_last_patch() {
        let grid = PatchGrid {
            rows: 1,
            cols: 2,
            patch_len: 2,
            channels: 1,
            patches: vec![0.0; 4],
            anchors: vec![(0, 0), (0, 1)],
        };
        let (a, b) = ([1.0f32, 3.0], [5.0f32, 7.0]);
        let avg = reconstruct(&grid, (1, 2), (1, 3, 1), &[&a, &b], Overlap::Average).unwrap();
        let last = reconstruct(&grid, (1, 2), (1, 3, 1), &[&a, &b], Overlap::Last).unwrap();
        assert_eq!(avg, vec![1.0, 4.0, 7.0]);
        assert_eq!(last, vec![1.0, 5.0, 7.0]);
    }

    #[test]
    fn deep_inputs_export_a_depth_three_slice() {
        let img: Vec<f32> = (0..2 * 5).map(|i| i as f32).collect();
        assert_eq!(display_slice(&img, 5), (3, vec![0.0, 1.0, 2.0, 5.0, 6.0, 7.0]));
        assert_eq!(display_slice(&img, 2).1, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn pixel_scaling_spans_the_byte_range() {
        assert_eq!(to_bytes(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
        assert_eq!(to_bytes(&[2.0, 2.0]), vec![0, 0]);
    }

    #[test]
    fn pnm_round_trip() {
        let px: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let bytes = encode_pnm(3, 2, 3, &px).unwrap();
        assert_eq!(decode_pnm(&bytes, Path::new("x")).unwrap(), (3, 2, 3, px.clone()));
        let gray = encode_pnm(6, 1, 1, &px[..6]).unwrap();
        assert!(gray.starts_with(b"P5\n6 1\n255\n"));
        assert!(decode_pnm(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(encode_pnm(1, 1, 2, &[0, 0]).is_err());
    }

    #[test]
    fn one_busy_neuron_of_a_hundred_is_one_percent() {
        let n = 9;
        let bmus = BmuMap {
            rows: 3,
            cols: 3,
            indices: vec![0; n],
            scores: vec![1.0; n],
        };
        let u = utilization(&global_bmu_gate(&[bmus]).unwrap(), 100);
        assert_eq!(u, 0.01);
    }

    #[test]
    fn identical_classes_have_zero_distance() {
        let base: Vec<f32> = (0..2 * 2 * 3).map(|i| (i as f32).sin()).collect();
        let data = [base.clone(), base.clone(), base.iter().map(|v| v + 1.0).collect()].concat();
        let reps = Tensor::new(vec![3, 12], data).unwrap();
        let avgs = class_averages(&reps, &[0, 1, 2], 4, (2, 2, 3)).unwrap();
        let (a, b, c) = (avgs[0].as_ref().unwrap(), avgs[1].as_ref().unwrap(), avgs[2].as_ref().unwrap());
        assert_eq!(l1_distance(a, b), 0.0);
        assert!((l1_distance(a, c) - 3.0).abs() < 1e-6);
        assert!(avgs[3].is_none());
    }
}
