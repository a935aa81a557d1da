//! Dense kernels shared by the layers and probes.
//!
//! All parallel work is split into chunks whose size depends only on the
//! problem shape, never on the number of worker threads, and partial results
//! are merged in chunk order. Results are therefore bit-identical for any
//! thread count.

use rayon::prelude::*;

/// Rows per parallel work item in the matrix kernels.
pub const ROW_CHUNK: usize = 64;

/// Elements per partial sum in [`sum`] and friends.
pub const SUM_CHUNK: usize = 4096;

/// Inner dimensions above this length are accumulated in `f64`.
pub const WIDE_ACCUMULATION: usize = 4096;

/// Dot product. Vectors longer than [`WIDE_ACCUMULATION`] accumulate in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() > WIDE_ACCUMULATION {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum::<f64>() as f32
    } else {
        a.iter().zip(b).map(|(&x, &y)| x * y).sum()
    }
}

/// Sum with a fixed chunked summation tree and `f64` partials.
pub fn sum(values: &[f32]) -> f64 {
    values
        .par_chunks(SUM_CHUNK)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// `out[n×g] = a[n×d] · b[g×d]ᵀ`.
pub fn matmul_nt(a: &[f32], n: usize, d: usize, b: &[f32], g: usize) -> Vec<f32> {
    assert_eq!(a.len(), n * d, "lhs shape");
    assert_eq!(b.len(), g * d, "rhs shape");
    let mut out = vec![0.0f32; n * g];
    if n == 0 || g == 0 {
        return out;
    }
    if d > WIDE_ACCUMULATION {
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        out.par_chunks_mut(ROW_CHUNK * g)
            .zip(a.par_chunks(ROW_CHUNK * d))
            .for_each(|(o, a)| {
                let rows = a.len() / d;
                let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
                let mut o64 = vec![0.0f64; rows * g];
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        d,
                        g,
                        1.0,
                        a64.as_ptr(),
                        d as isize,
                        1,
                        b64.as_ptr(),
                        1,
                        d as isize,
                        0.0,
                        o64.as_mut_ptr(),
                        g as isize,
                        1,
                    );
                }
                for (dst, src) in o.iter_mut().zip(o64) {
                    *dst = src as f32;
                }
            });
    } else {
        out.par_chunks_mut(ROW_CHUNK * g)
            .zip(a.par_chunks(ROW_CHUNK * d))
            .for_each(|(o, a)| {
                let rows = a.len() / d;
                // SAFETY: all pointers cover `rows×d`, `g×d` and `rows×g` elements
                // with the strides given.
                unsafe {
                    matrixmultiply::sgemm(
                        rows,
                        d,
                        g,
                        1.0,
                        a.as_ptr(),
                        d as isize,
                        1,
                        b.as_ptr(),
                        1,
                        d as isize,
                        0.0,
                        o.as_mut_ptr(),
                        g as isize,
                        1,
                    );
                }
            });
    }
    out
}

/// `out[g×d] = h[n×g]ᵀ · p[n×d]`, summed over the `n` rows.
///
/// Rows are processed in chunks of [`ROW_CHUNK`]; chunk partials are added in
/// order with `f64` accumulators.
pub fn matmul_tn(h: &[f32], n: usize, g: usize, p: &[f32], d: usize) -> Vec<f32> {
    assert_eq!(h.len(), n * g, "lhs shape");
    assert_eq!(p.len(), n * d, "rhs shape");
    if n == 0 {
        return vec![0.0; g * d];
    }
    let partials: Vec<Vec<f32>> = h
        .par_chunks(ROW_CHUNK * g)
        .zip(p.par_chunks(ROW_CHUNK * d))
        .map(|(h, p)| {
            let rows = h.len() / g;
            let mut o = vec![0.0f32; g * d];
            unsafe {
                matrixmultiply::sgemm(
                    g,
                    rows,
                    d,
                    1.0,
                    h.as_ptr(),
                    1,
                    g as isize,
                    p.as_ptr(),
                    d as isize,
                    1,
                    0.0,
                    o.as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
            o
        })
        .collect();
    if partials.len() == 1 {
        return partials.into_iter().next().unwrap();
    }
    let mut acc = vec![0.0f64; g * d];
    for part in &partials {
        for (a, &v) in acc.iter_mut().zip(part) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// `out[n×g] = a[n×d] · b[d×g]` (plain row-major product).
pub fn matmul_nn(a: &[f32], n: usize, d: usize, b: &[f32], g: usize) -> Vec<f32> {
    assert_eq!(a.len(), n * d, "lhs shape");
    assert_eq!(b.len(), d * g, "rhs shape");
    let mut out = vec![0.0f32; n * g];
    if n == 0 || g == 0 {
        return out;
    }
    out.par_chunks_mut(ROW_CHUNK * g)
        .zip(a.par_chunks(ROW_CHUNK * d))
        .for_each(|(o, a)| {
            let rows = a.len() / d;
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    d,
                    g,
                    1.0,
                    a.as_ptr(),
                    d as isize,
                    1,
                    b.as_ptr(),
                    g as isize,
                    1,
                    0.0,
                    o.as_mut_ptr(),
                    g as isize,
                    1,
                );
            }
        });
    out
}

/// Strided view of a row-major or transposed `f64` matrix operand.
#[derive(Debug, Clone, Copy)]
pub struct Operand<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Operand<'a> {
    /// `data` holds a `rows×cols` row-major matrix used as is.
    pub fn plain(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "operand shape");
        Operand { data, rows, cols, transposed: false }
    }

    /// `data` holds a `cols×rows` row-major matrix used transposed.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "operand shape");
        Operand { data, rows, cols, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `a · b` in `f64`, parallel over fixed chunks of output rows.
pub fn dgemm(a: Operand, b: Operand) -> Vec<f64> {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f64; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    out.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(|(ci, o)| {
        let rows = o.len() / n;
        // SAFETY: the chunk starts at row `ci·ROW_CHUNK` of `a`; the strides
        // keep every access within the operands' declared shapes.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(ci as isize * ROW_CHUNK as isize * rsa),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                o.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dgemm_handles_every_transpose_combination() {
        let (m, k, n) = (70, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let naive = |get_a: &dyn Fn(usize, usize) -> f64, get_b: &dyn Fn(usize, usize) -> f64| {
            let mut o = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    o[i * n + j] = (0..k).map(|l| get_a(i, l) * get_b(l, j)).sum();
                }
            }
            o
        };
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let want = naive(&|i, l| a[i * k + l], &|l, j| b[l * n + j]);
        assert_eq!(dgemm(Operand::plain(&a, m, k), Operand::plain(&b, k, n)), want);
        assert_eq!(dgemm(Operand::transposed(&at, m, k), Operand::plain(&b, k, n)), want);
        assert_eq!(dgemm(Operand::plain(&a, m, k), Operand::transposed(&bt, k, n)), want);
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn naive_nt(a: &[f32], n: usize, d: usize, b: &[f32], g: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * g];
        for i in 0..n {
            for j in 0..g {
                for k in 0..d {
                    out[i * g + j] += a[i * d + k] as f64 * b[j * d + k] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn nt_matches_naive() {
        for &(n, d, g) in &[(1, 1, 1), (7, 5, 3), (130, 27, 17), (70, 5000, 3)] {
            let a = random(n * d, 1);
            let b = random(g * d, 2);
            let fast = matmul_nt(&a, n, d, &b, g);
            let slow = naive_nt(&a, n, d, &b, g);
            for (x, y) in fast.iter().zip(&slow) {
                assert!((*x as f64 - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn tn_and_nn_match_naive() {
        let (n, g, d) = (150, 9, 11);
        let h = random(n * g, 3);
        let p = random(n * d, 4);
        let out = matmul_tn(&h, n, g, &p, d);
        for i in 0..g {
            for k in 0..d {
                let want: f64 = (0..n).map(|r| h[r * g + i] as f64 * p[r * d + k] as f64).sum();
                assert!((out[i * d + k] as f64 - want).abs() < 1e-4);
            }
        }
        let b = random(d * g, 5);
        let out = matmul_nn(&p, n, d, &b, g);
        for r in 0..n {
            for j in 0..g {
                let want: f64 = (0..d).map(|k| p[r * d + k] as f64 * b[k * g + j] as f64).sum();
                assert!((out[r * g + j] as f64 - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn reductions_do_not_depend_on_thread_count() {
        let v = random(50_000, 9);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let s1 = one.install(|| sum(&v));
        let s4 = four.install(|| sum(&v));
        assert_eq!(s1.to_bits(), s4.to_bits());
        let a = random(300 * 40, 10);
        let b = random(20 * 40, 11);
        let m1 = one.install(|| matmul_tn(&a, 300, 40, &random(300 * 20, 12), 20));
        let m4 = four.install(|| matmul_tn(&a, 300, 40, &random(300 * 20, 12), 20));
        assert_eq!(m1, m4);
        let m1 = one.install(|| matmul_nt(&a, 300, 40, &b, 20));
        let m4 = four.install(|| matmul_nt(&a, 300, 40, &b, 20));
        assert_eq!(m1, m4);
    }
}
