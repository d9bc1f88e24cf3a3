//! Blocked pairwise kernel sums over row-major particle tables.
//!
//! Blocks are independent and combined in a fixed order, so results do not
//! depend on the number of worker threads.

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

const ROWS: usize = 256;

fn view(rows: &[f64], d: usize) -> DMatrixView<'_, f64> {
    DMatrixView::from_slice(rows, d, rows.len() / d)
}

/// `out_i += scale · Σ_j wb_j f(a_i·b_j) b_j`.
pub(crate) fn kernel_combine<F>(
    a: &[f64],
    b: &[f64],
    d: usize,
    wb: Option<&[f64]>,
    scale: f64,
    f: F,
    out: &mut [f64],
) where
    F: Fn(f64) -> f64 + Sync,
{
    let bv = view(b, d);
    out.par_chunks_mut(ROWS * d)
        .zip(a.par_chunks(ROWS * d))
        .for_each(|(o, ablk)| {
            let av = view(ablk, d);
            let mut g: DMatrix<f64> = bv.transpose() * av;
            // g is mb × ma_blk; column i holds a_i·b_j for all j.
            for (idx, v) in g.iter_mut().enumerate() {
                let j = idx % bv.ncols();
                let w = wb.map_or(1.0, |wb| wb[j]);
                *v = scale * w * f(*v);
            }
            let prod = bv * g;
            o.iter_mut().zip(prod.iter()).for_each(|(x, p)| *x += p);
        });
}

/// `Σ_{i,j} wa_i wb_j f(a_i·b_j)`.
pub(crate) fn kernel_sum<F>(
    a: &[f64],
    b: &[f64],
    d: usize,
    wa: Option<&[f64]>,
    wb: Option<&[f64]>,
    f: F,
) -> f64
where
    F: Fn(f64) -> f64 + Sync,
{
    let bv = view(b, d);
    let parts: Vec<f64> = a
        .par_chunks(ROWS * d)
        .enumerate()
        .map(|(blk, ablk)| {
            let av = view(ablk, d);
            let g: DMatrix<f64> = bv.transpose() * av;
            let mb = bv.ncols();
            let mut total = 0.0;
            for (i, col) in g.column_iter().enumerate() {
                let wi = wa.map_or(1.0, |wa| wa[blk * ROWS + i]);
                let mut s = 0.0;
                for (j, &v) in col.iter().enumerate().take(mb) {
                    s += wb.map_or(1.0, |wb| wb[j]) * f(v);
                }
                total += wi * s;
            }
            total
        })
        .collect();
    parts.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_sum(a: &[f64], b: &[f64], d: usize, f: impl Fn(f64) -> f64) -> f64 {
        let mut s = 0.0;
        for ai in a.chunks(d) {
            for bj in b.chunks(d) {
                s += f(ai.iter().zip(bj).map(|(x, y)| x * y).sum());
            }
        }
        s
    }

    #[test]
    fn blocked_sums_match_naive() {
        let d = 3;
        let a: Vec<f64> = (0..3 * 700).map(|k| ((k * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let b: Vec<f64> = (0..3 * 300).map(|k| ((k * 13 % 71) as f64 / 35.0) - 1.0).collect();
        let f = |z: f64| z * z * z + 0.5 * z;
        let got = kernel_sum(&a, &b, d, None, None, f);
        let want = naive_sum(&a, &b, d, f);
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));

        let wb: Vec<f64> = (0..300).map(|j| 1.0 + j as f64 / 300.0).collect();
        let mut out = vec![0.0; a.len()];
        kernel_combine(&a, &b, d, Some(&wb), 0.5, f, &mut out);
        for (i, ai) in a.chunks(d).enumerate() {
            let mut want = [0.0; 3];
            for (j, bj) in b.chunks(d).enumerate() {
                let s: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                for k in 0..d {
                    want[k] += 0.5 * wb[j] * f(s) * bj[k];
                }
            }
            for k in 0..d {
                assert!((out[i * d + k] - want[k]).abs() < 1e-9);
            }
        }
    }
}
