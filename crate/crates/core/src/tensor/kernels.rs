//! Dense row-major matrix multiplication kernels.
//!
//! Each output element is accumulated as `0 + a[i][0]*b[0][j] + a[i][1]*b[1][j] + ...`
//! in ascending inner index, whatever the blocking or thread split. Results are
//! therefore bitwise identical between the sequential and parallel paths and
//! between a full product and any row-slice of it.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const ROW_BLOCK: usize = 4;
const INNER_BLOCK: usize = 256;
const COL_BLOCK: usize = 512;

/// Work (multiply-adds) below which the parallel path stays sequential.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 1 << 16;

/// `out[m×p] += a[m×k] · b[k×p]`, single-threaded.
pub fn matmul_seq(a: &[f64], b: &[f64], out: &mut [f64], k: usize, p: usize) {
    debug_assert_eq!(b.len(), k * p);
    if p == 0 || k == 0 {
        return;
    }
    debug_assert_eq!(a.len() / k, out.len() / p);
    for (a_rows, out_rows) in a.chunks(ROW_BLOCK * k).zip(out.chunks_mut(ROW_BLOCK * p)) {
        row_block(a_rows, b, out_rows, k, p);
    }
}

/// `out[m×p] += a[m×k] · b[k×p]`, split over row blocks with rayon.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], out: &mut [f64], k: usize, p: usize) {
    if p == 0 || k == 0 {
        return;
    }
    let m = out.len() / p;
    if m * k * p < PARALLEL_THRESHOLD || m <= ROW_BLOCK {
        return matmul_seq(a, b, out, k, p);
    }
    let rows_per_task = ROW_BLOCK * 4;
    out.par_chunks_mut(rows_per_task * p)
        .zip(a.par_chunks(rows_per_task * k))
        .for_each(|(out_rows, a_rows)| matmul_seq(a_rows, b, out_rows, k, p));
}

/// Dispatches to the parallel kernel when the `parallel` feature is on.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, p: usize) {
    #[cfg(feature = "parallel")]
    matmul_par(a, b, out, k, p);
    #[cfg(not(feature = "parallel"))]
    matmul_seq(a, b, out, k, p);
}

fn row_block(a: &[f64], b: &[f64], out: &mut [f64], k: usize, p: usize) {
    let rows = out.len() / p;
    for kb in (0..k).step_by(INNER_BLOCK) {
        let ke = (kb + INNER_BLOCK).min(k);
        for jb in (0..p).step_by(COL_BLOCK) {
            let je = (jb + COL_BLOCK).min(p);
            if rows == ROW_BLOCK {
                let (o0, rest) = out.split_at_mut(p);
                let (o1, rest) = rest.split_at_mut(p);
                let (o2, o3) = rest.split_at_mut(p);
                let (o0, o1, o2, o3) = (
                    &mut o0[jb..je],
                    &mut o1[jb..je],
                    &mut o2[jb..je],
                    &mut o3[jb..je],
                );
                for kk in kb..ke {
                    let brow = &b[kk * p + jb..kk * p + je];
                    let (a0, a1, a2, a3) = (a[kk], a[k + kk], a[2 * k + kk], a[3 * k + kk]);
                    for ((((x0, x1), x2), x3), &bv) in o0
                        .iter_mut()
                        .zip(o1.iter_mut())
                        .zip(o2.iter_mut())
                        .zip(o3.iter_mut())
                        .zip(brow)
                    {
                        *x0 += a0 * bv;
                        *x1 += a1 * bv;
                        *x2 += a2 * bv;
                        *x3 += a3 * bv;
                    }
                }
            } else {
                for r in 0..rows {
                    let orow = &mut out[r * p + jb..r * p + je];
                    let arow = &a[r * k..(r + 1) * k];
                    for kk in kb..ke {
                        let av = arow[kk];
                        let brow = &b[kk * p + jb..kk * p + je];
                        for (x, &bv) in orow.iter_mut().zip(brow) {
                            *x += av * bv;
                        }
                    }
                }
            }
        }
    }
}

/// Applies `f` to each `width`-long row of `data`, in parallel when enabled.
pub(crate) fn for_each_row(data: &mut [f64], width: usize, f: impl Fn(&mut [f64]) + Sync + Send) {
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PARALLEL_THRESHOLD {
            data.par_chunks_mut(width).for_each(f);
            return;
        }
    }
    data.chunks_mut(width).for_each(f);
}
