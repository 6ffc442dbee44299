//! Full singular value decomposition via one-sided Jacobi rotations.
//!
//! Column pairs of the working matrix are rotated until mutually orthogonal;
//! column norms become the singular values and the accumulated rotations give
//! V. U is completed to a full m x m orthonormal basis so rectangular and
//! rank-deficient inputs always yield full factors.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Full factorization `a = u * diag_embed(sigma) * v^T`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m x m orthogonal.
    pub u: Matrix,
    /// min(m, n) singular values, descending, non-negative.
    pub sigma: Vec<f64>,
    /// n x n orthogonal.
    pub v: Matrix,
}

/// Relative off-diagonal tolerance for the Jacobi sweep.
const JACOBI_TOL: f64 = 1e-15;

/// Columns with norm below `RANK_TOL * sigma_max` are treated as numerically
/// zero and their left vectors come from basis completion.
const RANK_TOL: f64 = 1e-13;

pub fn svd_full(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m >= n {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.transpose())?;
        Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

/// Embed `sigma` on the main diagonal of a rows x cols zero matrix.
pub fn diag_embed(sigma: &[f64], rows: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for (i, &s) in sigma.iter().enumerate().take(rows.min(cols)) {
        out.set(i, i, s);
    }
    out
}

fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);

    // Work columns of A and of V.
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col = vec![0.0; n];
            col[j] = 1.0;
            col
        })
        .collect();

    let cap = 100 * m.max(n);
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = column_moments(&w[p], &w[q]);
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps > cap {
            return Err(Error::SvdNonConvergence { sweeps });
        }
    }

    // Column norms are the singular values; order them descending.
    let norms: Vec<f64> = w.iter().map(|col| sum_sq(col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let zero_cut = RANK_TOL * sigma_max;

    let mut u_cols: Vec<Option<Vec<f64>>> = vec![None; m];
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > zero_cut && norms[j] > 0.0 {
            let inv = 1.0 / norms[j];
            u_cols[slot] = Some(w[j].iter().map(|x| x * inv).collect());
        }
    }
    complete_basis(&mut u_cols, m);

    let mut u = Matrix::zeros(m, m);
    for (j, col) in u_cols.iter().enumerate() {
        let col = col.as_ref().expect("basis completion fills every column");
        for i in 0..m {
            u.set(i, j, col[i]);
        }
    }
    let mut v_mat = Matrix::zeros(n, n);
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..n {
            v_mat.set(i, slot, v[j][i]);
        }
    }

    fix_signs(&mut u, &mut v_mat, n);

    Ok(SvdResult {
        u,
        sigma,
        v: v_mat,
    })
}

fn column_moments(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (a, b) in p.iter().zip(q) {
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (left, right) = cols.split_at_mut(hi);
    let (cp, cq) = if p < q {
        (&mut left[lo], &mut right[0])
    } else {
        (&mut right[0], &mut left[lo])
    };
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

fn sum_sq(col: &[f64]) -> f64 {
    col.iter().map(|x| x * x).sum()
}

/// Fill the `None` slots with unit vectors orthogonal to every filled column.
/// Candidates are canonical basis vectors; at each step the one with the
/// largest residual after projection is taken (ties to the lowest index).
fn complete_basis(cols: &mut [Option<Vec<f64>>], dim: usize) {
    loop {
        let missing = match cols.iter().position(|c| c.is_none()) {
            Some(i) => i,
            None => return,
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[k] = 1.0;
            orthogonalize(&mut cand, cols);
            orthogonalize(&mut cand, cols);
            let norm = sum_sq(&cand).sqrt();
            if best.as_ref().map_or(true, |(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, mut vec) = best.expect("dim > 0");
        debug_assert!(norm > 0.0, "no independent canonical direction left");
        let inv = 1.0 / norm;
        vec.iter_mut().for_each(|x| *x *= inv);
        cols[missing] = Some(vec);
    }
}

fn orthogonalize(cand: &mut [f64], cols: &[Option<Vec<f64>>]) {
    for col in cols.iter().flatten() {
        let mut dot = 0.0;
        for (c, u) in cand.iter().zip(col) {
            dot += c * u;
        }
        for (c, u) in cand.iter_mut().zip(col) {
            *c -= dot * u;
        }
    }
}

/// Make the first nonzero component of each U column non-negative, flipping
/// the paired V column so the product is unchanged.
fn fix_signs(u: &mut Matrix, v: &mut Matrix, n: usize) {
    let m = u.rows();
    for j in 0..m {
        let mut flip = false;
        for i in 0..m {
            let x = u.get(i, j);
            if x != 0.0 {
                flip = x < 0.0;
                break;
            }
        }
        if flip {
            for i in 0..m {
                u.set(i, j, -u.get(i, j));
            }
            if j < n {
                for i in 0..v.rows() {
                    v.set(i, j, -v.get(i, j));
                }
            }
        }
    }
}
