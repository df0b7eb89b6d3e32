// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense 64-bit SVD: Householder QR with column pivoting followed by
//! one-sided (Hestenes) Jacobi on the transposed triangular factor.

use crate::error::{DlensError, Result};

/// Column-major dense matrix in 64-bit precision.
#[derive(Debug, Clone)]
pub(crate) struct ColMat {
    pub rows: usize,
    pub cols: Vec<Vec<f64>>,
}

impl ColMat {
    pub fn from_row_major(rows: usize, cols: usize, data: &[f32]) -> Self {
        let mut c = vec![vec![0.0f64; rows]; cols];
        for i in 0..rows {
            for j in 0..cols {
                c[j][i] = data[i * cols + j] as f64;
            }
        }
        ColMat { rows, cols: c }
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn transpose(&self) -> Self {
        let mut c = vec![vec![0.0f64; self.ncols()]; self.rows];
        for (j, col) in self.cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                c[i][j] = v;
            }
        }
        ColMat {
            rows: self.ncols(),
            cols: c,
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &ColMat) -> ColMat {
        debug_assert_eq!(self.ncols(), other.rows);
        let cols = other
            .cols
            .iter()
            .map(|oc| {
                let mut out = vec![0.0f64; self.rows];
                for (k, &w) in oc.iter().enumerate() {
                    if w != 0.0 {
                        for (o, a) in out.iter_mut().zip(&self.cols[k]) {
                            *o += w * a;
                        }
                    }
                }
                out
            })
            .collect();
        ColMat { rows: self.rows, cols }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin QR with column pivoting of an `m × n` matrix (`m ≥ n`):
/// `A[:, perm] = Q · R`.
pub(crate) struct PivotedQr {
    pub q: ColMat,
    /// `n × n` upper triangular.
    pub r: ColMat,
    pub perm: Vec<usize>,
}

pub(crate) fn pivoted_qr(a: &ColMat) -> PivotedQr {
    let m = a.rows;
    let n = a.ncols();
    debug_assert!(m >= n);
    let mut cols = a.cols.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let (mut best, mut best_norm) = (k, -1.0);
        for (j, col) in cols.iter().enumerate().skip(k) {
            let nrm = dot(&col[k..], &col[k..]);
            if nrm > best_norm {
                best = j;
                best_norm = nrm;
            }
        }
        cols.swap(k, best);
        perm.swap(k, best);
        let x = &cols[k][k..];
        let norm = best_norm.max(0.0).sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for col in cols.iter_mut().skip(k + 1) {
            let f = 2.0 * dot(&v, &col[k..]) / vv;
            for (c, vi) in col[k..].iter_mut().zip(&v) {
                *c -= f * vi;
            }
        }
        cols[k][k] = alpha;
        for c in cols[k][k + 1..].iter_mut() {
            *c = 0.0;
        }
        let scale = (2.0 / vv).sqrt();
        reflectors.push(v.into_iter().map(|vi| vi * scale).collect());
    }
    let r = ColMat {
        rows: n,
        cols: cols.iter().map(|c| c[..n].to_vec()).collect(),
    };
    // Q = H_0 H_1 … H_{n-1} applied to the first n unit vectors.
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for col in q_cols.iter_mut() {
            let f = dot(v, &col[k..]);
            if f != 0.0 {
                for (c, vi) in col[k..].iter_mut().zip(v) {
                    *c -= f * vi;
                }
            }
        }
    }
    PivotedQr {
        q: ColMat { rows: m, cols: q_cols },
        r,
        perm,
    }
}

/// One-sided Jacobi: orthogonalise the columns of `w` in place, returning the
/// accumulated rotation `V` such that `w_in · V = w_out`.
pub(crate) fn one_sided_jacobi(w: &mut ColMat, max_sweeps: usize) -> Result<ColMat> {
    let n = w.ncols();
    let mut v_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = 1e-15;
    let mut norms: Vec<f64> = w.cols.iter().map(|c| dot(c, c)).collect();
    for _sweep in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&w.cols[p], &w.cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w.cols, p, q, c, s);
                rotate(&mut v_cols, p, q, c, s);
                norms[p] = dot(&w.cols[p], &w.cols[p]);
                norms[q] = dot(&w.cols[q], &w.cols[q]);
            }
        }
        if !rotated {
            return Ok(ColMat { rows: n, cols: v_cols });
        }
    }
    Err(DlensError::Convergence(format!(
        "Jacobi SVD did not converge within {max_sweeps} sweeps"
    )))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Thin SVD in 64-bit: columns of `u` and `v` are singular vectors, `sigma`
/// non-increasing. Directions with `σ ≤ rank_tol · σ_1` are dropped.
pub(crate) struct Svd64 {
    pub u: ColMat,
    pub sigma: Vec<f64>,
    pub v: ColMat,
}

pub(crate) const MAX_SWEEPS: usize = 80;

pub(crate) fn svd64(a: &ColMat, rank_tol: f64) -> Result<Svd64> {
    if a.rows < a.ncols() {
        let t = svd64(&a.transpose(), rank_tol)?;
        return Ok(Svd64 {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let n = a.ncols();
    if a.cols.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DlensError::NonFinite("SVD input contains NaN or Inf".into()));
    }
    let qr = pivoted_qr(a);
    // Rᵀ · V_x = U_x Σ, hence A[:, perm] = (Q V_x) Σ U_xᵀ.
    let mut w = qr.r.transpose();
    let v_x = one_sided_jacobi(&mut w, MAX_SWEEPS)?;
    let mut order: Vec<(usize, f64)> = w.cols.iter().map(|c| dot(c, c).sqrt()).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let s1 = order.first().map(|o| o.1).unwrap_or(0.0);
    let keep: Vec<(usize, f64)> = order
        .into_iter()
        .filter(|&(_, s)| s > 0.0 && s >= rank_tol * s1)
        .collect();
    let sel = ColMat {
        rows: n,
        cols: keep.iter().map(|&(i, _)| v_x.cols[i].clone()).collect(),
    };
    let u = qr.q.matmul(&sel);
    let v_cols = keep
        .iter()
        .map(|&(i, s)| {
            let mut col = vec![0.0; n];
            for (row, &val) in w.cols[i].iter().enumerate() {
                col[qr.perm[row]] = val / s;
            }
            col
        })
        .collect();
    Ok(Svd64 {
        u,
        sigma: keep.iter().map(|&(_, s)| s).collect(),
        v: ColMat { rows: n, cols: v_cols },
    })
}

/// SVD of `L · Rᵀ` from its thin factors without forming the product.
pub(crate) fn svd64_factored(left: &ColMat, right: &ColMat, rank_tol: f64) -> Result<Svd64> {
    let p = left.ncols();
    debug_assert_eq!(p, right.ncols());
    let unpivot = |qr: PivotedQr| {
        // A[:, perm] = Q R  ⇒  A = Q · R̃ with R̃[:, perm[j]] = R[:, j].
        let mut rt = vec![Vec::new(); p];
        for (j, col) in qr.r.cols.into_iter().enumerate() {
            rt[qr.perm[j]] = col;
        }
        (qr.q, ColMat { rows: p, cols: rt })
    };
    if left.rows < p || right.rows < p {
        let dense = left.matmul(&right.transpose());
        return svd64(&dense, rank_tol);
    }
    let (ql, rl) = unpivot(pivoted_qr(left));
    let (qr_, rr) = unpivot(pivoted_qr(right));
    let core = rl.matmul(&rr.transpose());
    let small = svd64(&core, rank_tol)?;
    Ok(Svd64 {
        u: ql.matmul(&small.u),
        sigma: small.sigma,
        v: qr_.matmul(&small.v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_rows(rows: &[&[f64]]) -> ColMat {
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
        ColMat::from_row_major(rows.len(), rows[0].len(), &data)
    }

    #[test]
    fn qr_reconstructs() {
        let a = from_rows(&[&[1.0, 2.0, 0.5], &[3.0, -1.0, 2.0], &[0.0, 4.0, 1.0], &[2.0, 2.0, 2.0]]);
        let qr = pivoted_qr(&a);
        let back = qr.q.matmul(&qr.r);
        for (j, &pj) in qr.perm.iter().enumerate() {
            for i in 0..4 {
                assert!((back.cols[j][i] - a.cols[pj][i]).abs() < 1e-12);
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&qr.q.cols[i], &qr.q.cols[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            for k in i + 1..3 {
                assert_eq!(qr.r.cols[i][k], 0.0);
            }
        }
        // Pivoting yields non-increasing diagonal magnitudes.
        assert!(qr.r.cols[0][0].abs() >= qr.r.cols[1][1].abs());
        assert!(qr.r.cols[1][1].abs() >= qr.r.cols[2][2].abs());
    }

    #[test]
    fn wide_and_rank_deficient() {
        let a = from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]]);
        let s = svd64(&a, 1e-9).unwrap();
        assert_eq!(s.sigma.len(), 1);
        assert!((s.sigma[0] - (30.0f64 * 5.0).sqrt()).abs() < 1e-9);
        assert_eq!((s.u.rows, s.v.rows), (2, 4));
    }

    #[test]
    fn factored_matches_dense() {
        let l = from_rows(&[&[1.0, 0.5], &[0.0, 2.0], &[3.0, -1.0], &[1.0, 1.0]]);
        let r = from_rows(&[&[2.0, 1.0], &[0.0, -1.0], &[1.5, 0.5]]);
        let f = svd64_factored(&l, &r, 1e-9).unwrap();
        let d = svd64(&l.matmul(&r.transpose()), 1e-9).unwrap();
        assert_eq!(f.sigma.len(), d.sigma.len());
        for (a, b) in f.sigma.iter().zip(&d.sigma) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let a = ColMat::from_row_major(3, 2, &[0.0; 6]);
        assert!(svd64(&a, 1e-6).unwrap().sigma.is_empty());
    }
}
