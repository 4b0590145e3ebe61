//! One-sided Jacobi SVD and rank-r truncation.

use super::DenseMatrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
/// Columns whose norm falls below `NULL_TOL · σ_max` get a completed singular vector.
const NULL_TOL: f64 = 1e-13;

/// Thin SVD `m = u · diag(sigma) · vt` with `p = min(rows, cols)` triplets.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DenseMatrix {
        let p = self.sigma.len();
        let us = DenseMatrix::from_fn(self.u.rows(), p, |i, j| self.u.get(i, j) * self.sigma[j]);
        us.matmul(&self.vt).expect("factor shapes agree")
    }
}

/// Singular value decomposition with a deterministic sign convention: in each left
/// singular vector the entry of largest magnitude (lowest index on ties) is nonnegative.
pub fn svd(m: &DenseMatrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd input has non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        // mᵀ = U Σ Vᵀ  ⇒  m = V Σ Uᵀ
        let mut f = SvdFactors {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        apply_sign_convention(&mut f);
        Ok(f)
    }
}

/// Jacobi on a matrix with rows ≥ cols. Works on columns stored contiguously.
fn svd_tall(m: &DenseMatrix) -> Result<SvdFactors> {
    let (n, p) = m.shape();
    // Off-diagonal threshold relative to the column norms; below this the dot product is rounding noise.
    let ortho_tol = n as f64 * f64::EPSILON;
    // cols[j] is column j of the working matrix; vcols[j] column j of V.
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| m.get(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..p).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (&cols[i], &cols[j]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for k in 0..n {
                        a += ci[k] * ci[k];
                        b += cj[k] * cj[k];
                        g += ci[k] * cj[k];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= ortho_tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma_max = norms[order[0]];
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut sigma = Vec::with_capacity(p);
    let mut v_sorted: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        v_sorted.push(vcols[j].clone());
        if s > 0.0 && s > NULL_TOL * sigma_max {
            u_cols.push(cols[j].iter().map(|v| v / s).collect());
        } else {
            u_cols.push(vec![0.0; n]);
            deficient.push(slot);
        }
    }
    for slot in deficient {
        u_cols[slot] = complete_basis_vector(&u_cols, slot, n);
    }

    let u = DenseMatrix::from_fn(n, p, |i, j| u_cols[j][i]);
    let vt = DenseMatrix::from_fn(p, p, |i, j| v_sorted[i][j]);
    let mut f = SvdFactors { u, sigma, vt };
    apply_sign_convention(&mut f);
    Ok(f)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for k in 0..ci.len() {
        let a = ci[k];
        let b = cj[k];
        ci[k] = c * a - s * b;
        cj[k] = s * a + c * b;
    }
}

/// Unit vector orthogonal to every nonzero column in `basis`, built by Gram–Schmidt
/// from the first standard basis vector that survives projection.
fn complete_basis_vector(basis: &[Vec<f64>], skip: usize, n: usize) -> Vec<f64> {
    let others: Vec<&Vec<f64>> = basis
        .iter()
        .enumerate()
        .filter(|(k, b)| *k != skip && b.iter().any(|&v| v != 0.0))
        .map(|(_, b)| b)
        .collect();
    for e in 0..n {
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        // two passes of modified Gram–Schmidt
        for _ in 0..2 {
            for b in &others {
                let d: f64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b.iter()) {
                    *x -= d * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
    unreachable!("fewer than n orthonormal vectors always leave a standard basis direction")
}

fn apply_sign_convention(f: &mut SvdFactors) {
    let (n, p) = f.u.shape();
    for j in 0..p {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..n {
            let a = f.u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if f.u.get(best, j) < 0.0 {
            for i in 0..n {
                f.u.set(i, j, -f.u.get(i, j));
            }
            for row in f.vt.row_mut(j) {
                *row = -*row;
            }
        }
    }
}

/// `(B, A)` with `B = U[:, :r]·Σ[:r, :r]` and `A = Vᵀ[:r, :]`.
pub fn truncated_factors(f: &SvdFactors, r: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let p = f.sigma.len();
    if r == 0 || r > p {
        return Err(Error::Rank { rank: r, max: p });
    }
    let b = DenseMatrix::from_fn(f.u.rows(), r, |i, j| f.u.get(i, j) * f.sigma[j]);
    let a = DenseMatrix::from_fn(r, f.vt.cols(), |i, j| f.vt.get(i, j));
    Ok((b, a))
}
