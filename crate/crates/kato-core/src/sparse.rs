//! Sparse linear algebra kernels for the discrete operators.
//!
//! Compressed sparse rows with real and complex matrix-vector products,
//! tridiagonal and banded direct solves (the banded factorization carries
//! partial pivoting so shifted complex-symmetric systems stay stable),
//! conjugate gradients for symmetric positive definite systems, power and
//! Lanczos iterations for extremal eigenvalues, and a Clenshaw-style
//! evaluator for operator polynomials in the Chebyshev basis.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("iterative solve did not converge: residual {residual:.3e} after {iters} iterations")]
    NotConverged { residual: f64, iters: usize },
    #[error("matrix is numerically singular at pivot {0}")]
    Singular(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
}

/// Square sparse matrix in compressed sparse row format.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Builds from coordinate triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Csr {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let j = row[k].0;
                let mut s = 0.0;
                while k < row.len() && row[k].0 == j {
                    s += row[k].1;
                    k += 1;
                }
                col_idx.push(j);
                vals.push(s);
            }
            row_ptr.push(col_idx.len());
        }
        Csr {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = s;
        }
    }

    pub fn matvec_complex(&self, x: &[Complex64], y: &mut [Complex64]) {
        for i in 0..self.n {
            let mut s = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += x[self.col_idx[k]] * self.vals[k];
            }
            y[i] = s;
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.col_idx[k] == j {
                return self.vals[k];
            }
        }
        0.0
    }

    /// Largest absolute asymmetry `max |a_ij - a_ji|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                worst = worst.max((self.vals[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Disc bounds on the real spectrum: `(min, max)` over rows of
    /// `a_ii -/+ sum_{j != i} |a_ij|`.
    pub fn gershgorin(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.n {
            let mut diag = 0.0;
            let mut off = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    diag = self.vals[k];
                } else {
                    off += self.vals[k].abs();
                }
            }
            lo = lo.min(diag - off);
            hi = hi.max(diag + off);
        }
        (lo, hi)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] = self.vals[k];
            }
        }
        m
    }

    /// Half bandwidth: largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0usize;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                b = b.max(self.col_idx[k].abs_diff(i));
            }
        }
        b
    }
}

/// Solves a real tridiagonal system with the forward-elimination sweep.
/// `lower` and `upper` have length `n - 1`.
pub fn thomas_solve(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, SparseError> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom.abs() < 1e-300 {
        return Err(SparseError::Singular(0));
    }
    c[0] = if n > 1 { upper[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i - 1] * c[i - 1];
        if denom.abs() < 1e-300 {
            return Err(SparseError::Singular(i));
        }
        if i < n - 1 {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        let next = d[i + 1];
        d[i] -= c[i] * next;
    }
    Ok(d)
}

/// Complex variant of the tridiagonal sweep.
pub fn thomas_solve_complex(
    lower: &[Complex64],
    diag: &[Complex64],
    upper: &[Complex64],
    rhs: &[Complex64],
) -> Result<Vec<Complex64>, SparseError> {
    let n = diag.len();
    let mut c = vec![Complex64::new(0.0, 0.0); n];
    let mut d = vec![Complex64::new(0.0, 0.0); n];
    let mut denom = diag[0];
    if denom.norm() < 1e-300 {
        return Err(SparseError::Singular(0));
    }
    if n > 1 {
        c[0] = upper[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i - 1] * c[i - 1];
        if denom.norm() < 1e-300 {
            return Err(SparseError::Singular(i));
        }
        if i < n - 1 {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        let next = d[i + 1];
        d[i] -= c[i] * next;
    }
    Ok(d)
}

/// Complex banded LU with partial pivoting, LAPACK-style band storage.
/// Factors once, solves many right-hand sides.
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    /// `(2 kl + ku + 1) x n` band array, row `kl + ku + i - j` holds `(i, j)`.
    ab: Vec<Complex64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    /// Factors `A + shift I` where `A` is a real banded matrix in CSR form.
    pub fn factor_shifted(a: &Csr, scale: f64, shift: Complex64) -> Result<BandedLu, SparseError> {
        let n = a.n;
        let kl = a.bandwidth();
        let ku = kl;
        let ldab = 2 * kl + ku + 1;
        let mut ab = vec![Complex64::new(0.0, 0.0); ldab * n];
        let at = |i: usize, j: usize| -> usize { (kl + ku + i - j) + j * ldab };
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col_idx[k];
                ab[at(i, j)] += Complex64::new(scale * a.vals[k], 0.0);
            }
            ab[at(i, i)] += shift;
        }
        let mut ipiv = vec![0usize; n];
        for col in 0..n {
            let row_hi = (col + kl).min(n - 1);
            let mut piv = col;
            let mut best = ab[at(col, col)].norm();
            for r in (col + 1)..=row_hi {
                let v = ab[at(r, col)].norm();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best < 1e-300 {
                return Err(SparseError::Singular(col));
            }
            ipiv[col] = piv;
            if piv != col {
                let col_hi = (col + kl + ku).min(n - 1);
                for j in col..=col_hi {
                    ab.swap(at(col, j), at(piv, j));
                }
            }
            let pivot = ab[at(col, col)];
            for r in (col + 1)..=row_hi {
                let m = ab[at(r, col)] / pivot;
                ab[at(r, col)] = m;
                let col_hi = (col + kl + ku).min(n - 1);
                for j in (col + 1)..=col_hi {
                    let u = ab[at(col, j)];
                    let idx = at(r, j);
                    ab[idx] -= m * u;
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            ab,
            ipiv,
        })
    }

    pub fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let ldab = 2 * kl + ku + 1;
        let at = |i: usize, j: usize| -> usize { (kl + ku + i - j) + j * ldab };
        let mut x = rhs.to_vec();
        for col in 0..n {
            let piv = self.ipiv[col];
            if piv != col {
                x.swap(col, piv);
            }
            let row_hi = (col + kl).min(n - 1);
            let xc = x[col];
            for r in (col + 1)..=row_hi {
                let m = self.ab[at(r, col)];
                x[r] -= m * xc;
            }
        }
        for col in (0..n).rev() {
            let col_hi = (col + kl + ku).min(n - 1);
            let mut s = x[col];
            for j in (col + 1)..=col_hi {
                s -= self.ab[at(col, j)] * x[j];
            }
            x[col] = s / self.ab[at(col, col)];
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nrm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradients for a symmetric positive definite operator given as
/// a closure.
pub fn cg(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, SparseError> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let b_norm = nrm2(b).max(1e-300);
    let mut rs = dot(&r, &r);
    for it in 0..max_iter {
        if rs.sqrt() <= tol * b_norm {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let alpha = rs / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
        if it == max_iter - 1 {
            break;
        }
    }
    if rs.sqrt() <= tol * b_norm {
        Ok(x)
    } else {
        Err(SparseError::NotConverged {
            residual: rs.sqrt() / b_norm,
            iters: max_iter,
        })
    }
}

/// Estimates the spectral norm of a (possibly rectangular) operator `B`
/// from closures for `B` and `B^T`, by power iteration on `B^T B`.
pub fn operator_norm(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    apply_t: &mut dyn FnMut(&[f64], &mut [f64]),
    n_in: usize,
    n_out: usize,
    iters: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = nrm2(&v).max(1e-300);
    v.iter_mut().for_each(|t| *t /= s);
    let mut w = vec![0.0; n_out];
    let mut back = vec![0.0; n_in];
    let mut sigma = 0.0;
    for _ in 0..iters {
        apply(&v, &mut w);
        apply_t(&w, &mut back);
        let norm_back = nrm2(&back);
        if norm_back < 1e-300 {
            return 0.0;
        }
        sigma = norm_back.sqrt();
        for (vi, bi) in v.iter_mut().zip(&back) {
            *vi = bi / norm_back;
        }
    }
    sigma
}

/// Extremal end selector for the Lanczos iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralEnd {
    Smallest,
    Largest,
}

/// Lanczos with full reorthogonalization; returns the converged extremal
/// Ritz value and its residual bound.
pub fn lanczos_extremal(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    n: usize,
    end: SpectralEnd,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<(f64, f64), SparseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = nrm2(&v);
    v.iter_mut().for_each(|t| *t /= s);
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    for m in 0..max_iter.min(n) {
        apply(&v, &mut w);
        let a = dot(&v, &w);
        alpha.push(a);
        for i in 0..n {
            w[i] -= a * v[i];
        }
        if let Some(b) = beta.last() {
            let prev = &q[q.len() - 1];
            for i in 0..n {
                w[i] -= b * prev[i];
            }
        }
        q.push(v.clone());
        for qk in &q {
            let c = dot(qk, &w);
            for i in 0..n {
                w[i] -= c * qk[i];
            }
        }
        let b = nrm2(&w);
        let (ritz, resid) = tridiag_extremal(&alpha, &beta, b, end);
        if m >= 4 && resid <= tol * ritz.abs().max(1.0) {
            return Ok((ritz, resid));
        }
        if b < 1e-14 {
            return Ok((ritz, resid));
        }
        beta.push(b);
        v = w.iter().map(|t| t / b).collect();
    }
    let (ritz, resid) = tridiag_extremal(&alpha, &beta, 0.0, end);
    if resid <= tol * ritz.abs().max(1.0) {
        Ok((ritz, resid))
    } else {
        Err(SparseError::NotConverged {
            residual: resid,
            iters: max_iter,
        })
    }
}

/// Extremal eigenvalue of the Lanczos tridiagonal together with the
/// residual estimate `|beta_last| |s_last|` of its Ritz pair.
fn tridiag_extremal(alpha: &[f64], beta: &[f64], b_last: f64, end: SpectralEnd) -> (f64, f64) {
    let m = alpha.len();
    let mut t = nalgebra::DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut idx = 0;
    for k in 1..m {
        let better = match end {
            SpectralEnd::Smallest => eig.eigenvalues[k] < eig.eigenvalues[idx],
            SpectralEnd::Largest => eig.eigenvalues[k] > eig.eigenvalues[idx],
        };
        if better {
            idx = k;
        }
    }
    let last_component = eig.eigenvectors[(m - 1, idx)].abs();
    (eig.eigenvalues[idx], b_last * last_component)
}

/// Smallest eigenvalue of a symmetric positive definite operator by inverse
/// power iteration with conjugate-gradient inner solves.
pub fn smallest_eigenvalue(
    a: &Csr,
    outer_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64, SparseError> {
    let n = a.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = nrm2(&v);
    v.iter_mut().for_each(|t| *t /= s);
    let mut lambda = 0.0;
    let mut prev = f64::INFINITY;
    for _ in 0..outer_iters {
        let mut apply = |x: &[f64], y: &mut [f64]| a.matvec(x, y);
        let u = cg(&mut apply, &v, 1e-10, 20 * (n as f64).sqrt() as usize + 200)?;
        let nu = nrm2(&u);
        v = u.iter().map(|t| t / nu).collect();
        let mut av = vec![0.0; n];
        a.matvec(&v, &mut av);
        lambda = dot(&v, &av);
        if (lambda - prev).abs() <= tol * lambda.abs().max(1.0) {
            return Ok(lambda);
        }
        prev = lambda;
    }
    Ok(lambda)
}

/// Evaluates `sum_k c_k T_k(S) v` for a scaled operator `S` given as a
/// closure, by the forward three-term recurrence.
pub fn chebyshev_apply_complex(
    apply_scaled: &mut dyn FnMut(&[Complex64], &mut [Complex64]),
    coeffs: &[Complex64],
    v: &[Complex64],
) -> Vec<Complex64> {
    let n = v.len();
    let mut acc: Vec<Complex64> = v.iter().map(|&x| x * coeffs[0]).collect();
    if coeffs.len() == 1 {
        return acc;
    }
    let mut t_prev = v.to_vec();
    let mut t_cur = vec![Complex64::new(0.0, 0.0); n];
    apply_scaled(v, &mut t_cur);
    for i in 0..n {
        acc[i] += coeffs[1] * t_cur[i];
    }
    let mut scratch = vec![Complex64::new(0.0, 0.0); n];
    for ck in coeffs.iter().skip(2) {
        apply_scaled(&t_cur, &mut scratch);
        for i in 0..n {
            let next = scratch[i] * 2.0 - t_prev[i];
            t_prev[i] = t_cur[i];
            t_cur[i] = next;
            acc[i] += *ck * next;
        }
    }
    acc
}
