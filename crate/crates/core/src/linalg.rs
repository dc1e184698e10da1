//! Small dense complex Hermitian linear algebra.
//!
//! Everything here works on `M x M` matrices with `M` in the single digits
//! (one matrix per frequency bin), so plain row-major storage and direct
//! factorizations are used throughout.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default diagonal loading, relative to the mean diagonal entry.
pub const DEFAULT_LOADING: f64 = 1e-6;

/// Lower bound for per-bin variances.
pub const PHI_FLOOR: f64 = 1e-10;

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITER: usize = 100;
const PIVOT_RTOL: f64 = 1e-13;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Complex Hermitian matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    dim: usize,
    entries: Vec<Complex64>,
}

impl HermitianMatrix {
    /// Builds a matrix from row-major entries, symmetrizing as `(A + A^H) / 2`.
    pub fn new(dim: usize, entries: Vec<Complex64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {dim}x{dim} matrix",
                entries.len()
            )));
        }
        if entries.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        let mut a = Self { dim, entries };
        a.symmetrize();
        Ok(a)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![ZERO; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = Self::zeros(dim);
        for i in 0..dim {
            a.entries[i * dim + i] = ONE;
        }
        a
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut a = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            a.entries[i * diag.len() + i] = Complex64::new(d, 0.0);
        }
        a
    }

    /// Rank-one matrix `v v^H`.
    pub fn outer(v: &[Complex64]) -> Self {
        let mut a = Self::zeros(v.len());
        a.add_outer(v, 1.0);
        a
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    /// `A += weight * v v^H`.
    pub fn add_outer(&mut self, v: &[Complex64], weight: f64) {
        let n = self.dim;
        for i in 0..n {
            let vi = v[i] * weight;
            for j in i..n {
                self.entries[i * n + j] += vi * v[j].conj();
            }
        }
        self.mirror_upper();
    }

    /// Accumulates `weight * v v^H` into the upper triangle only.
    #[inline]
    pub(crate) fn add_outer_upper(&mut self, v: &[Complex64], weight: f64) {
        let n = self.dim;
        for i in 0..n {
            let vi = v[i] * weight;
            for j in i..n {
                self.entries[i * n + j] += vi * v[j].conj();
            }
        }
    }

    pub(crate) fn mirror_upper(&mut self) {
        let n = self.dim;
        for i in 0..n {
            self.entries[i * n + i].im = 0.0;
            for j in i + 1..n {
                self.entries[j * n + i] = self.entries[i * n + j].conj();
            }
        }
    }

    /// Replaces `A` with `(A + A^H) / 2`.
    pub fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            self.entries[i * n + i].im = 0.0;
            for j in i + 1..n {
                let avg = (self.entries[i * n + j] + self.entries[j * n + i].conj()) * 0.5;
                self.entries[i * n + j] = avg;
                self.entries[j * n + i] = avg.conj();
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.entries.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut a = self.clone();
        a.scale(s);
        a
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.entries[i * self.dim + i].re).sum()
    }

    /// `A + loading * (tr(A) / M) * I`.
    pub fn loaded(&self, loading: f64) -> Self {
        let mut a = self.clone();
        if loading > 0.0 && self.dim > 0 {
            let delta = loading * self.trace() / self.dim as f64;
            for i in 0..self.dim {
                a.entries[i * self.dim + i].re += delta;
            }
        }
        a
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        (0..n)
            .map(|i| {
                self.entries[i * n..(i + 1) * n]
                    .iter()
                    .zip(v)
                    .map(|(a, x)| a * x)
                    .sum()
            })
            .collect()
    }

    /// Real quadratic form `v^H A v`.
    pub fn quad_form(&self, v: &[Complex64]) -> f64 {
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            let row: Complex64 = self.entries[i * n..(i + 1) * n]
                .iter()
                .zip(v)
                .map(|(a, x)| a * x)
                .sum();
            acc += (v[i].conj() * row).re;
        }
        acc
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim;
        (0..n).all(|i| (0..n).all(|j| i == j || self.entries[i * n + j] == ZERO))
    }

    /// Largest `|A_ij - conj(A_ji)|`.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    /// Cholesky factorization `A = L L^H`; fails unless `A` is numerically
    /// positive definite.
    pub fn cholesky(&self) -> Result<Cholesky> {
        let n = self.dim;
        let scale = (0..n)
            .map(|i| self.get(i, i).re.abs())
            .fold(0.0, f64::max);
        let tol = PIVOT_RTOL * scale.max(f64::MIN_POSITIVE);
        let mut l = vec![ZERO; n * n];
        for j in 0..n {
            let mut d = self.get(j, j).re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > tol) {
                return Err(Error::Singular { row: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = Complex64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Cholesky { dim: n, lower: l })
    }

    /// Inverse and log-determinant of the loaded matrix, for repeated
    /// quadratic forms against the same covariance.
    pub fn loaded_inverse(&self, loading: f64) -> Result<HermitianInverse> {
        let chol = self.loaded(loading).cholesky()?;
        Ok(HermitianInverse {
            log_det: chol.log_det(),
            inverse: chol.inverse(),
        })
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<Complex64>,
}

impl Cholesky {
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].re.ln())
            .sum::<f64>()
    }

    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let t = l[i * n + k] * y[k];
                y[i] -= t;
            }
            y[i] /= l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let t = l[k * n + i].conj() * y[k];
                y[i] -= t;
            }
            y[i] /= l[i * n + i];
        }
        y
    }

    pub fn inverse(&self) -> HermitianMatrix {
        let n = self.dim;
        let mut inv = HermitianMatrix::zeros(n);
        let mut e = vec![ZERO; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = ZERO);
            e[j] = ONE;
            let col = self.solve(&e);
            for i in 0..n {
                inv.entries[i * n + j] = col[i];
            }
        }
        inv.symmetrize();
        inv
    }
}

/// Precomputed `A^-1` and `log det A` of a positive definite matrix.
#[derive(Debug, Clone)]
pub struct HermitianInverse {
    pub inverse: HermitianMatrix,
    pub log_det: f64,
}

impl HermitianInverse {
    #[inline]
    pub fn quad_form(&self, y: &[Complex64]) -> f64 {
        self.inverse.quad_form(y)
    }
}

/// Solves `(A + loading * (tr(A)/M) * I) x = b`.
///
/// Cholesky is tried first; indefinite systems fall through to LU with
/// partial pivoting. A numerically singular system is an error.
pub fn hermitian_solve(a: &HermitianMatrix, b: &[Complex64], loading: f64) -> Result<Vec<Complex64>> {
    if b.len() != a.dim() {
        return Err(Error::ShapeMismatch(format!(
            "right-hand side has {} entries for a {}x{} system",
            b.len(),
            a.dim(),
            a.dim()
        )));
    }
    if loading < 0.0 || !loading.is_finite() {
        return Err(Error::InvalidArgument(format!("loading must be >= 0, got {loading}")));
    }
    if b.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("right-hand side".into()));
    }
    let loaded = a.loaded(loading);
    if loaded.is_diagonal() {
        return diagonal_solve(&loaded, b);
    }
    match loaded.cholesky() {
        Ok(chol) => Ok(chol.solve(b)),
        Err(_) => lu_solve(&loaded, b),
    }
}

fn diagonal_solve(a: &HermitianMatrix, b: &[Complex64]) -> Result<Vec<Complex64>> {
    let scale = (0..a.dim()).map(|i| a.get(i, i).re.abs()).fold(0.0, f64::max);
    b.iter()
        .enumerate()
        .map(|(i, bi)| {
            let d = a.get(i, i).re;
            if d.abs() > PIVOT_RTOL * scale {
                Ok(bi / d)
            } else {
                Err(Error::Singular { row: i, pivot: d })
            }
        })
        .collect()
}

fn lu_solve(a: &HermitianMatrix, b: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = a.dim();
    let mut m = a.entries().to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let tol = PIVOT_RTOL * scale;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].norm().total_cmp(&m[j * n + col].norm()))
            .unwrap();
        let pnorm = m[piv * n + col].norm();
        if !(pnorm > tol) {
            return Err(Error::Singular { row: col, pivot: pnorm });
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
            x.swap(piv, col);
        }
        let p = m[col * n + col];
        for r in col + 1..n {
            let factor = m[r * n + col] / p;
            if factor == ZERO {
                continue;
            }
            for k in col..n {
                let t = factor * m[col * n + k];
                m[r * n + k] -= t;
            }
            let t = factor * x[col];
            x[r] -= t;
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for k in r + 1..n {
            s -= m[r * n + k] * x[k];
        }
        x[r] = s / m[r * n + r];
    }
    Ok(x)
}

/// Result of [`principal_eigenvector`].
#[derive(Debug, Clone)]
pub struct Eigenpair {
    /// Unit-norm eigenvector estimate.
    pub vector: Vec<Complex64>,
    /// Rayleigh quotient of `vector`.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Dominant eigenpair of a Hermitian PSD matrix by power iteration.
///
/// The start vector is the column of largest norm (`e1` if the matrix is
/// zero). Iteration stops once the unit iterate moves by less than `1e-8`,
/// or after 100 steps with `converged = false`.
pub fn principal_eigenvector(a: &HermitianMatrix) -> Eigenpair {
    let n = a.dim();
    let mut v = vec![ZERO; n];
    // first column wins ties, so A = I starts (and stays) at e1
    let mut best_col: Option<(usize, f64)> = None;
    for j in 0..n {
        let norm = (0..n).map(|i| a.get(i, j).norm_sqr()).sum::<f64>();
        if best_col.is_none_or(|(_, b)| norm > b) {
            best_col = Some((j, norm));
        }
    }
    match best_col {
        Some((j, norm)) if norm > 0.0 => {
            let s = norm.sqrt().recip();
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = a.get(i, j) * s;
            }
        }
        _ => {
            if n > 0 {
                v[0] = ONE;
            }
        }
    }

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=POWER_MAX_ITER {
        iterations = it;
        let w = a.mul_vec(&v);
        let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            // v lies in the null space; any unit vector is an eigenvector
            converged = true;
            break;
        }
        let w: Vec<Complex64> = w.into_iter().map(|c| c / norm).collect();
        let delta = w
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        v = w;
        if delta < POWER_TOL {
            converged = true;
            break;
        }
    }
    let value = a.quad_form(&v);
    Eigenpair {
        vector: v,
        value,
        converged,
        iterations,
    }
}

/// `log N_c(y; 0, phi * R~)` where `R~` is `R` with diagonal loading.
pub fn log_complex_gaussian(
    y: &[Complex64],
    phi: f64,
    r: &HermitianMatrix,
    loading: f64,
) -> Result<f64> {
    if y.len() != r.dim() {
        return Err(Error::ShapeMismatch(format!(
            "observation has {} channels, covariance is {}x{}",
            y.len(),
            r.dim(),
            r.dim()
        )));
    }
    if !phi.is_finite() || phi <= 0.0 {
        return Err(Error::InvalidArgument(format!("variance must be positive, got {phi}")));
    }
    if y.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("observation".into()));
    }
    let inv = r.loaded_inverse(loading)?;
    Ok(log_density_with(y, phi.max(PHI_FLOOR), &inv))
}

#[inline]
pub(crate) fn log_density_with(y: &[Complex64], phi: f64, inv: &HermitianInverse) -> f64 {
    let m = y.len() as f64;
    -m * PI.ln() - m * phi.ln() - inv.log_det - inv.quad_form(y) / phi
}
