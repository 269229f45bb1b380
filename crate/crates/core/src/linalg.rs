//! Small dense linear algebra for the auxiliary subproblem
//! `max tr(AᵀX) s.t. X1 = 0, XXᵀ = N·I`.
//!
//! Everything here works on `k × k` Gram matrices or streams over the long
//! `N` axis row by row, so the cost is `O(k²N + k³)` even when `N` is in the
//! tens of thousands.

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::par::{self, Exec};

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("basis columns are not orthonormal (max Gram error {error:e})")]
    NotOrthonormal { error: f64 },
    #[error("cannot complete {have} vectors in dimension {dim}")]
    TooManyColumns { have: usize, dim: usize },
    #[error("random completion stayed rank-deficient after {retries} retries")]
    RankDeficient { retries: usize },
    #[error("auxiliary solve needs at least 2 columns, got {0}")]
    TooFewColumns(usize),
    #[error("eigensolver did not converge")]
    NoConvergence,
    #[error("non-finite value in input")]
    NonFinite,
}

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(l);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Σᵢⱼ selfᵢⱼ · otherᵢⱼ, i.e. `tr(selfᵀ other)`.
    pub fn frobenius_inner(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    /// `self · selfᵀ`, computed row pair by row pair.
    pub fn gram_rows(&self, exec: Exec) -> DenseMatrix {
        let k = self.rows;
        let upper: Vec<Vec<f64>> = par::map_indices(exec, k, |i| {
            let ri = self.row(i);
            (i..k).map(|j| dot(ri, self.row(j))).collect()
        });
        let mut g = DenseMatrix::zeros(k, k);
        for (i, vals) in upper.into_iter().enumerate() {
            for (o, v) in vals.into_iter().enumerate() {
                g[(i, i + o)] = v;
                g[(i + o, i)] = v;
            }
        }
        g
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Subtracts each row's mean from that row.
pub fn row_center(a: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    if a.cols == 0 {
        return out;
    }
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Eigenvalues in descending order with matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

/// Symmetric eigendecomposition by Householder tridiagonalisation followed by
/// implicit QL iterations.
pub fn sym_eigen(s: &DenseMatrix) -> Result<EigenResult, LinalgError> {
    let n = s.rows;
    if s.cols != n {
        return Err(LinalgError::NotSquare {
            rows: s.rows,
            cols: s.cols,
        });
    }
    if !s.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let scale = s.max_abs();
    let asymmetry = s.max_abs_diff(&s.transpose());
    if asymmetry > 1e-9 * scale {
        return Err(LinalgError::NotSymmetric { asymmetry });
    }
    if n == 0 {
        return Ok(EigenResult {
            eigenvalues: vec![],
            eigenvectors: DenseMatrix::zeros(0, 0),
        });
    }
    let mut v = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    // QL rotates pairs of columns of V; work on rows of Vᵀ instead.
    let mut vt = v.transpose();
    tridiagonal_ql(&mut vt, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let eigenvalues = order.iter().map(|&i| d[i]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, j| vt[(order[j], i)]);
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Householder reduction to tridiagonal form. On return `v` holds the
/// accumulated orthogonal transform, `d` the diagonal and `e` the
/// subdiagonal in `e[1..]`.
fn tridiagonalize(v: &mut DenseMatrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in j + 1..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL with Wilkinson-style shifts on a symmetric tridiagonal
/// matrix. `vt` holds eigenvectors as rows and is rotated in place.
fn tridiagonal_ql(vt: &mut DenseMatrix, d: &mut [f64], e: &mut [f64]) -> Result<(), LinalgError> {
    const MAX_ITER: usize = 100;
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_ITER {
                    return Err(LinalgError::NoConvergence);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = vt.data.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_next = &mut hi[..n];
                    for (a, b) in row_i.iter_mut().zip(row_next.iter_mut()) {
                        let hb = *b;
                        *b = s * *a + c * hb;
                        *a = c * *a - s * hb;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Orthonormal columns completing `b` (`k × p`, orthonormal columns) to a
/// basis of `ℝᵏ`. Returns `k × (k − p)`.
pub fn orthonormal_complete(b: &DenseMatrix, seed: u64) -> Result<DenseMatrix, LinalgError> {
    let extra = b.rows.checked_sub(b.cols).ok_or(LinalgError::TooManyColumns {
        have: b.cols,
        dim: b.rows,
    })?;
    orthonormal_extend(b, extra, seed)
}

/// Like [`orthonormal_complete`] but returns only `extra` new columns.
pub fn orthonormal_extend(b: &DenseMatrix, extra: usize, seed: u64) -> Result<DenseMatrix, LinalgError> {
    let gram = b.transpose().matmul(b);
    let error = gram.max_abs_diff(&DenseMatrix::identity(b.cols));
    if error > 1e-8 {
        return Err(LinalgError::NotOrthonormal { error });
    }
    let basis: Vec<Vec<f64>> = (0..b.cols).map(|j| b.column(j)).collect();
    let rows = extend_orthonormal_rows(&basis, b.rows, extra, seed)?;
    Ok(DenseMatrix::from_fn(b.rows, extra, |i, j| rows[j][i]))
}

/// Draws `extra` unit vectors of length `dim` orthogonal to `basis` and to
/// each other: Gaussian draws, two passes of modified Gram–Schmidt, redraw if
/// the residual collapses.
fn extend_orthonormal_rows(
    basis: &[Vec<f64>],
    dim: usize,
    extra: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, LinalgError> {
    const RETRIES: usize = 8;
    if basis.len() + extra > dim {
        return Err(LinalgError::TooManyColumns {
            have: basis.len() + extra,
            dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(extra);
    for _ in 0..extra {
        let mut accepted = None;
        for _ in 0..=RETRIES {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let start = dot(&v, &v).sqrt();
            for _ in 0..2 {
                for q in basis.iter().chain(out.iter()) {
                    let c = dot(&v, q);
                    v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 * start {
                v.iter_mut().for_each(|x| *x /= norm);
                accepted = Some(v);
                break;
            }
        }
        out.push(accepted.ok_or(LinalgError::RankDeficient { retries: RETRIES })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AuxOptions {
    /// Eigenvalues of `ĀĀᵀ` at or below this count as zero. `None` uses
    /// `1e−8 · λ_max · k`.
    pub rank_tol: Option<f64>,
    /// Seed for the null-space completion.
    pub seed: u64,
    pub exec: Exec,
}

#[derive(Debug, Clone)]
pub struct AuxSolution {
    pub x: DenseMatrix,
    /// Number of eigenvalues above the rank tolerance.
    pub rank: usize,
    /// `√N · Σ √λᵢ` over the retained eigenvalues.
    pub optimal_value: f64,
    /// False when `k > N − 1`: no `X` with `X1 = 0` can then have
    /// `XXᵀ = N·I`, and the returned `X` satisfies `XXᵀ = N·P` for a rank
    /// `N − 1` projector `P` instead.
    pub feasible: bool,
}

/// Maximises `tr(AᵀX)` over `{X : X1 = 0, XXᵀ = N·I}` for `A` of shape `k × N`.
///
/// With `Ā = A − mean`, `ĀĀᵀ = M Σ² Mᵀ` and `N_f = Āᵀ M Σ⁻¹`, the maximiser is
/// `X = √N [M M̂][N_f N̂]ᵀ` where `M̂` spans the null eigenvectors and `N̂`
/// completes `[N_f, 1/√N]` with seeded random orthonormal vectors. The optimum
/// is `√N · ‖Ā‖_*`.
pub fn solve_orthogonal_auxiliary(a: &DenseMatrix, opts: &AuxOptions) -> Result<AuxSolution, LinalgError> {
    let k = a.rows;
    let n = a.cols;
    if n < 2 {
        return Err(LinalgError::TooFewColumns(n));
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let centered = row_center(a);
    let gram = centered.gram_rows(opts.exec);
    let eig = sym_eigen(&gram)?;
    let lambda_max = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let tol = opts.rank_tol.unwrap_or(1e-8 * lambda_max * k as f64);
    let rank = eig.eigenvalues.iter().take_while(|&&l| l > tol).count();
    let sigma: Vec<f64> = eig.eigenvalues[..rank].iter().map(|l| l.sqrt()).collect();

    // Right factors as rows of length N: first `rank` rows are N_fᵀ.
    let u = &eig.eigenvectors;
    let mut right: Vec<Vec<f64>> = par::map_indices(opts.exec, rank, |c| {
        let mut row = vec![0.0; n];
        for i in 0..k {
            let w = u[(i, c)] / sigma[c];
            row.iter_mut()
                .zip(centered.row(i))
                .for_each(|(o, &v)| *o += w * v);
        }
        row
    });

    let usable = k.min(n - 1);
    let extra = usable.saturating_sub(rank);
    if extra > 0 {
        let mut basis = right.clone();
        basis.push(vec![1.0 / (n as f64).sqrt(); n]);
        let completion = extend_orthonormal_rows(&basis, n, extra, opts.seed)?;
        right.extend(completion);
    }
    if usable < k {
        log::warn!(
            "auxiliary solve: k = {k} exceeds N − 1 = {}; orthogonality constraint relaxed to rank {usable}",
            n - 1
        );
    }

    let scale = (n as f64).sqrt();
    let used = right.len();
    let rows: Vec<Vec<f64>> = par::map_indices(opts.exec, k, |i| {
        let mut row = vec![0.0; n];
        for (c, r) in right.iter().enumerate().take(used) {
            let w = scale * u[(i, c)];
            row.iter_mut().zip(r).for_each(|(o, &v)| *o += w * v);
        }
        row
    });
    let x = DenseMatrix::from_rows(&rows);
    Ok(AuxSolution {
        x,
        rank,
        optimal_value: scale * sigma.iter().sum::<f64>(),
        feasible: usable == k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| 0.0).map_with(|_| rng.random_range(-1.0..1.0))
    }

    impl DenseMatrix {
        fn map_with(mut self, mut f: impl FnMut(f64) -> f64) -> Self {
            self.data.iter_mut().for_each(|v| *v = f(*v));
            self
        }
    }

    fn random_signs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| 0.0)
            .map_with(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
    }

    /// Singular values from one-sided Jacobi on the columns of `aᵀ`; no
    /// eigendecomposition involved.
    fn singular_values_jacobi(a: &DenseMatrix) -> Vec<f64> {
        let mut cols: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
        for _ in 0..100 {
            let mut off = 0.0f64;
            for p in 0..cols.len() {
                for q in p + 1..cols.len() {
                    let alpha = dot(&cols[p], &cols[p]);
                    let beta = dot(&cols[q], &cols[q]);
                    let gamma = dot(&cols[p], &cols[q]);
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    let (cp, cq) = (cols[p].clone(), cols[q].clone());
                    for i in 0..cp.len() {
                        cols[p][i] = c * cp[i] - s * cq[i];
                        cols[q][i] = s * cp[i] + c * cq[i];
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
        }
        cols.iter().map(|c| dot(c, c).sqrt()).collect()
    }

    #[test]
    fn row_center_examples() {
        let a = DenseMatrix::from_rows(&[[1.0, -1.0]]);
        assert_eq!(row_center(&a), a);
        let a = DenseMatrix::from_rows(&[[1.0, 1.0]]);
        assert_eq!(row_center(&a), DenseMatrix::zeros(1, 2));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 4, 10);
        let c = row_center(&a);
        for s in c.row_sums() {
            assert!(s.abs() <= 1e-9 * 10.0 * a.max_abs());
        }
        // A − Ā = μ 1ᵀ: every column equal.
        for i in 0..4 {
            let d0 = a[(i, 0)] - c[(i, 0)];
            for j in 1..10 {
                assert!((a[(i, j)] - c[(i, j)] - d0).abs() < 1e-12);
            }
        }
    }

    fn check_eigen(s: &DenseMatrix, r: &EigenResult) {
        let u = &r.eigenvectors;
        let lam = DenseMatrix::from_fn(u.rows(), u.cols(), |i, j| if i == j { r.eigenvalues[i] } else { 0.0 });
        let resid = s.matmul(u).max_abs_diff(&u.matmul(&lam));
        assert!(resid <= 1e-8 * (1.0 + s.max_abs()), "residual {resid}");
        let orth = u.transpose().matmul(u).max_abs_diff(&DenseMatrix::identity(u.cols()));
        assert!(orth <= 1e-10, "orthogonality {orth}");
        assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eigen_examples() {
        let r = sym_eigen(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0, 1.0, 1.0]);

        let s = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]);
        let r = sym_eigen(&s).unwrap();
        assert_eq!(r.eigenvalues, vec![3.0, 1.0]);
        assert!((r.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((r.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-15);

        let bad = DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]);
        assert!(matches!(sym_eigen(&bad), Err(LinalgError::NotSymmetric { .. })));
        assert!(sym_eigen(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn eigen_random_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &n in &[1usize, 2, 8, 33, 128] {
            let a = random_matrix(&mut rng, n, n);
            let s = DenseMatrix::from_fn(n, n, |i, j| a[(i, j)] + a[(j, i)]);
            check_eigen(&s, &sym_eigen(&s).unwrap());
        }
        // Repeated and zero eigenvalues.
        let b = random_signs(&mut rng, 6, 3);
        let s = b.matmul(&b.transpose());
        check_eigen(&s, &sym_eigen(&s).unwrap());
        check_eigen(&DenseMatrix::zeros(4, 4), &sym_eigen(&DenseMatrix::zeros(4, 4)).unwrap());
    }

    #[test]
    fn completion_examples() {
        let b = DenseMatrix::from_rows(&[[1.0], [0.0]]);
        let c = orthonormal_complete(&b, 3).unwrap();
        assert_eq!((c.rows(), c.cols()), (2, 1));
        assert!(c[(0, 0)].abs() < 1e-12);
        assert!((c[(1, 0)].abs() - 1.0).abs() < 1e-12);

        let full = DenseMatrix::identity(3);
        assert_eq!(orthonormal_complete(&full, 0).unwrap().cols(), 0);

        let not_orth = DenseMatrix::from_rows(&[[1.0], [1.0]]);
        assert!(matches!(
            orthonormal_complete(&not_orth, 0),
            Err(LinalgError::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn completion_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_matrix(&mut rng, 6, 6);
        let s = a.matmul(&a.transpose());
        let q = sym_eigen(&s).unwrap().eigenvectors;
        let b = DenseMatrix::from_fn(6, 2, |i, j| q[(i, j)]);
        let c = orthonormal_complete(&b, 7).unwrap();
        let full = DenseMatrix::from_fn(6, 6, |i, j| if j < 2 { b[(i, j)] } else { c[(i, j - 2)] });
        let err = full.transpose().matmul(&full).max_abs_diff(&DenseMatrix::identity(6));
        assert!(err <= 1e-8, "{err}");
        assert_eq!(orthonormal_complete(&b, 7).unwrap(), c);
    }

    fn check_feasible(x: &DenseMatrix) {
        let n = x.cols() as f64;
        for s in x.row_sums() {
            assert!(s.abs() <= 1e-6 * n.sqrt(), "row sum {s}");
        }
        let g = x.gram_rows(Exec::Sequential);
        let err = DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] / n)
            .max_abs_diff(&DenseMatrix::identity(g.rows()));
        assert!(err <= 1e-6, "decorrelation error {err}");
    }

    #[test]
    fn auxiliary_trivial_cases() {
        let a = DenseMatrix::from_rows(&[[1.0, -1.0]]);
        let sol = solve_orthogonal_auxiliary(&a, &AuxOptions::default()).unwrap();
        assert!(sol.x.max_abs_diff(&a) < 1e-12);
        assert!((a.frobenius_inner(&sol.x) - 2.0).abs() < 1e-12);

        let a = DenseMatrix::from_rows(&[[1.0, 1.0]]);
        let sol = solve_orthogonal_auxiliary(&a, &AuxOptions::default()).unwrap();
        assert_eq!(sol.rank, 0);
        check_feasible(&sol.x);
        assert!(a.frobenius_inner(&sol.x).abs() < 1e-12);

        let a = DenseMatrix::from_rows(&[[1.0]]);
        assert_eq!(
            solve_orthogonal_auxiliary(&a, &AuxOptions::default()).unwrap_err(),
            LinalgError::TooFewColumns(1)
        );
    }

    #[test]
    fn auxiliary_matches_nuclear_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let a = random_signs(&mut rng, 4, 10);
            let sol = solve_orthogonal_auxiliary(&a, &AuxOptions::default()).unwrap();
            check_feasible(&sol.x);
            let nuclear: f64 = singular_values_jacobi(&row_center(&a)).iter().sum();
            let expected = 10f64.sqrt() * nuclear;
            let got = a.frobenius_inner(&sol.x);
            assert!((got - expected).abs() <= 1e-6 * expected.abs().max(1e-12), "{got} vs {expected}");
            assert!((sol.optimal_value - expected).abs() <= 1e-6 * expected);
        }
    }

    #[test]
    fn auxiliary_rank_deficient_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Rows 2 and 3 duplicate rows 0 and 1, row 4 is constant.
        let base = random_signs(&mut rng, 2, 30);
        let a = DenseMatrix::from_fn(5, 30, |i, j| match i {
            0 | 2 => base[(0, j)],
            1 | 3 => base[(1, j)],
            _ => 1.0,
        });
        let opts = AuxOptions {
            seed: 5,
            ..AuxOptions::default()
        };
        let sol = solve_orthogonal_auxiliary(&a, &opts).unwrap();
        assert!(sol.rank <= 2);
        check_feasible(&sol.x);
        let nuclear: f64 = singular_values_jacobi(&row_center(&a)).iter().sum();
        assert!((a.frobenius_inner(&sol.x) - 30f64.sqrt() * nuclear).abs() < 1e-6 * nuclear.max(1.0));
        let again = solve_orthogonal_auxiliary(&a, &opts).unwrap();
        assert_eq!(again.x, sol.x);
        let par = solve_orthogonal_auxiliary(&a, &AuxOptions { exec: Exec::Sequential, ..opts }).unwrap();
        assert_eq!(par.x, sol.x);
    }

    #[test]
    fn auxiliary_wide_k_is_relaxed() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_signs(&mut rng, 8, 5);
        let sol = solve_orthogonal_auxiliary(&a, &AuxOptions::default()).unwrap();
        assert!(!sol.feasible);
        for s in sol.x.row_sums() {
            assert!(s.abs() < 1e-9);
        }
        let nuclear: f64 = singular_values_jacobi(&row_center(&a)).iter().sum();
        assert!((a.frobenius_inner(&sol.x) - 5f64.sqrt() * nuclear).abs() < 1e-6 * nuclear);
    }
}
