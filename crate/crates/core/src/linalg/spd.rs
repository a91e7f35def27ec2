//! Symmetric positive-definite matrices under the affine-invariant metric.

use super::{LinalgError, Matrix};

/// Relative symmetry tolerance accepted on construction.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Shrinkage weight applied to rank-deficient or ill-conditioned inputs.
pub const SHRINKAGE: f64 = 1e-5;
/// Condition number above which shrinkage kicks in.
pub const MAX_CONDITION: f64 = 1e10;

pub const KARCHER_TOL: f64 = 1e-8;
pub const KARCHER_MAX_ITER: usize = 100;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-14;

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Column `i` is the eigenvector of `values[i]`.
    pub vectors: Matrix,
}

impl SymEig {
    /// Rebuilds `V · diag(f(λ)) · Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += v[(i, k)] * mapped[k] * v[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::NAN)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Only the upper triangle is trusted; the caller is expected to pass a
/// symmetric input.
pub fn sym_eig(m: &Matrix) -> Result<SymEig, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm();
    let threshold = JACOBI_REL_TOL * norm;

    let off_diagonal = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                s += a[(p, q)] * a[(p, q)];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut sweeps = 0;
    loop {
        let residual = off_diagonal(&a);
        if residual <= threshold {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                iterations: sweeps,
                residual,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// A symmetric positive-definite matrix.
///
/// Construction symmetrizes the input and, when the smallest eigenvalue is
/// not positive or the condition number exceeds [`MAX_CONDITION`], adds
/// `SHRINKAGE · trace/dim · I`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self, LinalgError> {
        Self::check_symmetric(&m)?;
        let mut m = m;
        m.symmetrize();
        let eig = sym_eig(&m)?;
        let (lo, hi) = (eig.min(), eig.max());
        if lo > 0.0 && hi / lo <= MAX_CONDITION {
            return Ok(Self(m));
        }
        let n = m.rows();
        let bump = SHRINKAGE * m.trace() / n as f64;
        for i in 0..n {
            m[(i, i)] += bump;
        }
        let lo = sym_eig(&m)?.min();
        if !(lo > 0.0) {
            return Err(LinalgError::Degenerate { min_eigenvalue: lo });
        }
        Ok(Self(m))
    }

    /// Like [`SpdMatrix::new`] but never regularizes: a non-positive
    /// eigenvalue is an error.
    pub fn strict(m: Matrix) -> Result<Self, LinalgError> {
        Self::check_symmetric(&m)?;
        let mut m = m;
        m.symmetrize();
        let lo = sym_eig(&m)?.min();
        if !(lo > 0.0) {
            return Err(LinalgError::Degenerate { min_eigenvalue: lo });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix produced by a computation that preserves
    /// positive-definiteness (congruence by an invertible matrix, matrix
    /// power, geodesic). Only symmetrizes.
    pub(crate) fn from_trusted(mut m: Matrix) -> Self {
        m.symmetrize();
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self, LinalgError> {
        Self::strict(Matrix::from_diag(diag))
    }

    fn check_symmetric(m: &Matrix) -> Result<(), LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::Shape(format!(
                "SPD matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(LinalgError::NonFinite { row: 0, col: 0 });
        }
        let asym = m.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(LinalgError::NotSymmetric { asymmetry: asym });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn eig(&self) -> Result<SymEig, LinalgError> {
        sym_eig(&self.0)
    }

    /// `aᵀ · self · a` for an invertible `a`.
    pub fn congruence(&self, a: &Matrix) -> Result<Self, LinalgError> {
        Ok(Self::from_trusted(self.0.congruence(a)?))
    }
}

/// Covariance `X·Xᵀ / n_samples` of a channels × samples window, with the
/// standard shrinkage fallback.
pub fn covariance(x: &Matrix) -> Result<SpdMatrix, LinalgError> {
    if x.cols() == 0 {
        return Err(LinalgError::Shape("covariance of an empty window".into()));
    }
    SpdMatrix::new(x.gram().scale(1.0 / x.cols() as f64))
}

fn positive_eig(m: &SpdMatrix) -> Result<SymEig, LinalgError> {
    let eig = m.eig()?;
    let lo = eig.min();
    if !(lo > 0.0) {
        return Err(LinalgError::Degenerate { min_eigenvalue: lo });
    }
    Ok(eig)
}

/// Maps the eigenvalues `λ → λ^p`.
pub fn spd_power(m: &SpdMatrix, p: f64) -> Result<SpdMatrix, LinalgError> {
    let eig = positive_eig(m)?;
    Ok(SpdMatrix::from_trusted(eig.map(|l| l.powf(p))))
}

/// Principal matrix logarithm; the result is symmetric but not SPD.
pub fn spd_log(m: &SpdMatrix) -> Result<Matrix, LinalgError> {
    Ok(positive_eig(m)?.map(f64::ln))
}

/// Matrix exponential of a symmetric matrix.
pub fn sym_exp(m: &Matrix) -> Result<SpdMatrix, LinalgError> {
    Ok(SpdMatrix::from_trusted(sym_eig(m)?.map(f64::exp)))
}

/// Both `m^{1/2}` and `m^{-1/2}` from a single eigendecomposition.
pub fn sqrt_and_inv_sqrt(m: &SpdMatrix) -> Result<(Matrix, Matrix), LinalgError> {
    let eig = positive_eig(m)?;
    Ok((eig.map(f64::sqrt), eig.map(|l| 1.0 / l.sqrt())))
}

fn check_dims(a: &SpdMatrix, b: &SpdMatrix) -> Result<(), LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::Shape(format!(
            "SPD dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Affine-invariant Riemannian distance `‖log(a^{-1/2} b a^{-1/2})‖_F`.
pub fn airm_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64, LinalgError> {
    check_dims(a, b)?;
    let (_, a_inv_sqrt) = sqrt_and_inv_sqrt(a)?;
    airm_distance_whitened(&a_inv_sqrt, b)
}

/// Distance from the point whose inverse square root is `a_inv_sqrt` to `b`.
pub(crate) fn airm_distance_whitened(a_inv_sqrt: &Matrix, b: &SpdMatrix) -> Result<f64, LinalgError> {
    let mut inner = b.as_matrix().congruence(a_inv_sqrt)?;
    inner.symmetrize();
    let eig = sym_eig(&inner)?;
    if !(eig.min() > 0.0) {
        return Err(LinalgError::Degenerate {
            min_eigenvalue: eig.min(),
        });
    }
    Ok(eig.values.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt())
}

/// Karcher (geometric) mean under the affine-invariant metric.
///
/// Tangent-space iteration started at the arithmetic mean. The step length
/// starts at the Richardson bound `2 / Σ wᵢ (cᵢ+1)/(cᵢ−1) ln cᵢ` (`cᵢ` the
/// condition number of the i-th whitened matrix) and grows by 1.5 while the
/// residual falls; a step that raises it is undone and retried shorter,
/// never below the bound. Stops once the Frobenius norm of the whitened
/// tangent mean falls below `tol`. `max_iter` counts tangent evaluations.
pub fn geometric_mean(ms: &[SpdMatrix], tol: f64, max_iter: usize) -> Result<SpdMatrix, LinalgError> {
    let first = ms
        .first()
        .ok_or_else(|| LinalgError::Domain("geometric mean of an empty list".into()))?;
    for m in &ms[1..] {
        check_dims(first, m)?;
    }
    if ms.len() == 1 {
        return Ok(first.clone());
    }
    let n = first.dim();
    let weight = 1.0 / ms.len() as f64;
    let mut acc = Matrix::zeros(n, n);
    for m in ms {
        acc = acc.add(m.as_matrix())?;
    }
    let mut current = SpdMatrix::from_trusted(acc.scale(weight));

    // last accepted point: (its sqrt, tangent mean, safe step, residual)
    let mut accepted: Option<(Matrix, Matrix, f64, f64)> = None;
    let mut step = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let (sqrt, inv_sqrt) = sqrt_and_inv_sqrt(&current)?;
        let mut tangent = Matrix::zeros(n, n);
        let mut curvature = 0.0;
        for m in ms {
            let mut whitened = m.as_matrix().congruence(&inv_sqrt)?;
            whitened.symmetrize();
            let eig = sym_eig(&whitened)?;
            if !(eig.min() > 0.0) {
                return Err(LinalgError::Degenerate {
                    min_eigenvalue: eig.min(),
                });
            }
            let c = eig.max() / eig.min();
            curvature += if c - 1.0 > 1e-9 { (c + 1.0) / (c - 1.0) * c.ln() } else { 2.0 };
            tangent = tangent.add(&eig.map(f64::ln))?;
        }
        let tangent = tangent.scale(weight);
        residual = tangent.frobenius_norm();
        if residual < tol {
            return Ok(current);
        }
        let safe = 2.0 / (curvature * weight);
        let (sqrt, tangent) = match &accepted {
            // the longer step made things worse: retry from the last point
            Some((prev_sqrt, prev_tangent, prev_safe, prev_res)) if residual >= *prev_res && step > *prev_safe => {
                step = (step / 4.0).max(*prev_safe);
                (prev_sqrt.clone(), prev_tangent.clone())
            }
            _ => {
                accepted = Some((sqrt.clone(), tangent.clone(), safe, residual));
                step = (step * 1.5).max(safe);
                (sqrt, tangent)
            }
        };
        let moved = sym_exp(&tangent.scale(step))?;
        current = SpdMatrix::from_trusted(moved.as_matrix().congruence(&sqrt)?);
    }
    Err(LinalgError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// [`geometric_mean`] with the default tolerance and iteration cap.
pub fn karcher_mean(ms: &[SpdMatrix]) -> Result<SpdMatrix, LinalgError> {
    geometric_mean(ms, KARCHER_TOL, KARCHER_MAX_ITER)
}

/// Point at parameter `t` on the affine-invariant geodesic from `a` to `b`:
/// `a^{1/2} (a^{-1/2} b a^{-1/2})^t a^{1/2}`.
pub fn geodesic_step(a: &SpdMatrix, b: &SpdMatrix, t: f64) -> Result<SpdMatrix, LinalgError> {
    check_dims(a, b)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(LinalgError::Domain(format!(
            "geodesic parameter {t} outside [0, 1]"
        )));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let (sqrt, inv_sqrt) = sqrt_and_inv_sqrt(a)?;
    let inner = SpdMatrix::from_trusted(b.as_matrix().congruence(&inv_sqrt)?);
    let moved = spd_power(&inner, t)?;
    Ok(SpdMatrix::from_trusted(moved.as_matrix().congruence(&sqrt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        m.symmetrize();
        m
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SpdMatrix {
        let a = Matrix::from_fn(n, n + 4, |_, _| rng.random_range(-1.0..1.0));
        SpdMatrix::new(a.gram().add(&Matrix::identity(n).scale(0.1)).unwrap()).unwrap()
    }

    fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm()
    }

    #[test]
    fn eig_identity() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
        assert!(frob_diff(&vtv, &Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn eig_diagonal_sorted_descending() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.values, vec![4.0, 1.0]);
        assert_eq!(e.vectors[(0, 0)].abs(), 0.0);
        assert_eq!(e.vectors[(1, 0)].abs(), 1.0);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_symmetric(&mut rng, 8);
            let e = sym_eig(&m).unwrap();
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            assert!(frob_diff(&e.map(|l| l), &m) < 1e-9);
            let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
            assert!(frob_diff(&vtv, &Matrix::identity(8)) < 1e-9);
        }
    }

    #[test]
    fn power_diagonal_closed_form() {
        let m = SpdMatrix::from_diag(&[4.0, 9.0]).unwrap();
        let p = spd_power(&m, -0.5).unwrap();
        assert!(frob_diff(p.as_matrix(), &Matrix::from_diag(&[0.5, 1.0 / 3.0])) < 1e-14);
    }

    #[test]
    fn power_identity_exponents() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_spd(&mut rng, 5);
        assert!(frob_diff(spd_power(&m, 1.0).unwrap().as_matrix(), m.as_matrix()) < 1e-10);
        assert!(frob_diff(spd_power(&m, 0.0).unwrap().as_matrix(), &Matrix::identity(5)) < 1e-10);
        let half = spd_power(&m, 0.5).unwrap();
        let back = spd_power(&half, 2.0).unwrap();
        assert!(frob_diff(back.as_matrix(), m.as_matrix()) < 1e-9);
    }

    #[test]
    fn power_commutes_with_eigenvector_congruence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_spd(&mut rng, 4);
        let v = m.eig().unwrap().vectors;
        let lhs = spd_power(&m.congruence(&v).unwrap(), 0.7).unwrap();
        let rhs = spd_power(&m, 0.7).unwrap().congruence(&v).unwrap();
        assert!(frob_diff(lhs.as_matrix(), rhs.as_matrix()) < 1e-10);
    }

    #[test]
    fn power_rejects_non_positive() {
        let m = SpdMatrix::from_trusted(Matrix::from_diag(&[1.0, -1.0]));
        assert!(matches!(
            spd_power(&m, 0.5),
            Err(LinalgError::Degenerate { .. })
        ));
    }

    #[test]
    fn distance_scalar_and_coincident() {
        let one = SpdMatrix::from_diag(&[1.0]).unwrap();
        let e2 = SpdMatrix::from_diag(&[2f64.exp()]).unwrap();
        assert!((airm_distance(&one, &e2).unwrap() - 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(&mut rng, 6);
        assert!(airm_distance(&m, &m).unwrap() < 1e-10);
    }

    #[test]
    fn distance_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a = random_spd(&mut rng, 5);
            let b = random_spd(&mut rng, 5);
            let d1 = airm_distance(&a, &b).unwrap();
            let d2 = airm_distance(&b, &a).unwrap();
            assert!((d1 - d2).abs() < 1e-10);
        }
    }

    #[test]
    fn distance_dimension_mismatch() {
        let a = SpdMatrix::identity(2);
        let b = SpdMatrix::identity(3);
        assert!(matches!(airm_distance(&a, &b), Err(LinalgError::Shape(_))));
    }

    #[test]
    fn mean_singleton_and_scalar_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_spd(&mut rng, 3);
        assert_eq!(karcher_mean(&[m.clone()]).unwrap(), m);
        let pair = [
            SpdMatrix::from_diag(&[1.0]).unwrap(),
            SpdMatrix::from_diag(&[4.0]).unwrap(),
        ];
        assert!((karcher_mean(&pair).unwrap().as_matrix()[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_of_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_spd(&mut rng, 4);
        let mean = karcher_mean(&vec![m.clone(); 5]).unwrap();
        assert!(frob_diff(mean.as_matrix(), m.as_matrix()) < 1e-10);
    }

    #[test]
    fn mean_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ms: Vec<_> = (0..4).map(|_| random_spd(&mut rng, 4)).collect();
        match geometric_mean(&ms, 1e-30, 2) {
            Err(LinalgError::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn geodesic_endpoints_and_scalar_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_spd(&mut rng, 3);
        let b = random_spd(&mut rng, 3);
        assert_eq!(geodesic_step(&a, &b, 0.0).unwrap(), a);
        assert_eq!(geodesic_step(&a, &b, 1.0).unwrap(), b);
        let one = SpdMatrix::from_diag(&[1.0]).unwrap();
        let e4 = SpdMatrix::from_diag(&[4f64.exp()]).unwrap();
        let mid = geodesic_step(&one, &e4, 0.5).unwrap();
        assert!((mid.as_matrix()[(0, 0)] - 2f64.exp()).abs() < 1e-12);
        assert!(matches!(
            geodesic_step(&a, &b, 1.5),
            Err(LinalgError::Domain(_))
        ));
    }

    #[test]
    fn shrinkage_rescues_rank_deficient_covariance() {
        // two channels, perfectly correlated
        let x = Matrix::from_rows(&[vec![1.0, -1.0, 2.0, 0.5], vec![2.0, -2.0, 4.0, 1.0]]).unwrap();
        let c = covariance(&x).unwrap();
        assert!(c.eig().unwrap().min() > 0.0);
    }

    #[test]
    fn all_zero_window_is_degenerate() {
        let x = Matrix::zeros(3, 10);
        assert!(matches!(covariance(&x), Err(LinalgError::Degenerate { .. })));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.2, 1.0]]).unwrap();
        assert!(matches!(SpdMatrix::new(m), Err(LinalgError::NotSymmetric { .. })));
    }
}
