//! Matrix-variate sampling and the dense linear-algebra primitives shared by
//! the estimators.
//!
//! Matrices are plain `nalgebra::DMatrix<f64>`; the one invariant-carrying
//! type is [`SpdMatrix`], which owns its lower Cholesky factor so that
//! log-determinants, solves and traces never re-factor.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense real matrix, column-major storage.
pub type Matrix = DMatrix<f64>;

/// Generator behind every [`RngStream`].
pub type StreamRng = ChaCha12Rng;

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric positive definite matrix together with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: Matrix,
    factor: Matrix,
}

impl SpdMatrix {
    /// Validates symmetry (1e-12 relative) and positive definiteness.
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "expected a non-empty square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("non-finite entry".into()));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotPositiveDefinite(format!(
                "asymmetry {asym:e} exceeds relative tolerance"
            )));
        }
        let factor = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?
            .unpack();
        Ok(Self { matrix, factor })
    }

    /// Like [`SpdMatrix::new`] but replaces the input with its symmetric part
    /// first. Use for Gram matrices built by floating-point products.
    pub fn from_symmetrized(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Self::new(matrix);
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        Self::new(sym)
    }

    /// Builds the matrix `L Lᵀ` from a lower-triangular factor with positive diagonal.
    pub fn from_factor(factor: Matrix) -> Result<Self> {
        if !factor.is_square() {
            return Err(Error::DimensionMismatch("Cholesky factor must be square".into()));
        }
        if factor.diagonal().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::NotPositiveDefinite(
                "factor diagonal must be positive".into(),
            ));
        }
        let factor = factor.lower_triangle();
        let mut matrix = &factor * factor.transpose();
        matrix.fill_upper_triangle_with_lower_triangle();
        Ok(Self { matrix, factor })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Matrix::identity(dim, dim),
            factor: Matrix::identity(dim, dim),
        }
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::diagonal(&vec![scale; dim])
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        if entries.is_empty() || entries.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::NotPositiveDefinite(
                "diagonal entries must be positive and finite".into(),
            ));
        }
        let d = nalgebra::DVector::from_column_slice(entries);
        Ok(Self {
            matrix: Matrix::from_diagonal(&d),
            factor: Matrix::from_diagonal(&d.map(f64::sqrt)),
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    /// Lower Cholesky factor `L` with `A = L Lᵀ`.
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, rhs: &Matrix) -> Matrix {
        let half = self
            .factor
            .solve_lower_triangular(rhs)
            .expect("factor diagonal is positive");
        self.factor
            .tr_solve_lower_triangular(&half)
            .expect("factor diagonal is positive")
    }

    pub fn inverse(&self) -> Matrix {
        let mut inv = self.solve(&Matrix::identity(self.dim(), self.dim()));
        inv.fill_upper_triangle_with_lower_triangle();
        inv
    }

    /// `tr(A⁻¹ B)` without forming the inverse.
    pub fn trace_solve(&self, rhs: &Matrix) -> f64 {
        self.solve(rhs).trace()
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "scale factor {alpha} must be positive"
            )));
        }
        Ok(Self {
            matrix: &self.matrix * alpha,
            factor: &self.factor * alpha.sqrt(),
        })
    }
}

/// Reproducible random stream keyed by `(master_seed, stream_index)`.
///
/// The master seed is expanded into a ChaCha key and the stream index selects
/// the ChaCha stream, so distinct pairs give independent sequences and equal
/// pairs reproduce bit-identically on any thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut state = self.master_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha12Rng::from_seed(key);
        rng.set_stream(self.stream_index);
        rng
    }
}

/// Derives an independent master seed for a labelled sub-experiment.
pub fn derive_seed(master_seed: u64, label: u64) -> u64 {
    let mut state = master_seed ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    splitmix64(&mut state);
    splitmix64(&mut state)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix of i.i.d. standard normals, filled in column-major order.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Draws from the matrix normal `N(mean, row_cov, col_cov)`, i.e.
/// `vec(Y) ~ N(vec(mean), col_cov ⊗ row_cov)`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    mean: &Matrix,
    row_cov: &SpdMatrix,
    col_cov: &SpdMatrix,
    rng: &mut R,
) -> Result<Matrix> {
    if mean.nrows() != row_cov.dim() || mean.ncols() != col_cov.dim() {
        return Err(Error::DimensionMismatch(format!(
            "mean is {}x{} but covariances are {}x{} and {}x{}",
            mean.nrows(),
            mean.ncols(),
            row_cov.dim(),
            row_cov.dim(),
            col_cov.dim(),
            col_cov.dim()
        )));
    }
    let g = standard_normal_matrix(mean.nrows(), mean.ncols(), rng);
    Ok(mean + row_cov.factor() * g * col_cov.factor().transpose())
}

/// Wishart `W_q(dof, scale)` draw via the Bartlett decomposition.
///
/// The product `L·A` of the scale factor and the Bartlett triangle is itself
/// the Cholesky factor of the draw, so no factorization is needed.
pub fn sample_wishart<R: Rng + ?Sized>(
    dof: usize,
    scale: &SpdMatrix,
    rng: &mut R,
) -> Result<SpdMatrix> {
    let q = scale.dim();
    if dof < q {
        return Err(Error::DegreesOfFreedom(format!(
            "Wishart degrees of freedom {dof} below dimension {q}"
        )));
    }
    let mut bartlett = Matrix::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new((dof - i) as f64).expect("positive degrees of freedom");
        bartlett[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            bartlett[(i, j)] = StandardNormal.sample(rng);
        }
    }
    SpdMatrix::from_factor(scale.factor() * bartlett)
}

/// Singular values sorted in descending order.
pub fn singular_values_desc(z: &Matrix) -> Vec<f64> {
    let mut sv: Vec<f64> = z.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Singular values of a matrix checked for full column rank.
///
/// Rank deficiency is declared when `σ_min < max(rows, cols) · ε · σ_max`.
pub fn full_rank_singular_values(z: &Matrix) -> Result<Vec<f64>> {
    if z.nrows() < z.ncols() {
        return Err(Error::RankDeficient {
            smallest_singular_value: 0.0,
            tolerance: 0.0,
        });
    }
    let sv = singular_values_desc(z);
    let largest = sv.first().copied().unwrap_or(0.0);
    let smallest = sv.last().copied().unwrap_or(0.0);
    let tolerance = z.nrows().max(z.ncols()) as f64 * f64::EPSILON * largest;
    if !(smallest > tolerance) {
        return Err(Error::RankDeficient {
            smallest_singular_value: smallest,
            tolerance,
        });
    }
    Ok(sv)
}

/// `tr((ZᵀZ)⁻¹) = Σ σᵢ(Z)⁻²`.
pub fn trace_inv_gram(z: &Matrix) -> Result<f64> {
    Ok(inv_gram_traces(z)?.0)
}

/// `tr((ZᵀZ)⁻²) = Σ σᵢ(Z)⁻⁴`.
pub fn trace_inv_gram_sq(z: &Matrix) -> Result<f64> {
    Ok(inv_gram_traces(z)?.1)
}

/// Both inverse-Gram traces from a single decomposition.
pub fn inv_gram_traces(z: &Matrix) -> Result<(f64, f64)> {
    let sv = full_rank_singular_values(z)?;
    Ok(sv.iter().fold((0.0, 0.0), |(t1, t2), s| {
        let inv = 1.0 / (s * s);
        (t1 + inv, t2 + inv * inv)
    }))
}
