//! Multivariate linear regression `Y = X B + E`, rows of `E` i.i.d.
//! `N_q(0, Σ)`: data generation, maximum-likelihood fitting and the exact
//! Kullback–Leibler discrepancy of the plug-in predictive distribution.

use std::f64::consts::{E, PI};
use std::path::Path;

use rand::Rng;

use crate::criteria::ModelDims;
use crate::error::{Error, Result};
use crate::matstat::{standard_normal_matrix, Matrix, SpdMatrix};

/// Ground truth `(X, B, Σ)` of the data-generating process.
#[derive(Debug, Clone)]
pub struct RegressionTruth {
    x: Matrix,
    b: Matrix,
    sigma: SpdMatrix,
}

impl RegressionTruth {
    pub fn new(x: Matrix, b: Matrix, sigma: SpdMatrix) -> Result<Self> {
        let truth = Self::from_parts(x, b, sigma)?;
        design_rank_check(&truth.x.clone().qr().r(), truth.n())?;
        Ok(truth)
    }

    /// Shape checks only; the caller vouches for the rank of `X`.
    pub(crate) fn from_parts(x: Matrix, b: Matrix, sigma: SpdMatrix) -> Result<Self> {
        let (n, p) = x.shape();
        if n < p || p == 0 {
            return Err(Error::DimensionMismatch(format!(
                "design is {n}x{p}; need n >= p >= 1"
            )));
        }
        if b.nrows() != p || b.ncols() != sigma.dim() {
            return Err(Error::DimensionMismatch(format!(
                "coefficients are {}x{}, expected {p}x{}",
                b.nrows(),
                b.ncols(),
                sigma.dim()
            )));
        }
        Ok(Self { x, b, sigma })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn sigma(&self) -> &SpdMatrix {
        &self.sigma
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.b.ncols()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new_unchecked(self.n(), self.p(), self.q())
    }
}

/// Maximum-likelihood estimates and the Gram matrices the criteria need.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub bhat: Matrix,
    /// `R / n`; singular when `n − p < q` or the residuals vanish.
    pub sigma_hat: Matrix,
    /// `R = (Y − X B̂)ᵀ(Y − X B̂)`.
    pub residual_gram: Matrix,
    /// `(X B̂)ᵀ(X B̂)`.
    pub fitted_gram: Matrix,
    dims: ModelDims,
    sigma_hat_spd: Option<SpdMatrix>,
}

impl FitResult {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    /// `Σ̂` as an SPD matrix, or an error when it is singular.
    pub fn sigma_hat_spd(&self) -> Result<&SpdMatrix> {
        self.sigma_hat_spd.as_ref().ok_or_else(|| {
            let ModelDims { n, p, q } = self.dims;
            Error::SingularCovariance(if n < p + q {
                format!("n - p = {} is below q = {q}", n - p)
            } else {
                "residual Gram matrix is not positive definite".into()
            })
        })
    }

    pub fn sigma_hat_is_singular(&self) -> bool {
        self.sigma_hat_spd.is_none()
    }

    #[cfg(test)]
    pub(crate) fn set_sigma_hat(&mut self, sigma_hat: Matrix) {
        self.sigma_hat_spd = SpdMatrix::new(sigma_hat.clone()).ok();
        self.sigma_hat = sigma_hat;
    }
}

fn design_rank_check(r: &Matrix, n: usize) -> Result<()> {
    let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
    let largest = diag.iter().copied().fold(0.0, f64::max);
    let smallest = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let tolerance = n.max(r.ncols()) as f64 * f64::EPSILON * largest;
    if !(smallest > tolerance) {
        return Err(Error::RankDeficient {
            smallest_singular_value: smallest,
            tolerance,
        });
    }
    Ok(())
}

/// Draws `Y = X B + E` with rows of `E` i.i.d. `N_q(0, Σ)`.
pub fn generate_response<R: Rng + ?Sized>(truth: &RegressionTruth, rng: &mut R) -> Matrix {
    let noise = standard_normal_matrix(truth.n(), truth.q(), rng) * truth.sigma.factor().transpose();
    &truth.x * &truth.b + noise
}

/// Least squares through a thin QR factorization of `X`.
pub fn fit_mle(x: &Matrix, y: &Matrix) -> Result<FitResult> {
    let (n, p) = x.shape();
    let q = y.ncols();
    if y.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows but response has {}",
            y.nrows()
        )));
    }
    if n < p || p == 0 || q == 0 {
        return Err(Error::DimensionMismatch(format!(
            "need n >= p >= 1 and q >= 1, got n={n}, p={p}, q={q}"
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    design_rank_check(&r, n)?;
    let q_thin = qr.q();
    let qty = q_thin.transpose() * y;
    let bhat = r
        .solve_upper_triangular(&qty)
        .expect("diagonal checked nonzero");
    let resid = y - &q_thin * &qty;
    let mut residual_gram = resid.transpose() * &resid;
    symmetrize(&mut residual_gram);
    let mut fitted_gram = qty.transpose() * &qty;
    symmetrize(&mut fitted_gram);
    let sigma_hat = &residual_gram / n as f64;
    // residuals at rounding level of Y count as exact zeros
    let floor = (n as f64 * f64::EPSILON * y.norm()).powi(2);
    let sigma_hat_spd = if n - p >= q && residual_gram.symmetric_eigenvalues().min() > floor {
        SpdMatrix::new(sigma_hat.clone()).ok()
    } else {
        None
    };
    Ok(FitResult {
        bhat,
        sigma_hat,
        residual_gram,
        fitted_gram,
        dims: ModelDims::new_unchecked(n, p, q),
        sigma_hat_spd,
    })
}

fn symmetrize(m: &mut Matrix) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `(B̂ − B)ᵀ XᵀX (B̂ − B)`.
fn estimation_error_gram(truth: &RegressionTruth, bhat: &Matrix) -> Matrix {
    let d = &truth.x * (bhat - &truth.b);
    d.transpose() * d
}

/// `d((B,Σ),(B̂,Σ̂)) = nq log 2π + n log det Σ̂ + n tr(Σ̂⁻¹Σ) + tr(Σ̂⁻¹(B̂−B)ᵀXᵀX(B̂−B))`.
pub fn kl_discrepancy(truth: &RegressionTruth, fit: &FitResult) -> Result<f64> {
    let sigma_hat = fit.sigma_hat_spd()?;
    let n = truth.n() as f64;
    let q = truth.q() as f64;
    let inner = truth.sigma.matrix() * n + estimation_error_gram(truth, &fit.bhat);
    Ok(n * q * (2.0 * PI).ln() + n * sigma_hat.log_det() + sigma_hat.trace_solve(&inner))
}

/// `tr(Σ⁻¹(X B̂ − X B)ᵀ(X B̂ − X B))`.
pub fn mahalanobis_loss(truth: &RegressionTruth, bhat: &Matrix) -> f64 {
    truth.sigma.trace_solve(&estimation_error_gram(truth, bhat))
}

/// Discrepancy of `N(X B̂, Σ)` with `Σ` known:
/// `nq log 2πe + n log det Σ + tr(Σ⁻¹(B̂−B)ᵀXᵀX(B̂−B))`.
pub fn kl_discrepancy_known_sigma(truth: &RegressionTruth, bhat: &Matrix) -> f64 {
    let n = truth.n() as f64;
    let q = truth.q() as f64;
    n * q * (2.0 * PI * E).ln() + n * truth.sigma.log_det() + mahalanobis_loss(truth, bhat)
}

/// Reads a numeric matrix from CSV, one observation per row.
pub fn read_matrix_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "{}: row {}: '{field}' is not a number",
                        path.as_ref().display(),
                        line + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.as_ref().display(),
                    line + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "{}: row {} has a non-finite entry",
                path.as_ref().display(),
                line + 1
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Config(format!("{}: no data", path.as_ref().display())));
    }
    let cols = rows[0].len();
    Ok(Matrix::from_row_iterator(
        rows.len(),
        cols,
        rows.into_iter().flatten(),
    ))
}
