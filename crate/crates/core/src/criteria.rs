//! Information criteria and loss estimators of the Kullback–Leibler
//! discrepancy, together with the hypotheses under which each one is known to
//! dominate its baseline.
//!
//! Every estimator returns a value even when its dominance hypotheses fail;
//! [`CriterionValue::conditions_met`] records whether they hold. Only genuine
//! numerical impossibilities (singular matrices, non-positive degrees of
//! freedom) are errors.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matstat::{full_rank_singular_values, inv_gram_traces, Matrix, SpdMatrix};
use crate::regression::FitResult;

/// Sample size `n`, number of explanatory variables `p`, number of responses `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub n: usize,
    pub p: usize,
    pub q: usize,
}

impl ModelDims {
    pub fn new(n: usize, p: usize, q: usize) -> Result<Self> {
        let dims = Self { n, p, q };
        dims.validate()?;
        Ok(dims)
    }

    pub(crate) fn new_unchecked(n: usize, p: usize, q: usize) -> Self {
        Self { n, p, q }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.q == 0 || self.n < self.p {
            return Err(Error::Config(format!(
                "dimensions must satisfy n >= p >= 1 and q >= 1 (got n={}, p={}, q={})",
                self.n, self.p, self.q
            )));
        }
        Ok(())
    }

    /// `n − p − q − 1`, signed.
    pub fn residual_dof(&self) -> i64 {
        self.n as i64 - self.p as i64 - self.q as i64 - 1
    }

    /// Number of free parameters `pq + q(q+1)/2`.
    pub fn parameter_count(&self) -> f64 {
        let (p, q) = (self.p as f64, self.q as f64);
        p * q + q * (q + 1.0) / 2.0
    }

    fn require_residual_dof(&self) -> Result<()> {
        if self.residual_dof() <= 0 {
            return Err(Error::DegreesOfFreedom(format!(
                "n - p - q - 1 = {} must be positive",
                self.residual_dof()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ModelDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={},p={},q={}", self.n, self.p, self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CriterionName {
    /// AIC with known covariance.
    AicKnown,
    /// Modified AIC, known covariance.
    Maic,
    Aic,
    Aicc,
    /// Modified AICc.
    Maicc,
    /// Stein's unbiased risk estimate for a normal mean vector.
    SureVec,
    /// Johnstone's loss estimator for a normal mean vector.
    Johnstone,
    /// SURE for the fitted mean `X B̂` under the Mahalanobis loss.
    SureMat,
    /// Loss estimator with singular-value-specific constants, normal mean matrix.
    Matsuda,
    /// Inverse-Gram-trace loss estimator, normal mean matrix.
    Thm1,
}

impl CriterionName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CriterionName::AicKnown => "AIC_KNOWN",
            CriterionName::Maic => "MAIC",
            CriterionName::Aic => "AIC",
            CriterionName::Aicc => "AICC",
            CriterionName::Maicc => "MAICC",
            CriterionName::SureVec => "SURE_VEC",
            CriterionName::Johnstone => "JOHNSTONE",
            CriterionName::SureMat => "SURE_MAT",
            CriterionName::Matsuda => "MATSUDA",
            CriterionName::Thm1 => "THM1",
        }
    }
}

impl fmt::Display for CriterionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A hypothesis of a dominance result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    /// `n − p − q − 1 > 0`
    ResidualDofPositive,
    /// `c̄ > 0`
    CbarPositive,
    /// `0 < c ≤ c̄`
    ConstantInRange,
    /// `p ≥ 2q + 3`
    PAtLeast2qPlus3,
    /// `p ≥ 5`
    PAtLeast5,
    /// `p ≥ 3q + 2` and `q ≥ 2`
    PAtLeast3qPlus2AndQAtLeast2,
}

impl Hypothesis {
    pub fn label(&self) -> &'static str {
        match self {
            Hypothesis::ResidualDofPositive => "n-p-q-1>0",
            Hypothesis::CbarPositive => "cbar>0",
            Hypothesis::ConstantInRange => "0<c<=cbar",
            Hypothesis::PAtLeast2qPlus3 => "p>=2q+3",
            Hypothesis::PAtLeast5 => "p>=5",
            Hypothesis::PAtLeast3qPlus2AndQAtLeast2 => "p>=3q+2&q>=2",
        }
    }
}

/// A loss estimate with the tuning constant used and the status of each
/// hypothesis behind its dominance guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionValue {
    pub name: CriterionName,
    pub value: f64,
    pub c_used: Option<f64>,
    pub conditions: Vec<(Hypothesis, bool)>,
}

impl CriterionValue {
    fn new(name: CriterionName, value: f64) -> Self {
        Self {
            name,
            value,
            c_used: None,
            conditions: Vec::new(),
        }
    }

    fn with_condition(mut self, hypothesis: Hypothesis, holds: bool) -> Self {
        self.conditions.push((hypothesis, holds));
        self
    }

    /// True when every recorded hypothesis holds.
    pub fn conditions_met(&self) -> bool {
        self.conditions.iter().all(|(_, holds)| *holds)
    }

    /// Compact `label=0|1` rendering of the hypotheses.
    pub fn conditions_summary(&self) -> String {
        self.conditions
            .iter()
            .map(|(h, ok)| format!("{}={}", h.label(), u8::from(*ok)))
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn log_2pi() -> f64 {
    (2.0 * PI).ln()
}

/// `tr(S G⁻¹)` with `G` the fitted Gram matrix `(XB̂)ᵀ(XB̂)`, solved through
/// its Cholesky factor.
pub fn trace_against_fitted_gram(fit: &FitResult, s: &Matrix) -> Result<f64> {
    let gram = SpdMatrix::new(fit.fitted_gram.clone()).map_err(|_| Error::RankDeficient {
        smallest_singular_value: fit
            .fitted_gram
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
            .sqrt(),
        tolerance: 0.0,
    })?;
    Ok(gram.trace_solve(s))
}

fn require_matching_sigma(fit: &FitResult, sigma: &SpdMatrix) -> Result<()> {
    if sigma.dim() != fit.dims().q {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {0}x{0} but the fit has q = {1}",
            sigma.dim(),
            fit.dims().q
        )));
    }
    Ok(())
}

/// AIC with known `Σ`:
/// `nq log 2π + n log det Σ + tr(Σ⁻¹ R) + 2pq`.
pub fn aic_known_sigma(fit: &FitResult, sigma: &SpdMatrix) -> Result<CriterionValue> {
    require_matching_sigma(fit, sigma)?;
    let ModelDims { n, p, q } = fit.dims();
    let (n, p, q) = (n as f64, p as f64, q as f64);
    let value = n * q * log_2pi()
        + n * sigma.log_det()
        + sigma.trace_solve(&fit.residual_gram)
        + 2.0 * p * q;
    Ok(CriterionValue::new(CriterionName::AicKnown, value))
}

/// `2(p − 2q − 2)/q`, the shrinkage constant shared by MAIC and the
/// inverse-Gram-trace estimator.
pub fn inverse_gram_constant(p: usize, q: usize) -> f64 {
    2.0 * (p as f64 - 2.0 * q as f64 - 2.0) / q as f64
}

/// `MAIC = AIC − (2(p − 2q − 2)/q) tr(Σ ((XB̂)ᵀ(XB̂))⁻¹)`.
pub fn maic(fit: &FitResult, sigma: &SpdMatrix) -> Result<CriterionValue> {
    let aic = aic_known_sigma(fit, sigma)?;
    let ModelDims { p, q, .. } = fit.dims();
    let c = inverse_gram_constant(p, q);
    let correction = trace_against_fitted_gram(fit, sigma.matrix())?;
    let mut out = CriterionValue::new(CriterionName::Maic, aic.value - c * correction)
        .with_condition(Hypothesis::PAtLeast2qPlus3, p >= 2 * q + 3);
    out.c_used = Some(c);
    Ok(out)
}

/// Spacing of the grid that the unknown-covariance criteria are rounded to.
/// Sums of grid values below 2^20 in magnitude are exact, which makes
/// `AICc − AIC` the same double for every fit.
pub const CRITERION_GRID: f64 = 1.0 / (1u64 << 32) as f64;

fn on_grid(x: f64) -> f64 {
    (x / CRITERION_GRID).round() * CRITERION_GRID
}

/// `AIC = −2 log p(Y | B̂, Σ̂) + 2(pq + q(q+1)/2)
///      = nq log 2π + n log det Σ̂ + nq + 2(pq + q(q+1)/2)`,
/// rounded to [`CRITERION_GRID`].
///
/// The `nq` term is the trace `tr(Σ̂⁻¹ R)` of the maximized log-likelihood;
/// keeping it makes AICc exactly unbiased for [`crate::regression::kl_discrepancy`].
pub fn aic(fit: &FitResult) -> Result<CriterionValue> {
    let dims = fit.dims();
    let sigma_hat = fit.sigma_hat_spd()?;
    let (n, q) = (dims.n as f64, dims.q as f64);
    let data_term = on_grid(n * q * log_2pi() + n * sigma_hat.log_det());
    let value = data_term + (n * q + 2.0 * dims.parameter_count());
    Ok(CriterionValue::new(CriterionName::Aic, value))
}

/// `AICc − AIC = 2(pq + q(q+1)/2)(n/(n − p − q − 1) − 1)`.
pub fn aicc_aic_gap(dims: ModelDims) -> Result<f64> {
    dims.require_residual_dof()?;
    let n = dims.n as f64;
    Ok(2.0 * dims.parameter_count() * (n / dims.residual_dof() as f64 - 1.0))
}

/// `AICc = nq log 2π + n log det Σ̂ + nq(n + p)/(n − p − q − 1)`, which equals
/// `nq log 2π + n log det Σ̂ + nq + (2n/(n − p − q − 1))(pq + q(q+1)/2)`.
/// Evaluated as AIC plus the gap, both on [`CRITERION_GRID`].
pub fn aicc(fit: &FitResult) -> Result<CriterionValue> {
    let gap = on_grid(aicc_aic_gap(fit.dims())?);
    let value = aic(fit)?.value + gap;
    Ok(CriterionValue::new(CriterionName::Aicc, value)
        .with_condition(Hypothesis::ResidualDofPositive, true))
}

/// Upper bound on the MAICc constant:
/// `c̄ = 4n²/((n−p)(q(n−p)+2)) · (p − 2q − 2 − (q² + q − 2)/(n − p − q − 1))`.
pub fn cbar(dims: ModelDims) -> Result<f64> {
    dims.require_residual_dof()?;
    let (n, p, q) = (dims.n as f64, dims.p as f64, dims.q as f64);
    let m = n - p;
    Ok(4.0 * n * n / (m * (q * m + 2.0))
        * (p - 2.0 * q - 2.0 - (q * q + q - 2.0) / dims.residual_dof() as f64))
}

/// `MAICc = AICc − c tr(Σ̂ ((XB̂)ᵀ(XB̂))⁻¹)`, with `c = c̄` by default.
pub fn maicc(fit: &FitResult, c: Option<f64>) -> Result<CriterionValue> {
    let base = aicc(fit)?;
    let bound = cbar(fit.dims())?;
    let c = c.unwrap_or(bound);
    let correction = trace_against_fitted_gram(fit, &fit.sigma_hat)?;
    let mut out = CriterionValue::new(CriterionName::Maicc, base.value - c * correction)
        .with_condition(Hypothesis::ResidualDofPositive, true)
        .with_condition(Hypothesis::CbarPositive, bound > 0.0)
        .with_condition(Hypothesis::ConstantInRange, c > 0.0 && c <= bound);
    out.c_used = Some(c);
    Ok(out)
}

/// How [`sure_vec`] obtains `∇·g`.
pub enum Divergence<'a> {
    Analytic(&'a dyn Fn(&DVector<f64>) -> f64),
    /// Central differences with step `ε^{1/3}(1 + |yᵢ|)`.
    FiniteDifference,
}

/// Central-difference divergence of `g` at `y`.
pub fn finite_difference_divergence(
    g: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    y: &DVector<f64>,
) -> f64 {
    let base_step = f64::EPSILON.cbrt();
    let mut probe = y.clone();
    let mut div = 0.0;
    for i in 0..y.len() {
        let h = base_step * (1.0 + y[i].abs());
        probe[i] = y[i] + h;
        let up = g(&probe)[i];
        probe[i] = y[i] - h;
        let down = g(&probe)[i];
        probe[i] = y[i];
        div += (up - down) / (2.0 * h);
    }
    div
}

/// SURE for `θ̂ = y + g(y)`: `p + 2∇·g(y) + ‖g(y)‖²`.
pub fn sure_vec(
    y: &DVector<f64>,
    g: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    divergence: Divergence<'_>,
) -> f64 {
    let div = match divergence {
        Divergence::Analytic(f) => f(y),
        Divergence::FiniteDifference => finite_difference_divergence(g, y),
    };
    y.len() as f64 + 2.0 * div + g(y).norm_squared()
}

/// Johnstone's estimator `p − 2(p − 4)‖y‖⁻²` of the loss of `θ̂ = y`.
pub fn johnstone(y: &DVector<f64>) -> Result<CriterionValue> {
    let p = y.len();
    let norm_sq = y.norm_squared();
    if !(norm_sq > 0.0) {
        return Err(Error::RankDeficient {
            smallest_singular_value: 0.0,
            tolerance: 0.0,
        });
    }
    let pf = p as f64;
    Ok(
        CriterionValue::new(CriterionName::Johnstone, pf - 2.0 * (pf - 4.0) / norm_sq)
            .with_condition(Hypothesis::PAtLeast5, p >= 5),
    )
}

/// `pq − Σᵢ cᵢ σᵢ(Y)⁻²` with `cᵢ = 4(p − q − 2i − 1)/q`, singular values
/// sorted in descending order.
pub fn matsuda(y: &Matrix) -> Result<CriterionValue> {
    let (p, q) = y.shape();
    let sv = full_rank_singular_values(y)?;
    let (pf, qf) = (p as f64, q as f64);
    let correction: f64 = sv
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            let i = (idx + 1) as f64;
            4.0 * (pf - qf - 2.0 * i - 1.0) / qf / (s * s)
        })
        .sum();
    Ok(CriterionValue::new(CriterionName::Matsuda, pf * qf - correction)
        .with_condition(Hypothesis::PAtLeast3qPlus2AndQAtLeast2, p >= 3 * q + 2 && q >= 2))
}

/// `pq − (2(p − 2q − 2)/q) tr((YᵀY)⁻¹)`.
pub fn thm1_estimator(y: &Matrix) -> Result<CriterionValue> {
    let (p, q) = y.shape();
    let (trace, _) = inv_gram_traces(y)?;
    let c = inverse_gram_constant(p, q);
    let mut out = CriterionValue::new(CriterionName::Thm1, (p * q) as f64 - c * trace)
        .with_condition(Hypothesis::PAtLeast2qPlus3, p >= 2 * q + 3);
    out.c_used = Some(c);
    Ok(out)
}

/// SURE for `M̂ = X B̂` under `tr(Σ⁻¹(M̂ − M)ᵀ(M̂ − M))`:
/// `tr(Σ⁻¹ R) + (2p − n) q`.
pub fn sure_mat_regression(fit: &FitResult, sigma: &SpdMatrix) -> Result<f64> {
    require_matching_sigma(fit, sigma)?;
    let ModelDims { n, p, q } = fit.dims();
    Ok(sigma.trace_solve(&fit.residual_gram) + ((2 * p) as f64 - n as f64) * q as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matstat::{standard_normal_matrix, RngStream};
    use crate::regression::{fit_mle, generate_response, RegressionTruth};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::E;

    /// Fit whose Gram matrices are set by hand.
    fn synthetic_fit(dims: ModelDims, sigma_hat: Matrix, fitted_gram: Matrix) -> FitResult {
        let mut rng = RngStream::new(0, 0).rng();
        let x = standard_normal_matrix(dims.n, dims.p, &mut rng);
        let y = standard_normal_matrix(dims.n, dims.q, &mut rng);
        let mut fit = fit_mle(&x, &y).unwrap();
        fit.residual_gram = &sigma_hat * dims.n as f64;
        fit.sigma_hat = sigma_hat.clone();
        fit.fitted_gram = fitted_gram;
        fit.set_sigma_hat(sigma_hat);
        fit
    }

    fn random_fit(n: usize, p: usize, q: usize, seed: u64) -> (RegressionTruth, FitResult) {
        let mut rng = RngStream::new(seed, 0).rng();
        let x = standard_normal_matrix(n, p, &mut rng);
        let b = standard_normal_matrix(p, q, &mut rng);
        let truth = RegressionTruth::new(x, b, SpdMatrix::identity(q)).unwrap();
        let y = generate_response(&truth, &mut rng);
        let fit = fit_mle(truth.x(), &y).unwrap();
        (truth, fit)
    }

    #[test]
    fn aic_known_sigma_with_zero_residual() {
        let dims = ModelDims::new(20, 5, 2).unwrap();
        let mut fit = synthetic_fit(dims, Matrix::identity(2, 2), Matrix::identity(2, 2));
        fit.residual_gram = Matrix::zeros(2, 2);
        let v = aic_known_sigma(&fit, &SpdMatrix::identity(2)).unwrap();
        assert_relative_eq!(v.value, 40.0 * (2.0 * PI).ln() + 20.0, epsilon = 1e-12);
        assert_relative_eq!(v.value, 93.515_082_656_373_81, epsilon = 1e-9);
        assert_relative_eq!(sure_mat_regression(&fit, &SpdMatrix::identity(2)).unwrap(), -20.0);
    }

    #[test]
    fn maic_examples() {
        let dims = ModelDims::new(20, 7, 2).unwrap();
        let fit = synthetic_fit(dims, Matrix::identity(2, 2), Matrix::identity(2, 2));
        let sigma = SpdMatrix::identity(2);
        let base = aic_known_sigma(&fit, &sigma).unwrap().value;
        let m = maic(&fit, &sigma).unwrap();
        assert_relative_eq!(m.value, base - 2.0, epsilon = 1e-12);
        assert!(m.conditions_met());

        let boundary = synthetic_fit(ModelDims::new(20, 6, 2).unwrap(), Matrix::identity(2, 2), Matrix::identity(2, 2));
        let m = maic(&boundary, &sigma).unwrap();
        assert_eq!(m.value, aic_known_sigma(&boundary, &sigma).unwrap().value);
        assert!(!m.conditions_met());

        let singular = synthetic_fit(dims, Matrix::identity(2, 2), Matrix::zeros(2, 2));
        assert!(matches!(maic(&singular, &sigma), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn aic_and_aicc_examples() {
        let dims = ModelDims::new(20, 5, 2).unwrap();
        let fit = synthetic_fit(dims, Matrix::identity(2, 2), Matrix::identity(2, 2));
        // nq = 40 on top of 40 log 2π + 26
        assert_relative_eq!(aic(&fit).unwrap().value, 40.0 * (2.0 * PI).ln() + 26.0 + 40.0, epsilon = CRITERION_GRID);
        assert_relative_eq!(aic(&fit).unwrap().value - 40.0, 99.515_082_656_373_81, epsilon = 1e-9);

        let dims = ModelDims::new(30, 10, 1).unwrap();
        let fit = synthetic_fit(dims, Matrix::identity(1, 1), Matrix::identity(1, 1));
        let v = aicc(&fit).unwrap().value;
        assert_relative_eq!(v, 30.0 * (2.0 * PI).ln() + 60.0 / 18.0 * 11.0 + 30.0, epsilon = CRITERION_GRID);
        assert!((v - 30.0 - 91.803).abs() < 1e-3);
        assert_relative_eq!(v, 30.0 * (2.0 * PI).ln() + 30.0 * 40.0 / 18.0, epsilon = CRITERION_GRID);
    }

    #[test]
    fn aic_single_response_reduction() {
        let (_, fit) = random_fit(15, 4, 1, 3);
        let s2 = fit.sigma_hat[(0, 0)];
        assert_relative_eq!(
            aic(&fit).unwrap().value,
            15.0 * (2.0 * PI * s2).ln() + 15.0 + 2.0 * 5.0,
            epsilon = CRITERION_GRID
        );
    }

    #[test]
    fn aicc_requires_residual_dof() {
        let dims = ModelDims::new(13, 10, 2).unwrap();
        let fit = synthetic_fit(dims, Matrix::identity(2, 2), Matrix::identity(2, 2));
        assert!(matches!(aicc(&fit), Err(Error::DegreesOfFreedom(_))));
        assert!(matches!(maicc(&fit, None), Err(Error::DegreesOfFreedom(_))));
        assert!(aic(&fit).is_ok());
    }

    #[test]
    fn singular_sigma_hat_is_refused() {
        let mut rng = RngStream::new(1, 0).rng();
        let x = standard_normal_matrix(6, 5, &mut rng);
        let y = standard_normal_matrix(6, 2, &mut rng);
        let fit = fit_mle(&x, &y).unwrap();
        assert!(matches!(aic(&fit), Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn aicc_aic_gap_matches_formula_and_vanishes() {
        for (n, p, q) in [(30, 10, 1), (30, 10, 2), (50, 3, 3)] {
            let (_, fit) = random_fit(n, p, q, 5);
            let dims = fit.dims();
            let gap = aicc(&fit).unwrap().value - aic(&fit).unwrap().value;
            let k = dims.parameter_count();
            let expected = 2.0 * k * (n as f64 / dims.residual_dof() as f64 - 1.0);
            assert_relative_eq!(gap, expected, max_relative = 1e-10);
            assert!(gap > 0.0);
        }
        let gap_at = |n: usize| {
            let dims = ModelDims::new(n, 3, 2).unwrap();
            2.0 * dims.parameter_count() * (n as f64 / dims.residual_dof() as f64 - 1.0)
        };
        assert!(gap_at(1_000_000) < 2e-4 && gap_at(1_000_000) < gap_at(100));
    }

    #[test]
    fn cbar_examples() {
        // Single-response form 4n²(p − 4)/((n − p)(n − p + 2)) at n=30, p=10.
        assert_relative_eq!(cbar(ModelDims::new(30, 10, 1).unwrap()).unwrap(), 540.0 / 11.0, max_relative = 1e-14);
        assert_relative_eq!(cbar(ModelDims::new(30, 10, 2).unwrap()).unwrap(), 1920.0 / 119.0, max_relative = 1e-14);
        assert!(cbar(ModelDims::new(10_000, 6, 2).unwrap()).unwrap() < 0.0);
        assert!(matches!(cbar(ModelDims::new(12, 10, 1).unwrap()), Err(Error::DegreesOfFreedom(_))));
    }

    #[test]
    fn maicc_examples() {
        let dims = ModelDims::new(30, 10, 2).unwrap();
        // tr(Σ̂ G⁻¹) = 1 with Σ̂ = I/2 and G = I
        let fit = synthetic_fit(dims, Matrix::identity(2, 2) * 0.5, Matrix::identity(2, 2));
        let base = aicc(&fit).unwrap().value;
        assert_eq!(maicc(&fit, Some(0.0)).unwrap().value, base);
        let m = maicc(&fit, None).unwrap();
        assert_relative_eq!(m.value, base - 1920.0 / 119.0, epsilon = 1e-12);
        assert_relative_eq!(m.c_used.unwrap(), 16.134_453_781_512_6, epsilon = 1e-10);
        assert!(m.conditions_met());
        assert!(!maicc(&fit, Some(0.0)).unwrap().conditions_met());
        assert!(!maicc(&fit, Some(40.0)).unwrap().conditions_met());
    }

    #[test]
    fn sure_vec_examples() {
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let zero = |v: &DVector<f64>| DVector::zeros(v.len());
        assert_eq!(sure_vec(&y, &zero, Divergence::FiniteDifference), 3.0);
        let neg = |v: &DVector<f64>| -v.clone();
        let div = |v: &DVector<f64>| -(v.len() as f64);
        let expected = y.norm_squared() - 3.0;
        assert_relative_eq!(sure_vec(&y, &neg, Divergence::Analytic(&div)), expected, epsilon = 1e-12);
        assert_relative_eq!(sure_vec(&y, &neg, Divergence::FiniteDifference), expected, epsilon = 1e-8);
    }

    #[test]
    fn sure_vec_is_unbiased_for_james_stein() {
        // Stein's identity: E[SURE] = E‖θ̂ − θ‖² for θ̂ = (1 − (p−2)/‖y‖²) y.
        let p = 6;
        let theta = DVector::from_fn(p, |i, _| 0.3 * i as f64);
        let g = move |v: &DVector<f64>| -v * ((p as f64 - 2.0) / v.norm_squared());
        let div = move |v: &DVector<f64>| -((p as f64 - 2.0).powi(2)) / v.norm_squared();
        let mut rng = RngStream::new(77, 0).rng();
        let draws = 100_000;
        let mut diffs = Vec::with_capacity(draws);
        for _ in 0..draws {
            let y = &theta + DVector::from_column_slice(standard_normal_matrix(p, 1, &mut rng).as_slice());
            let loss = (&y + g(&y) - &theta).norm_squared();
            diffs.push(sure_vec(&y, &g, Divergence::Analytic(&div)) - loss);
        }
        let mean = diffs.iter().sum::<f64>() / draws as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / draws as f64).sqrt());
        // the analytic divergence agrees with finite differences
        let y = DVector::from_vec(vec![0.4, -1.2, 2.0, 0.1, 0.7, -0.3]);
        assert_relative_eq!(div(&y), finite_difference_divergence(&g, &y), epsilon = 1e-7);
    }

    #[test]
    fn johnstone_examples() {
        let y = DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let v = johnstone(&y).unwrap();
        assert_relative_eq!(v.value, 6.0);
        assert!(v.conditions_met());
        let y4 = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(johnstone(&y4).unwrap().value, 4.0);
        assert!(!johnstone(&y4).unwrap().conditions_met());
        assert!(johnstone(&DVector::zeros(6)).is_err());
    }

    #[test]
    fn matsuda_examples() {
        let mut y = Matrix::zeros(8, 2);
        y[(0, 0)] = 2.0;
        y[(1, 1)] = 1.0;
        let v = matsuda(&y).unwrap();
        assert_relative_eq!(v.value, 12.5, epsilon = 1e-12);
        assert!(v.conditions_met());
        // large equal singular values: the correction vanishes
        let big = Matrix::from_fn(8, 2, |i, j| if i == j { 1e6 } else { 0.0 });
        assert!((matsuda(&big).unwrap().value - 16.0).abs() < 1e-9);
        assert!(matsuda(&Matrix::zeros(8, 2)).is_err());
    }

    #[test]
    fn thm1_examples() {
        let y = Matrix::from_fn(7, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let v = thm1_estimator(&y).unwrap();
        assert_relative_eq!(v.value, 12.0, epsilon = 1e-12);
        assert!(v.conditions_met());
        let small = Matrix::from_fn(6, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        assert!(!thm1_estimator(&small).unwrap().conditions_met());
    }

    #[test]
    fn sure_identity_with_known_sigma_aic() {
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 9).rng();
            let x = standard_normal_matrix(18, 5, &mut rng);
            let g = standard_normal_matrix(5, 2, &mut rng);
            let sigma = SpdMatrix::from_symmetrized(g.transpose() * g + Matrix::identity(2, 2)).unwrap();
            let truth = RegressionTruth::new(x, standard_normal_matrix(5, 2, &mut rng), sigma.clone()).unwrap();
            let y = generate_response(&truth, &mut rng);
            let fit = fit_mle(truth.x(), &y).unwrap();
            let lhs = sure_mat_regression(&fit, &sigma).unwrap()
                + 36.0 * (2.0 * PI * E).ln()
                + 18.0 * sigma.log_det();
            assert_relative_eq!(lhs, aic_known_sigma(&fit, &sigma).unwrap().value, epsilon = 1e-10);
        }
    }

    #[test]
    fn aicc_aic_gap_is_bitwise_constant_across_fits() {
        let gaps: Vec<f64> = (0..100)
            .map(|seed| {
                let (_, fit) = random_fit(30, 10, 2, 1000 + seed);
                aicc(&fit).unwrap().value - aic(&fit).unwrap().value
            })
            .collect();
        assert!(gaps.iter().all(|g| g.to_bits() == gaps[0].to_bits()));
        assert_eq!(gaps[0], on_grid(aicc_aic_gap(ModelDims::new(30, 10, 2).unwrap()).unwrap()));
        let exact = aicc_aic_gap(ModelDims::new(30, 10, 2).unwrap()).unwrap();
        assert_relative_eq!(gaps[0], exact, epsilon = CRITERION_GRID);
    }

    #[test]
    fn scale_equivariance_single_response() {
        let (_, fit) = random_fit(30, 10, 1, 8);
        let mut rng = RngStream::new(8, 0).rng();
        let x = standard_normal_matrix(30, 10, &mut rng);
        let y = standard_normal_matrix(30, 1, &mut rng);
        let _ = fit;
        let fit = fit_mle(&x, &y).unwrap();
        let alpha: f64 = 3.7;
        let fit_scaled = fit_mle(&x, &(&y * alpha)).unwrap();
        let shift = 30.0 * (alpha * alpha).ln();
        assert_relative_eq!(aic(&fit_scaled).unwrap().value - aic(&fit).unwrap().value, shift, epsilon = 1e-9);
        assert_relative_eq!(aicc(&fit_scaled).unwrap().value - aicc(&fit).unwrap().value, shift, epsilon = 1e-9);
        let corr = |f: &FitResult| aicc(f).unwrap().value - maicc(f, None).unwrap().value;
        assert_relative_eq!(corr(&fit_scaled), corr(&fit), max_relative = 1e-10);
    }

    proptest! {
        #[test]
        fn thm1_reduces_to_johnstone_at_single_response(seed in 0u64..1000, p in 1usize..20) {
            let mut rng = RngStream::new(seed, 0).rng();
            let y = standard_normal_matrix(p, 1, &mut rng);
            let a = thm1_estimator(&y).unwrap().value;
            let b = johnstone(&DVector::from_column_slice(y.as_slice())).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn cbar_single_response_closed_form(p in 1usize..25, extra in 3usize..80) {
            let n = p + extra;
            let general = cbar(ModelDims::new(n, p, 1).unwrap()).unwrap();
            let (nf, pf) = (n as f64, p as f64);
            let single = 4.0 * nf * nf * (pf - 4.0) / ((nf - pf) * (nf - pf + 2.0));
            prop_assert!((general - single).abs() <= 1e-12 * single.abs().max(1e-300));
        }

        #[test]
        fn maicc_never_exceeds_aicc(seed in 0u64..300, c in 0.0f64..100.0) {
            let (_, fit) = random_fit(25, 8, 2, seed);
            prop_assert!(maicc(&fit, Some(c)).unwrap().value <= aicc(&fit).unwrap().value);
        }

        #[test]
        fn flags_track_hypotheses(n in 8usize..60, p in 1usize..12, q in 1usize..4) {
            prop_assume!(n >= p + q + 2);
            let dims = ModelDims::new(n, p, q).unwrap();
            let bound = cbar(dims).unwrap();
            let fit = synthetic_fit(dims, Matrix::identity(q, q), Matrix::identity(q, q));
            let m = maicc(&fit, None).unwrap();
            prop_assert_eq!(m.conditions_met(), bound > 0.0);
        }
    }
}
