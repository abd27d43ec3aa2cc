//! Numerical oracles for the matrix-calculus and Wishart-moment identities
//! behind the dominance results.
//!
//! Derivative identities are checked against central finite differences.
//! Expectation identities are checked by Monte Carlo: every replication
//! produces one vector of statistics, both sides of the identity are linear
//! in the means of that vector (plus exact constants), and the check reports
//! the largest componentwise z-score of `E[lhs] − E[rhs]`. Because both sides
//! come from the same draws the paired standard error is used.
//!
//! Negative controls reuse the same moments with one closed-form coefficient
//! scaled by 1.1; a sound check must then report a large z-score.

use std::fmt;

use nalgebra::Cholesky;

use crate::criteria::ModelDims;
use crate::error::{Error, Result};
use crate::matstat::{full_rank_singular_values, sample_wishart, standard_normal_matrix, Matrix, RngStream, SpdMatrix};
use crate::stats::{accumulate, Moments};

/// Central-difference step relative to `1 + |z|`.
pub const FD_STEP: f64 = 1e-5;
/// Absolute tolerance of the finite-difference checks.
pub const FD_TOLERANCE: f64 = 1e-5;
/// Monte Carlo checks pass when every componentwise |z| is below this.
pub const Z_PASS: f64 = 3.0;
/// Negative controls are detected when the largest |z| exceeds this.
pub const Z_DETECT: f64 = 5.0;
/// Multiplier applied to one coefficient in a negative control.
pub const PERTURBATION: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IdentityId {
    A1InvGramDeriv,
    A2TraceDeriv,
    A3Divergence,
    B1Stein,
    B2TraceProduct,
    B3WishartInvMean,
    B4InvAInv,
    B5TrinvTimesInv,
    B6TrinvTimesS,
    B7SasInv,
    B8aExp0,
    B8bExp,
}

impl IdentityId {
    pub const ALL: [IdentityId; 12] = [
        IdentityId::A1InvGramDeriv,
        IdentityId::A2TraceDeriv,
        IdentityId::A3Divergence,
        IdentityId::B1Stein,
        IdentityId::B2TraceProduct,
        IdentityId::B3WishartInvMean,
        IdentityId::B4InvAInv,
        IdentityId::B5TrinvTimesInv,
        IdentityId::B6TrinvTimesS,
        IdentityId::B7SasInv,
        IdentityId::B8aExp0,
        IdentityId::B8bExp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            IdentityId::A1InvGramDeriv => "A1_inv_gram_deriv",
            IdentityId::A2TraceDeriv => "A2_trace_deriv",
            IdentityId::A3Divergence => "A3_divergence",
            IdentityId::B1Stein => "B1_stein",
            IdentityId::B2TraceProduct => "B2_trace_product",
            IdentityId::B3WishartInvMean => "B3_wishart_inv_mean",
            IdentityId::B4InvAInv => "B4_inv_A_inv",
            IdentityId::B5TrinvTimesInv => "B5_trinv_times_inv",
            IdentityId::B6TrinvTimesS => "B6_trinv_times_S",
            IdentityId::B7SasInv => "B7_SAS_inv",
            IdentityId::B8aExp0 => "B8a_exp0",
            IdentityId::B8bExp => "B8b_exp",
        }
    }

    fn is_wishart(&self) -> bool {
        matches!(
            self,
            IdentityId::B2TraceProduct
                | IdentityId::B3WishartInvMean
                | IdentityId::B4InvAInv
                | IdentityId::B5TrinvTimesInv
                | IdentityId::B6TrinvTimesS
                | IdentityId::B7SasInv
        )
    }
}

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckStatistic {
    MaxAbsError(f64),
    /// Largest componentwise |z|.
    ZScore(f64),
}

impl CheckStatistic {
    pub fn value(&self) -> f64 {
        match self {
            CheckStatistic::MaxAbsError(v) | CheckStatistic::ZScore(v) => *v,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CheckStatistic::MaxAbsError(_) => "max_abs_error",
            CheckStatistic::ZScore(_) => "max_abs_z",
        }
    }
}

/// Outcome of one identity check.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheckReport {
    pub identity: IdentityId,
    pub statistic: CheckStatistic,
    pub tolerance: f64,
    pub passed: bool,
    /// Dimensions, degrees of freedom and test function used.
    pub config: String,
}

impl IdentityCheckReport {
    pub const CSV_HEADER: &'static str = "identity,config,statistic,value,tolerance,result";

    fn new(identity: IdentityId, statistic: CheckStatistic, tolerance: f64, config: String) -> Self {
        // NaN never passes
        let passed = statistic.value() < tolerance;
        Self {
            identity,
            statistic,
            tolerance,
            passed,
            config,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6e},{:e},{}",
            self.identity,
            self.config,
            self.statistic.kind(),
            self.statistic.value(),
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// A check run with a deliberately wrong closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeControlReport {
    pub identity: IdentityId,
    pub config: String,
    pub perturbation: String,
    pub max_abs_z: f64,
    pub detected: bool,
}

impl NegativeControlReport {
    pub const CSV_HEADER: &'static str = "identity,config,perturbation,max_abs_z,result";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6e},{}",
            self.identity,
            self.config,
            self.perturbation,
            self.max_abs_z,
            if self.detected { "DETECTED" } else { "MISSED" }
        )
    }
}

/// Monte Carlo check together with its coefficient-perturbation controls.
#[derive(Debug, Clone, PartialEq)]
pub struct McCheck {
    pub report: IdentityCheckReport,
    pub controls: Vec<NegativeControlReport>,
}

fn dims_config(p: usize, q: usize) -> String {
    format!("p={p} q={q}")
}

fn inv_gram(z: &Matrix) -> Result<Matrix> {
    let gram = z.transpose() * z;
    Cholesky::new(gram).map(|c| c.inverse()).ok_or_else(|| {
        let sv = full_rank_singular_values(z).err();
        sv.unwrap_or(Error::RankDeficient {
            smallest_singular_value: 0.0,
            tolerance: 0.0,
        })
    })
}

fn require_full_rank(z: &Matrix) -> Result<()> {
    full_rank_singular_values(z).map(|_| ())
}

fn fd_step(x: f64, scale: f64) -> f64 {
    scale * (1.0 + x.abs())
}

/// Central difference of a matrix-valued function of `z` in direction `(i, j)`.
fn central_difference<F>(z: &Matrix, i: usize, j: usize, scale: f64, f: &F) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    let h = fd_step(z[(i, j)], scale);
    let mut plus = z.clone();
    plus[(i, j)] += h;
    let mut minus = z.clone();
    minus[(i, j)] -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

/// `∂((ZᵀZ)⁻¹)_{kl}/∂Z_{ij} = −G_{kj}(ZG)_{il} − (GZᵀ)_{ki}G_{jl}` with
/// `G = (ZᵀZ)⁻¹`, returned as the `q × q` matrix over `(k, l)`.
pub fn inv_gram_derivative(z: &Matrix, i: usize, j: usize) -> Result<Matrix> {
    let g = inv_gram(z)?;
    let zg = z * &g;
    let q = z.ncols();
    Ok(Matrix::from_fn(q, q, |k, l| -g[(k, j)] * zg[(i, l)] - zg[(i, k)] * g[(j, l)]))
}

fn inv_gram_fd_error(z: &Matrix, scale: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let fd = central_difference(z, i, j, scale, &inv_gram)?;
            let exact = inv_gram_derivative(z, i, j)?;
            worst = worst.max((fd - exact).amax());
        }
    }
    Ok(worst)
}

/// `∂(ZᵀZ)⁻¹/∂Z_{ij}`: analytic derivative against central
/// differences over every `(i, j, k, l)`.
pub fn check_deriv_inv_gram(z: &Matrix, tol: f64) -> Result<IdentityCheckReport> {
    require_full_rank(z)?;
    let err = inv_gram_fd_error(z, FD_STEP)?;
    Ok(IdentityCheckReport::new(
        IdentityId::A1InvGramDeriv,
        CheckStatistic::MaxAbsError(err),
        tol,
        dims_config(z.nrows(), z.ncols()),
    ))
}

/// `∇_Z tr(S(ZᵀZ)⁻¹) = −2 Z G S G` for symmetric `S`.
pub fn trace_gradient(z: &Matrix, s: &Matrix) -> Result<Matrix> {
    let g = inv_gram(z)?;
    Ok(z * &g * s * &g * -2.0)
}

pub fn check_deriv_trace(z: &Matrix, s: &SpdMatrix, tol: f64) -> Result<IdentityCheckReport> {
    require_full_rank(z)?;
    if s.dim() != z.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "S is {0}x{0} but Z has {1} columns",
            s.dim(),
            z.ncols()
        )));
    }
    let exact = trace_gradient(z, s.matrix())?;
    let f = |w: &Matrix| -> Result<Matrix> {
        let g = inv_gram(w)?;
        Ok(Matrix::from_element(1, 1, (s.matrix() * g).trace()))
    };
    let mut worst: f64 = 0.0;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let fd = central_difference(z, i, j, FD_STEP, &f)?[(0, 0)];
            worst = worst.max((fd - exact[(i, j)]).abs());
        }
    }
    Ok(IdentityCheckReport::new(
        IdentityId::A2TraceDeriv,
        CheckStatistic::MaxAbsError(worst),
        tol,
        dims_config(z.nrows(), z.ncols()),
    ))
}

/// `Z G A G B` with `G = (ZᵀZ)⁻¹`.
fn divergence_field(z: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let g = inv_gram(z)?;
    Ok(z * &g * a * &g * b)
}

/// Closed-form divergence of `Z ↦ Z G A G B`:
/// `(p − q − 2) tr(GAGB) − tr(AG) tr(GB)`.
///
/// The general expression is `(p − q − 1) tr(GAGB) − tr(GAᵀGB) − tr(AG) tr(GB)`,
/// which reduces to the form above when `A` or `B` is symmetric. Both are
/// available; [`check_divergence_identity`] uses the general one so that it
/// is valid for any `A`, `B`.
pub fn divergence_closed_form(z: &Matrix, a: &Matrix, b: &Matrix, general: bool) -> Result<f64> {
    let (p, q) = (z.nrows() as f64, z.ncols() as f64);
    let g = inv_gram(z)?;
    let gagb = (&g * a * &g * b).trace();
    let cross = (a * &g).trace() * (&g * b).trace();
    if general {
        let gatgb = (&g * a.transpose() * &g * b).trace();
        Ok((p - q - 1.0) * gagb - gatgb - cross)
    } else {
        Ok((p - q - 2.0) * gagb - cross)
    }
}

fn divergence_fd(z: &Matrix, a: &Matrix, b: &Matrix, scale: f64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let h = fd_step(z[(i, j)], scale);
            let mut plus = z.clone();
            plus[(i, j)] += h;
            let mut minus = z.clone();
            minus[(i, j)] -= h;
            total += (divergence_field(&plus, a, b)?[(i, j)] - divergence_field(&minus, a, b)?[(i, j)]) / (2.0 * h);
        }
    }
    Ok(total)
}

pub fn check_divergence_identity(z: &Matrix, a: &Matrix, b: &Matrix, tol: f64) -> Result<IdentityCheckReport> {
    require_full_rank(z)?;
    let q = z.ncols();
    if a.shape() != (q, q) || b.shape() != (q, q) {
        return Err(Error::DimensionMismatch(format!("A and B must be {q}x{q}")));
    }
    let fd = divergence_fd(z, a, b, FD_STEP)?;
    let exact = divergence_closed_form(z, a, b, true)?;
    Ok(IdentityCheckReport::new(
        IdentityId::A3Divergence,
        CheckStatistic::MaxAbsError((fd - exact).abs()),
        tol,
        dims_config(z.nrows(), z.ncols()),
    ))
}

/// Ratio of finite-difference errors of the inverse-Gram derivative at
/// relative steps `h` and `h/2`; close to 4 for a second-order scheme when
/// truncation dominates rounding.
pub fn fd_error_halving_ratio(z: &Matrix, h: f64) -> Result<f64> {
    require_full_rank(z)?;
    Ok(inv_gram_fd_error(z, h)? / inv_gram_fd_error(z, h / 2.0)?)
}

/// Draws `p × q` standard normal matrices until the smallest singular value
/// reaches `min_singular_value`.
pub fn well_conditioned_matrix(p: usize, q: usize, min_singular_value: f64, stream: RngStream) -> Matrix {
    let mut rng = stream.rng();
    loop {
        let z = standard_normal_matrix(p, q, &mut rng);
        if let Ok(sv) = full_rank_singular_values(&z) {
            if sv[sv.len() - 1] >= min_singular_value {
                return z;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo machinery

/// Right-hand-side term: a coefficient times either per-component means of
/// replication statistics or exact per-component values.
#[derive(Debug, Clone)]
enum Basis {
    Mc(Vec<usize>),
    Exact(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Term {
    name: String,
    coef: f64,
    basis: Basis,
}

/// `E[v[lhs[c]]] = Σ_t coef_t · basis_t[c]` for every component `c`.
#[derive(Debug, Clone)]
struct Claim {
    lhs: Vec<usize>,
    terms: Vec<Term>,
}

impl Claim {
    fn max_abs_z(&self, m: &Moments, perturbed: Option<usize>) -> f64 {
        let mut worst: f64 = 0.0;
        for (c, &l) in self.lhs.iter().enumerate() {
            let mut w = vec![0.0; m.dim()];
            w[l] += 1.0;
            let mut constant = 0.0;
            for (t, term) in self.terms.iter().enumerate() {
                let coef = if perturbed == Some(t) { term.coef * PERTURBATION } else { term.coef };
                match &term.basis {
                    Basis::Mc(idx) => w[idx[c]] -= coef,
                    Basis::Exact(v) => constant += coef * v[c],
                }
            }
            let (mean, se) = m.linear_mean_se(&w);
            let diff = mean - constant;
            let z = if se > 0.0 {
                diff / se
            } else if diff.abs() <= 1e-10 * (1.0 + constant.abs()) {
                // deterministic statistic equal to its closed form
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z.abs());
        }
        worst
    }

    fn evaluate(&self, id: IdentityId, m: &Moments, config: String) -> McCheck {
        let report = IdentityCheckReport::new(id, CheckStatistic::ZScore(self.max_abs_z(m, None)), Z_PASS, config.clone());
        let controls = self
            .terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.coef != 0.0)
            .map(|(t, term)| {
                let z = self.max_abs_z(m, Some(t));
                NegativeControlReport {
                    identity: id,
                    config: config.clone(),
                    perturbation: format!("{}x{PERTURBATION}", term.name),
                    max_abs_z: z,
                    detected: z > Z_DETECT,
                }
            })
            .collect();
        McCheck { report, controls }
    }
}

fn require_reps(reps: usize) -> Result<()> {
    if reps < 2 {
        return Err(Error::Config("Monte Carlo checks need at least 2 replications".into()));
    }
    Ok(())
}

fn entries(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

// ---------------------------------------------------------------------------
// Stein identity

/// Test functions `g: R^{p×q} → R^{p×q}` for the Stein identity.
#[derive(Debug, Clone, PartialEq)]
pub enum SteinFunction {
    /// `g(Z) = Z`, divergence `pq`.
    Linear,
    /// `g(Z) = Z(ZᵀZ)⁻¹`, divergence `(p − q − 1) tr(ZᵀZ)⁻¹`.
    InvGram,
    /// `g(Z) = Z(ZᵀZ)⁻²`, divergence `(p − q − 2) tr(ZᵀZ)⁻² − (tr(ZᵀZ)⁻¹)²`.
    InvGramSquared,
    /// `g(Z) = C`, divergence 0.
    Constant(Matrix),
}

impl SteinFunction {
    pub fn label(&self) -> &'static str {
        match self {
            SteinFunction::Linear => "Z",
            SteinFunction::InvGram => "Z(ZtZ)^-1",
            SteinFunction::InvGramSquared => "Z(ZtZ)^-2",
            SteinFunction::Constant(_) => "const",
        }
    }

    /// Smallest `p − q` for which both sides have finite variance.
    pub fn min_excess_rows(&self) -> usize {
        match self {
            SteinFunction::Linear | SteinFunction::Constant(_) => 0,
            SteinFunction::InvGram => 4,
            SteinFunction::InvGramSquared => 8,
        }
    }
}

/// Stein's identity `E[tr((Z − Z̄)ᵀ g(Z))] = E[∇·g(Z)]` for
/// `Z ~ N_{p,q}(Z̄, I, I)`, with both sides from the same draws.
pub fn check_stein(zbar: &Matrix, g: &SteinFunction, reps: usize, seed: u64) -> Result<McCheck> {
    require_reps(reps)?;
    let (p, q) = zbar.shape();
    if let SteinFunction::Constant(c) = g {
        if c.shape() != (p, q) {
            return Err(Error::DimensionMismatch(format!("constant must be {p}x{q}")));
        }
    }
    let (pf, qf) = (p as f64, q as f64);
    // statistics: [lhs, tr G, tr G², (tr G)²]
    let stat = |rep: u64, out: &mut [f64]| -> Result<()> {
        let mut rng = RngStream::new(seed, rep).rng();
        let noise = standard_normal_matrix(p, q, &mut rng);
        let z = zbar + &noise;
        let (value, t1, t2) = match g {
            SteinFunction::Linear => (noise.dot(&z), 0.0, 0.0),
            SteinFunction::Constant(c) => (noise.dot(c), 0.0, 0.0),
            SteinFunction::InvGram | SteinFunction::InvGramSquared => {
                let gi = inv_gram(&z)?;
                let t1 = gi.trace();
                let g2 = &gi * &gi;
                let t2 = g2.trace();
                let field = if *g == SteinFunction::InvGram { &z * &gi } else { &z * g2 };
                (noise.dot(&field), t1, t2)
            }
        };
        out[0] = value;
        out[1] = t1;
        out[2] = t2;
        out[3] = t1 * t1;
        Ok(())
    };
    let moments = accumulate(reps, 4, stat)?;
    let terms = match g {
        SteinFunction::Linear => vec![Term {
            name: "pq".into(),
            coef: pf * qf,
            basis: Basis::Exact(vec![1.0]),
        }],
        SteinFunction::Constant(_) => vec![],
        SteinFunction::InvGram => vec![Term {
            name: "(p-q-1)".into(),
            coef: pf - qf - 1.0,
            basis: Basis::Mc(vec![1]),
        }],
        SteinFunction::InvGramSquared => vec![
            Term {
                name: "(p-q-2)".into(),
                coef: pf - qf - 2.0,
                basis: Basis::Mc(vec![2]),
            },
            Term {
                name: "-1".into(),
                coef: -1.0,
                basis: Basis::Mc(vec![3]),
            },
        ],
    };
    let claim = Claim { lhs: vec![0], terms };
    Ok(claim.evaluate(
        IdentityId::B1Stein,
        &moments,
        format!("{} g={} |Zbar|={:.3}", dims_config(p, q), g.label(), zbar.norm()),
    ))
}

// ---------------------------------------------------------------------------
// Wishart moments

/// Scale and test matrices for the Wishart identities.
#[derive(Debug, Clone, PartialEq)]
pub struct WishartConfig {
    pub dof: usize,
    pub scale: SpdMatrix,
    /// General square matrix (must be positive semidefinite for B4).
    pub a: Matrix,
    pub b: Matrix,
}

impl WishartConfig {
    /// A fixed non-identity scale `Σ_{ij} = s_i s_j 0.4^{|i−j|}`, a
    /// non-symmetric `A` with non-zero trace, and a second matrix `B`.
    pub fn standard(q: usize, dof: usize) -> Self {
        let s = |i: usize| 1.0 + 0.25 * i as f64;
        let scale = Matrix::from_fn(q, q, |i, j| s(i) * s(j) * 0.4f64.powi((i as i32 - j as i32).abs()));
        let a = Matrix::from_fn(q, q, |i, j| if i == j { 1.0 + 0.5 * i as f64 } else { 0.3 * (i as f64 - j as f64) + 0.2 });
        let b = Matrix::from_fn(q, q, |i, j| if i == j { 2.0 - 0.3 * i as f64 } else { 0.1 * (i + 2 * j) as f64 - 0.25 });
        Self {
            dof,
            scale: SpdMatrix::new(scale).expect("diagonally dominant scale"),
            a,
            b,
        }
    }

    /// Positive semidefinite `A Aᵀ`, used where the identity needs `A ⪰ 0`.
    fn psd_a(&self) -> Matrix {
        &self.a * self.a.transpose()
    }

    fn q(&self) -> usize {
        self.scale.dim()
    }

    fn label(&self) -> String {
        let sigma = if self.scale.matrix() == &Matrix::identity(self.q(), self.q()) { "I" } else { "general" };
        format!("q={} d={} Sigma={sigma}", self.q(), self.dof)
    }
}

/// Margin `d − q` each Wishart identity needs for its Monte Carlo estimate
/// to have finite variance (the identity itself holds with a smaller one).
pub fn wishart_min_margin(id: IdentityId) -> usize {
    match id {
        IdentityId::B2TraceProduct => 0,
        IdentityId::B3WishartInvMean | IdentityId::B6TrinvTimesS | IdentityId::B7SasInv => 4,
        IdentityId::B4InvAInv | IdentityId::B5TrinvTimesInv => 8,
        _ => usize::MAX,
    }
}

fn wishart_required_margin(id: IdentityId) -> (usize, &'static str) {
    match id {
        IdentityId::B2TraceProduct => (0, "d >= q"),
        IdentityId::B3WishartInvMean | IdentityId::B6TrinvTimesS | IdentityId::B7SasInv => (2, "d - q - 1 > 0"),
        _ => (4, "d - q - 3 > 0"),
    }
}

/// Monte Carlo check of one of the Wishart moment identities B2–B7 for
/// `S ~ W_q(d, Σ)`.
pub fn check_wishart_identity(id: IdentityId, config: &WishartConfig, reps: usize, seed: u64) -> Result<McCheck> {
    if !id.is_wishart() {
        return Err(Error::Config(format!("{id} is not a Wishart moment identity")));
    }
    require_reps(reps)?;
    let q = config.q();
    let d = config.dof;
    let (margin, rule) = wishart_required_margin(id);
    if d < q + margin {
        return Err(Error::DegreesOfFreedom(format!("{id} needs {rule} (d={d}, q={q})")));
    }
    if config.a.shape() != (q, q) || config.b.shape() != (q, q) {
        return Err(Error::DimensionMismatch(format!("test matrices must be {q}x{q}")));
    }
    let a = if id == IdentityId::B4InvAInv { config.psd_a() } else { config.a.clone() };
    let b = &config.b;
    let sigma = config.scale.matrix();
    let sigma_inv = config.scale.inverse();
    let (df, qf) = (d as f64, q as f64);
    let eye = Matrix::identity(q, q);

    let dim = if id == IdentityId::B2TraceProduct { 1 } else { q * q };
    let stat = |rep: u64, out: &mut [f64]| -> Result<()> {
        let mut rng = RngStream::new(seed, rep).rng();
        let s = sample_wishart(d, &config.scale, &mut rng)?;
        let sm = s.matrix();
        let value = match id {
            IdentityId::B2TraceProduct => Matrix::from_element(1, 1, (&a * sm).trace() * (b * sm).trace()),
            IdentityId::B3WishartInvMean => s.inverse(),
            IdentityId::B4InvAInv => {
                let inv = s.inverse();
                &inv * &a * &inv
            }
            IdentityId::B5TrinvTimesInv => {
                let inv = s.inverse();
                &inv * inv.trace()
            }
            IdentityId::B6TrinvTimesS => sm * s.inverse().trace(),
            IdentityId::B7SasInv => sm * &a * s.inverse(),
            _ => unreachable!(),
        };
        out.copy_from_slice(value.as_slice());
        Ok(())
    };
    let moments = accumulate(reps, dim, stat)?;

    let exact = |name: &str, coef: f64, m: Matrix| Term {
        name: name.into(),
        coef,
        basis: Basis::Exact(entries(&m)),
    };
    let terms = match id {
        IdentityId::B2TraceProduct => {
            let one = |v: f64| Matrix::from_element(1, 1, v);
            vec![
                exact("d[tr(ASBS)]", df, one((&a * sigma * b * sigma).trace())),
                exact("d[tr(AtSBS)]", df, one((a.transpose() * sigma * b * sigma).trace())),
                exact("d^2", df * df, one((&a * sigma).trace() * (b * sigma).trace())),
            ]
        }
        IdentityId::B3WishartInvMean => vec![exact("1/(d-q-1)", 1.0 / (df - qf - 1.0), sigma_inv.clone())],
        IdentityId::B4InvAInv => {
            let k = (df - qf) * (df - qf - 3.0);
            vec![
                exact("1/((d-q)(d-q-1)(d-q-3))", 1.0 / (k * (df - qf - 1.0)), &sigma_inv * (&sigma_inv * &a).trace()),
                exact("1/((d-q)(d-q-3))", 1.0 / k, &sigma_inv * &a * &sigma_inv),
            ]
        }
        IdentityId::B5TrinvTimesInv => {
            let k = (df - qf) * (df - qf - 1.0) * (df - qf - 3.0);
            vec![
                exact("(d-q-2)/k", (df - qf - 2.0) / k, &sigma_inv * sigma_inv.trace()),
                exact("2/k", 2.0 / k, &sigma_inv * &sigma_inv),
            ]
        }
        IdentityId::B6TrinvTimesS => vec![
            exact("d/(d-q-1)", df / (df - qf - 1.0), sigma * sigma_inv.trace()),
            exact("-2/(d-q-1)", -2.0 / (df - qf - 1.0), eye.clone()),
        ],
        IdentityId::B7SasInv => {
            let k = 1.0 / (df - qf - 1.0);
            vec![
                exact("d/(d-q-1)", df * k, sigma * &a * &sigma_inv),
                exact("-1/(d-q-1)[At]", -k, a.transpose()),
                exact("-1/(d-q-1)[trA]", -k, &eye * a.trace()),
            ]
        }
        _ => unreachable!(),
    };
    let claim = Claim {
        lhs: (0..dim).collect(),
        terms,
    };
    Ok(claim.evaluate(id, &moments, config.label()))
}

// ---------------------------------------------------------------------------
// Cross expectations

/// Which cross-expectation identity to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossExpectation {
    /// `E[tr(EᵀE) tr G] = pq E[tr G] − 2(p−q−2) E[tr G²] + 2 E[(tr G)²]`.
    Exp0,
    /// The Wishart-weighted version with `S ~ W_q(n − p, I/n)`.
    Exp,
    /// `Exp` with `S` replaced by its mean `(n − p)/n · I`; the identity
    /// no longer holds, so this must be flagged.
    ExpDegenerate,
}

fn cross_preconditions(dims: ModelDims, zbar: &Matrix) -> Result<()> {
    let ModelDims { p, q, .. } = dims;
    if zbar.shape() != (p, q) {
        return Err(Error::DimensionMismatch(format!("Zbar must be {p}x{q}")));
    }
    if dims.residual_dof() <= 0 {
        return Err(Error::DegreesOfFreedom(format!("n - p - q - 1 = {} must be positive", dims.residual_dof())));
    }
    if p < q + 4 {
        return Err(Error::DegreesOfFreedom(format!(
            "p = {p} must be at least q + 4 = {} for finite moments",
            q + 4
        )));
    }
    Ok(())
}

/// Both sides of the cross-expectation identities from shared draws of
/// `Z ~ N_{p,q}(Z̄, I, I)` (and `S` for [`CrossExpectation::Exp`]).
pub fn check_cross_expectation(which: CrossExpectation, dims: ModelDims, zbar: &Matrix, reps: usize, seed: u64) -> Result<McCheck> {
    cross_preconditions(dims, zbar)?;
    require_reps(reps)?;
    let ModelDims { n, p, q } = dims;
    let (nf, pf, qf) = (n as f64, p as f64, q as f64);
    let m = nf - pf - qf - 1.0;
    let scale = SpdMatrix::scaled_identity(q, 1.0 / nf)?;
    // statistics: [lhs, tr G, tr G², (tr G)²]
    let stat = |rep: u64, out: &mut [f64]| -> Result<()> {
        let mut rng = RngStream::new(seed, rep).rng();
        let noise = standard_normal_matrix(p, q, &mut rng);
        let z = zbar + &noise;
        let g = inv_gram(&z)?;
        let t1 = g.trace();
        out[0] = match which {
            CrossExpectation::Exp0 => noise.norm_squared() * t1,
            CrossExpectation::Exp => {
                let s = sample_wishart(n - p, &scale, &mut rng)?;
                let ete = noise.transpose() * &noise;
                s.trace_solve(&ete) * (s.matrix() * &g).trace()
            }
            CrossExpectation::ExpDegenerate => {
                let s = Matrix::identity(q, q) * ((nf - pf) / nf);
                let ete = noise.transpose() * &noise;
                (ete * (nf / (nf - pf))).trace() * (s * &g).trace()
            }
        };
        out[1] = t1;
        out[2] = (&g * &g).trace();
        out[3] = t1 * t1;
        Ok(())
    };
    let moments = accumulate(reps, 4, stat)?;
    let mc = |name: &str, coef: f64, i: usize| Term {
        name: name.into(),
        coef,
        basis: Basis::Mc(vec![i]),
    };
    let (id, terms) = match which {
        CrossExpectation::Exp0 => (
            IdentityId::B8aExp0,
            vec![
                mc("pq", pf * qf, 1),
                mc("-2(p-q-2)", -2.0 * (pf - qf - 2.0), 2),
                mc("2", 2.0, 3),
            ],
        ),
        CrossExpectation::Exp | CrossExpectation::ExpDegenerate => (
            IdentityId::B8bExp,
            vec![
                mc("p((n-p)q-2)/(n-p-q-1)", pf * ((nf - pf) * qf - 2.0) / m, 1),
                mc("-2((n-p-1)(p-q-2)+2)/(n-p-q-1)", -2.0 * ((nf - pf - 1.0) * (pf - qf - 2.0) + 2.0) / m, 2),
                mc("2(n-q-2)/(n-p-q-1)", 2.0 * (nf - qf - 2.0) / m, 3),
            ],
        ),
    };
    let degenerate = if which == CrossExpectation::ExpDegenerate { " S=E[S]" } else { "" };
    let config = match which {
        CrossExpectation::Exp0 => format!("{} |Zbar|={:.3}", dims_config(p, q), zbar.norm()),
        _ => format!("n={n} {} |Zbar|={:.3}{degenerate}", dims_config(p, q), zbar.norm()),
    };
    Ok(Claim { lhs: vec![0], terms }.evaluate(id, &moments, config))
}

// ---------------------------------------------------------------------------
// Batteries

/// Complete output of a battery run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatteryReport {
    pub checks: Vec<IdentityCheckReport>,
    pub controls: Vec<NegativeControlReport>,
}

impl BatteryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn all_controls_detected(&self) -> bool {
        self.controls.iter().all(|c| c.detected)
    }

    pub fn checks_csv(&self) -> String {
        let mut out = String::from(IdentityCheckReport::CSV_HEADER);
        out.push('\n');
        for c in &self.checks {
            out.push_str(&c.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn controls_csv(&self) -> String {
        let mut out = String::from(NegativeControlReport::CSV_HEADER);
        out.push('\n');
        for c in &self.controls {
            out.push_str(&c.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Parameters of a battery run.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryConfig {
    pub ps: Vec<usize>,
    pub qs: Vec<usize>,
    pub dofs: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            ps: vec![6, 8, 12],
            qs: vec![1, 2, 3],
            dofs: vec![10, 20],
            reps: 100_000,
            seed: 20_240_601,
        }
    }
}

/// `Z̄` with `shift` on the leading diagonal and zeros elsewhere.
pub fn shifted_mean(p: usize, q: usize, shift: f64) -> Matrix {
    Matrix::from_fn(p, q, |i, j| if i == j { shift } else { 0.0 })
}

/// Smallest `p − q` at which the cross-expectation statistics have finite
/// variance at `Z̄ = O`: `(tr G)²` needs `E[λ_min(ZᵀZ)⁻⁴] < ∞`, i.e.
/// `p − q + 1 > 8`. The identities themselves only need `p ≥ q + 4`, but below
/// this margin the z-score is not calibrated (heavy right tail).
pub const CROSS_MIN_EXCESS_ROWS: usize = 8;

/// Runs every identity over the configured grid. Configurations where a
/// Monte Carlo estimate would have infinite variance are left out (see
/// [`SteinFunction::min_excess_rows`], [`wishart_min_margin`] and
/// [`CROSS_MIN_EXCESS_ROWS`]).
pub fn run_battery(config: &BatteryConfig) -> Result<BatteryReport> {
    let mut report = BatteryReport::default();
    let mut stream = 0u64;
    let mut next_seed = || {
        stream += 1;
        crate::matstat::derive_seed(config.seed, stream)
    };

    for &p in &config.ps {
        for &q in &config.qs {
            if p < q {
                continue;
            }
            let z = well_conditioned_matrix(p, q, 0.3, RngStream::new(next_seed(), 0));
            let mut rng = RngStream::new(next_seed(), 0).rng();
            let g = standard_normal_matrix(q + 2, q, &mut rng);
            let s = SpdMatrix::from_symmetrized(g.transpose() * g + Matrix::identity(q, q) * 0.5)?;
            let a = standard_normal_matrix(q, q, &mut rng);
            let b = standard_normal_matrix(q, q, &mut rng);
            report.checks.push(check_deriv_inv_gram(&z, FD_TOLERANCE)?);
            report.checks.push(check_deriv_trace(&z, &s, FD_TOLERANCE)?);
            report.checks.push(check_divergence_identity(&z, &a, &b, FD_TOLERANCE)?);

            let zbar = shifted_mean(p, q, 1.0);
            let functions = [
                SteinFunction::Linear,
                SteinFunction::InvGram,
                SteinFunction::InvGramSquared,
                SteinFunction::Constant(standard_normal_matrix(p, q, &mut rng)),
            ];
            for f in functions.iter().filter(|f| p >= q + f.min_excess_rows()) {
                report.checks.push(check_stein(&zbar, f, config.reps, next_seed())?.report);
            }

            if p >= q + CROSS_MIN_EXCESS_ROWS {
                let zbar0 = Matrix::zeros(p, q);
                let exp0 = check_cross_expectation(CrossExpectation::Exp0, ModelDims::new_unchecked(p + q + 2, p, q), &zbar0, config.reps, next_seed())?;
                report.checks.push(exp0.report);
                for &dof in &config.dofs {
                    let dims = ModelDims::new_unchecked(p + dof, p, q);
                    if dims.residual_dof() <= 0 {
                        continue;
                    }
                    let exp = check_cross_expectation(CrossExpectation::Exp, dims, &zbar0, config.reps, next_seed())?;
                    report.checks.push(exp.report);
                }
            }
        }
    }

    for &q in &config.qs {
        for &dof in &config.dofs {
            let wc = WishartConfig::standard(q, dof);
            for id in IdentityId::ALL.into_iter().filter(|id| id.is_wishart()) {
                if dof < q + wishart_min_margin(id) {
                    continue;
                }
                report.checks.push(check_wishart_identity(id, &wc, config.reps, next_seed())?.report);
            }
        }
    }
    Ok(report)
}

/// Negative controls: every coefficient of every Monte Carlo identity scaled
/// by 1.1 on one representative configuration, plus the degenerate-`S`
/// cross expectation.
pub fn run_negative_controls(reps: usize, seed: u64) -> Result<BatteryReport> {
    let mut report = BatteryReport::default();
    let seeds = |k: u64| crate::matstat::derive_seed(seed, k);
    let (p, q, dof) = (8, 2, 10);

    let zbar = shifted_mean(p, q, 1.0);
    for (k, f) in [SteinFunction::Linear, SteinFunction::InvGram].iter().enumerate() {
        let check = check_stein(&zbar, f, reps, seeds(k as u64))?;
        report.checks.push(check.report);
        report.controls.extend(check.controls);
    }
    let wc = WishartConfig::standard(q, dof);
    for (k, id) in IdentityId::ALL.into_iter().filter(|id| id.is_wishart()).enumerate() {
        let check = check_wishart_identity(id, &wc, reps, seeds(10 + k as u64))?;
        report.checks.push(check.report);
        report.controls.extend(check.controls);
    }
    let zbar0 = Matrix::zeros(p, q);
    let exp0 = check_cross_expectation(CrossExpectation::Exp0, ModelDims::new_unchecked(p + dof, p, q), &zbar0, reps, seeds(20))?;
    report.checks.push(exp0.report);
    report.controls.extend(exp0.controls);
    let exp = check_cross_expectation(CrossExpectation::Exp, ModelDims::new_unchecked(p + dof, p, q), &zbar0, reps, seeds(21))?;
    report.checks.push(exp.report);
    report.controls.extend(exp.controls);

    let degenerate = check_cross_expectation(CrossExpectation::ExpDegenerate, ModelDims::new_unchecked(p + dof, p, q), &zbar0, reps, seeds(22))?;
    let z = degenerate.report.statistic.value();
    report.controls.push(NegativeControlReport {
        identity: IdentityId::B8bExp,
        config: degenerate.report.config,
        perturbation: "S replaced by E[S]".into(),
        max_abs_z: z,
        detected: z > Z_DETECT,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn embedded_identity(p: usize, q: usize) -> Matrix {
        shifted_mean(p, q, 1.0)
    }

    #[test]
    fn inv_gram_derivative_on_embedded_identity() {
        let report = check_deriv_inv_gram(&embedded_identity(4, 2), 1e-7).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn scalar_inv_gram_derivative() {
        let z = Matrix::from_element(1, 1, 1.7);
        let d = inv_gram_derivative(&z, 0, 0).unwrap()[(0, 0)];
        assert_relative_eq!(d, -2.0 / 1.7f64.powi(3), max_relative = 1e-14);
    }

    #[test]
    fn inv_gram_derivative_random_matrices() {
        for k in 0..10 {
            let z = well_conditioned_matrix(8, 3, 0.3, RngStream::new(5, k));
            assert!(check_deriv_inv_gram(&z, 1e-6).unwrap().passed);
        }
    }

    #[test]
    fn trace_gradient_identity_specialization() {
        let z = well_conditioned_matrix(6, 2, 0.3, RngStream::new(6, 0));
        let g = inv_gram(&z).unwrap();
        let grad = trace_gradient(&z, &Matrix::identity(2, 2)).unwrap();
        let expected = &z * &g * &g * -2.0;
        assert!((grad - expected).amax() < 1e-14);
        let s = SpdMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        assert!(check_deriv_trace(&z, &s, 1e-6).unwrap().passed);
    }

    #[test]
    fn trace_gradient_vector_case() {
        let z = Matrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let s = 1.3;
        let grad = trace_gradient(&z, &Matrix::from_element(1, 1, s)).unwrap();
        let norm2 = z.norm_squared();
        for i in 0..3 {
            assert_relative_eq!(grad[(i, 0)], -2.0 * s * z[(i, 0)] / (norm2 * norm2), max_relative = 1e-13);
        }
    }

    #[test]
    fn divergence_identity_cases() {
        let z = well_conditioned_matrix(7, 2, 0.3, RngStream::new(7, 0));
        let eye = Matrix::identity(2, 2);
        // A = B = I: exact quantity of the matrix-mean estimator
        let g = inv_gram(&z).unwrap();
        let expected = 3.0 * (&g * &g).trace() - g.trace().powi(2);
        assert_relative_eq!(divergence_closed_form(&z, &eye, &eye, false).unwrap(), expected, max_relative = 1e-12);
        assert!(check_divergence_identity(&z, &eye, &eye, 1e-5).unwrap().passed);

        let mut rng = RngStream::new(7, 1).rng();
        let a = standard_normal_matrix(2, 2, &mut rng);
        let b = standard_normal_matrix(2, 2, &mut rng);
        assert!(check_divergence_identity(&z, &a, &b, 1e-5).unwrap().passed);

        // p = q + 2 leaves only the product of traces
        let z4 = well_conditioned_matrix(4, 2, 0.3, RngStream::new(7, 2));
        let g4 = inv_gram(&z4).unwrap();
        assert_relative_eq!(divergence_closed_form(&z4, &eye, &eye, false).unwrap(), -g4.trace().powi(2), max_relative = 1e-12);
    }

    #[test]
    fn symmetric_form_needs_a_symmetric_factor() {
        let z = well_conditioned_matrix(7, 2, 0.3, RngStream::new(8, 0));
        let mut rng = RngStream::new(8, 1).rng();
        let a = standard_normal_matrix(2, 2, &mut rng);
        let b = standard_normal_matrix(2, 2, &mut rng);
        let bs = &b + b.transpose();
        let general = divergence_closed_form(&z, &a, &bs, true).unwrap();
        let symmetric = divergence_closed_form(&z, &a, &bs, false).unwrap();
        assert_relative_eq!(general, symmetric, max_relative = 1e-12);
        let fd = divergence_fd(&z, &a, &b, FD_STEP).unwrap();
        assert!((fd - divergence_closed_form(&z, &a, &b, true).unwrap()).abs() < 1e-5);
        assert!((fd - divergence_closed_form(&z, &a, &b, false).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn step_halving_is_second_order() {
        let z = well_conditioned_matrix(5, 2, 0.5, RngStream::new(9, 0));
        let ratio = fd_error_halving_ratio(&z, 1e-2).unwrap();
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rank_deficient_inputs_are_rejected() {
        let z = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(check_deriv_inv_gram(&z, 1e-6), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn stein_linear_at_zero_mean() {
        let check = check_stein(&Matrix::zeros(4, 2), &SteinFunction::Linear, 20_000, 1).unwrap();
        assert!(check.report.passed, "{:?}", check.report);
    }

    #[test]
    fn stein_constant_function() {
        let zbar = shifted_mean(5, 2, 2.0);
        let c = Matrix::from_fn(5, 2, |i, j| (i as f64) - 2.0 * j as f64);
        let check = check_stein(&zbar, &SteinFunction::Constant(c), 20_000, 2).unwrap();
        assert!(check.report.passed);
        assert!(check.controls.is_empty());
    }

    #[test]
    fn stein_inverse_gram() {
        let check = check_stein(&Matrix::zeros(8, 2), &SteinFunction::InvGram, 100_000, 3).unwrap();
        assert!(check.report.passed, "{:?}", check.report);
    }

    #[test]
    fn wishart_inverse_mean_identity_scale() {
        let config = WishartConfig {
            scale: SpdMatrix::identity(2),
            ..WishartConfig::standard(2, 10)
        };
        let check = check_wishart_identity(IdentityId::B3WishartInvMean, &config, 100_000, 4).unwrap();
        assert!(check.report.passed, "{:?}", check.report);
        assert_eq!(check.report.config, "q=2 d=10 Sigma=I");
    }

    #[test]
    fn wishart_closed_forms_at_identity() {
        // B5 at Σ = I collapses to (q(d−q−2)+2)/((d−q)(d−q−1)(d−q−3)) I
        let (d, q) = (12.0, 3.0);
        let k = (d - q) * (d - q - 1.0) * (d - q - 3.0);
        assert_relative_eq!((d - q - 2.0) / k * q + 2.0 / k, (q * (d - q - 2.0) + 2.0) / k);
        // B2 with A = B = Σ = I: 2dq + d²q²
        assert_relative_eq!(d * q + d * q + d * d * q * q, 2.0 * d * q + d * d * q * q);
    }

    #[test]
    fn wishart_dof_preconditions() {
        let config = WishartConfig::standard(3, 6);
        assert!(matches!(
            check_wishart_identity(IdentityId::B4InvAInv, &config, 10, 1),
            Err(Error::DegreesOfFreedom(_))
        ));
        assert!(check_wishart_identity(IdentityId::B3WishartInvMean, &config, 10, 1).is_ok());
        assert!(matches!(
            check_wishart_identity(IdentityId::A1InvGramDeriv, &config, 10, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_statistics_have_zero_z() {
        // at q = 1, tr(S⁻¹)S ≡ 1 and SAS⁻¹ ≡ A
        let config = WishartConfig::standard(1, 10);
        for id in [IdentityId::B6TrinvTimesS, IdentityId::B7SasInv] {
            let check = check_wishart_identity(id, &config, 500, 5).unwrap();
            assert_eq!(check.report.statistic.value(), 0.0);
            assert!(check.controls.iter().all(|c| c.detected));
        }
    }

    #[test]
    fn cross_expectation_preconditions() {
        let zbar = Matrix::zeros(5, 2);
        let err = check_cross_expectation(CrossExpectation::Exp0, ModelDims::new_unchecked(30, 5, 2), &zbar, 10, 1);
        assert!(matches!(err, Err(Error::DegreesOfFreedom(_))));
        let zbar = Matrix::zeros(8, 2);
        let err = check_cross_expectation(CrossExpectation::Exp, ModelDims::new_unchecked(11, 8, 2), &zbar, 10, 1);
        assert!(matches!(err, Err(Error::DegreesOfFreedom(_))));
    }

    #[test]
    fn cross_expectations_hold() {
        let zbar = Matrix::zeros(8, 2);
        let exp0 = check_cross_expectation(CrossExpectation::Exp0, ModelDims::new_unchecked(30, 8, 2), &zbar, 100_000, 6).unwrap();
        assert!(exp0.report.passed, "{:?}", exp0.report);
        let zbar = Matrix::zeros(10, 2);
        let exp = check_cross_expectation(CrossExpectation::Exp, ModelDims::new_unchecked(30, 10, 2), &zbar, 100_000, 7).unwrap();
        assert!(exp.report.passed, "{:?}", exp.report);
    }

    #[test]
    fn report_rows() {
        let report = check_deriv_inv_gram(&embedded_identity(3, 1), 1e-6).unwrap();
        let row = report.csv_row();
        assert!(row.starts_with("A1_inv_gram_deriv,p=3 q=1,max_abs_error,"));
        assert!(row.ends_with(",PASS"));
        let nan = IdentityCheckReport::new(IdentityId::B1Stein, CheckStatistic::ZScore(f64::NAN), 3.0, String::new());
        assert!(!nan.passed);
    }
}
