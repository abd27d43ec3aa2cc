//! JSON experiment description and its validation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::criteria::{cbar, CriterionName, ModelDims};
use crate::error::{Error, Result};
use crate::matstat::{Matrix, SpdMatrix};

/// Which model the replications are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Regression with unknown `Σ`; estimators target the discrepancy `d`.
    #[default]
    UnknownSigma,
    /// Regression with known `Σ`; estimators target the known-`Σ` discrepancy
    /// (`SURE_MAT` targets the Mahalanobis loss of `X B̂`).
    KnownSigma,
    /// `Y ~ N_{p,q}(M, I, I)` with `M̂ = Y`; estimators target `‖Y − M‖²_F`.
    /// `n` is ignored.
    NormalMean,
}

impl Setting {
    fn allows(&self, name: CriterionName) -> bool {
        use CriterionName::*;
        match self {
            Setting::UnknownSigma => matches!(name, Aic | Aicc | Maicc),
            Setting::KnownSigma => matches!(name, AicKnown | Maic | SureMat),
            Setting::NormalMean => matches!(name, SureVec | Johnstone | Matsuda | Thm1),
        }
    }
}

/// Where the design matrix comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XSource {
    /// I.i.d. `N(0, 1)` entries.
    #[default]
    Generated,
    /// CSV file with `n` rows and `p` columns; requires `redraw_x = false`.
    File {
        path: PathBuf,
        #[serde(default)]
        header: bool,
    },
}

/// True coefficient matrix (or mean matrix in the normal-mean setting).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BSpec {
    #[default]
    Zero,
    /// `B = Σᵢ σᵢ eᵢ eᵢᵀ`; missing trailing values are zero.
    SingularValues(Vec<f64>),
    /// Single-response coefficient vector of length `p`.
    Coefficients(Vec<f64>),
    /// Row-major `p × q` matrix.
    Explicit(Vec<Vec<f64>>),
}

impl BSpec {
    pub fn build(&self, p: usize, q: usize) -> Result<Matrix> {
        let b = match self {
            BSpec::Zero => Matrix::zeros(p, q),
            BSpec::SingularValues(sv) => {
                if sv.len() > p.min(q) {
                    return Err(Error::Config(format!(
                        "{} singular values given for a {p}x{q} coefficient matrix",
                        sv.len()
                    )));
                }
                if sv.iter().any(|s| *s < 0.0) {
                    return Err(Error::Config("singular values must be non-negative".into()));
                }
                let mut b = Matrix::zeros(p, q);
                for (i, s) in sv.iter().enumerate() {
                    b[(i, i)] = *s;
                }
                b
            }
            BSpec::Coefficients(beta) => {
                if q != 1 || beta.len() != p {
                    return Err(Error::Config(format!(
                        "coefficient vector of length {} needs q = 1 and p = {} (have p={p}, q={q})",
                        beta.len(),
                        beta.len()
                    )));
                }
                Matrix::from_column_slice(p, 1, beta)
            }
            BSpec::Explicit(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != q) {
                    return Err(Error::Config(format!("explicit coefficients must be {p}x{q}")));
                }
                Matrix::from_fn(p, q, |i, j| rows[i][j])
            }
        };
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        Ok(b)
    }
}

/// Error covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSpec {
    /// `σ² I_q`.
    ScaledIdentity(f64),
    /// Standard deviations and a common correlation `r`.
    Correlation { std_devs: Vec<f64>, r: f64 },
    /// Row-major `q × q` matrix.
    Explicit(Vec<Vec<f64>>),
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::ScaledIdentity(1.0)
    }
}

impl SigmaSpec {
    pub fn build(&self, q: usize) -> Result<SpdMatrix> {
        let m = match self {
            SigmaSpec::ScaledIdentity(s2) => Matrix::identity(q, q) * *s2,
            SigmaSpec::Correlation { std_devs, r } => {
                if std_devs.len() != q {
                    return Err(Error::Config(format!(
                        "{} standard deviations given for q = {q}",
                        std_devs.len()
                    )));
                }
                Matrix::from_fn(q, q, |i, j| {
                    std_devs[i] * std_devs[j] * if i == j { 1.0 } else { *r }
                })
            }
            SigmaSpec::Explicit(rows) => {
                if rows.len() != q || rows.iter().any(|r| r.len() != q) {
                    return Err(Error::Config(format!("explicit covariance must be {q}x{q}")));
                }
                Matrix::from_fn(q, q, |i, j| rows[i][j])
            }
        };
        SpdMatrix::new(m).map_err(|e| Error::Config(format!("covariance: {e}")))
    }

    fn is_identity(&self) -> bool {
        *self == SigmaSpec::ScaledIdentity(1.0)
    }
}

/// One estimator column of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub name: CriterionName,
    /// Absolute MAICc constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// MAICc constant as a multiple of `c̄`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_ratio: Option<f64>,
    /// Lower bound applied to the resolved constant, e.g. `0` to fall back to
    /// AICc wherever `c̄ ≤ 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_min: Option<f64>,
    /// Column label; defaults to the name, with the constant appended when
    /// one is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl EstimatorSpec {
    pub fn new(name: CriterionName) -> Self {
        Self {
            name,
            c: None,
            c_ratio: None,
            c_min: None,
            label: None,
        }
    }

    pub fn with_c_ratio(mut self, ratio: f64) -> Self {
        self.c_ratio = Some(ratio);
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    fn default_label(&self) -> String {
        match (self.c, self.c_ratio) {
            (Some(c), _) => format!("{}(c={c})", self.name),
            (None, Some(r)) => format!("{}(c={r}cbar)", self.name),
            (None, None) => self.name.to_string(),
        }
    }

    /// Constant used at `dims`, given the grid point's fallback ratio.
    pub fn resolve_c(&self, dims: ModelDims, point_ratio: Option<f64>) -> Result<Option<f64>> {
        if self.name != CriterionName::Maicc {
            return Ok(None);
        }
        let c = match self.c {
            Some(c) => c,
            None => self.c_ratio.or(point_ratio).unwrap_or(1.0) * cbar(dims)?,
        };
        Ok(Some(self.c_min.map_or(c, |floor| c.max(floor))))
    }
}

/// One truth configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GridPoint {
    /// Value reported in the sweep column; defaults to the point index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<f64>,
    #[serde(default)]
    pub b: BSpec,
    #[serde(default)]
    pub sigma: SigmaSpec,
    /// Overrides the experiment's dimensions at this point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModelDims>,
    /// MAICc constant ratio for estimators that set neither `c` nor `c_ratio`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_ratio: Option<f64>,
}

fn default_redraw_x() -> bool {
    true
}

/// A complete Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub dims: ModelDims,
    #[serde(default)]
    pub setting: Setting,
    pub grid: Vec<GridPoint>,
    pub estimators: Vec<EstimatorSpec>,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_redraw_x")]
    pub redraw_x: bool,
    #[serde(default)]
    pub x_source: XSource,
    #[serde(default)]
    pub sweep_axis: String,
    /// Label of the estimator improvements are measured against; defaults to
    /// the first estimator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Nested model orders for selection experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_orders: Option<Vec<usize>>,
}

impl ExperimentSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut spec = Self::from_json_str(&text)?;
        // relative design paths are resolved against the spec's directory
        if let XSource::File { path: x_path, .. } = &mut spec.x_source {
            if x_path.is_relative() {
                if let Some(dir) = path.as_ref().parent() {
                    *x_path = dir.join(&*x_path);
                }
            }
        }
        Ok(spec)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Estimator labels, made unique by suffixing `#k` to repeats.
    pub fn labels(&self) -> Vec<String> {
        let mut seen: HashSet<String> = HashSet::new();
        self.estimators
            .iter()
            .map(|e| {
                let base = e.label.clone().unwrap_or_else(|| e.default_label());
                let mut label = base.clone();
                let mut k = 2;
                while !seen.insert(label.clone()) {
                    label = format!("{base}#{k}");
                    k += 1;
                }
                label
            })
            .collect()
    }

    pub fn baseline_index(&self) -> Result<usize> {
        match &self.baseline {
            None => Ok(0),
            Some(b) => self
                .labels()
                .iter()
                .position(|l| l == b)
                .ok_or_else(|| Error::Config(format!("baseline '{b}' is not an estimator label"))),
        }
    }

    pub fn point_dims(&self, point: &GridPoint) -> ModelDims {
        point.dims.unwrap_or(self.dims)
    }

    /// Checks everything that can be checked without sampling.
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("grid must contain at least one point".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        self.baseline_index()?;
        if let XSource::File { .. } = self.x_source {
            if self.redraw_x {
                return Err(Error::Config("a design read from file cannot be redrawn".into()));
            }
            if self.setting == Setting::NormalMean {
                return Err(Error::Config("the normal-mean setting has no design".into()));
            }
        }
        for e in &self.estimators {
            if !self.setting.allows(e.name) {
                return Err(Error::Config(format!(
                    "{} is not available in the {:?} setting",
                    e.name, self.setting
                )));
            }
            if e.name != CriterionName::Maicc && (e.c.is_some() || e.c_ratio.is_some() || e.c_min.is_some()) {
                return Err(Error::Config(format!("{} takes no tuning constant", e.name)));
            }
            if e.c.is_some() && e.c_ratio.is_some() {
                return Err(Error::Config("give either c or c_ratio, not both".into()));
            }
            if e.c.iter().chain(&e.c_ratio).chain(&e.c_min).any(|v| !v.is_finite()) {
                return Err(Error::Config("tuning constants must be finite".into()));
            }
        }
        for (i, point) in self.grid.iter().enumerate() {
            self.validate_point(point)
                .map_err(|e| Error::Config(format!("grid point {i}: {e}")))?;
        }
        Ok(())
    }

    fn validate_point(&self, point: &GridPoint) -> Result<()> {
        let dims = self.point_dims(point);
        dims.validate()?;
        let ModelDims { n, p, q } = dims;
        point.b.build(p, q)?;
        if self.setting == Setting::NormalMean {
            if !point.sigma.is_identity() {
                return Err(Error::Config("the normal-mean setting uses Σ = I".into()));
            }
        } else {
            point.sigma.build(q)?;
        }
        if let Some(r) = point.c_ratio {
            if !r.is_finite() {
                return Err(Error::Config("c_ratio must be finite".into()));
            }
        }
        for e in &self.estimators {
            use CriterionName::*;
            match e.name {
                Aic | Aicc | Maicc if n < p + q => {
                    return Err(Error::DegreesOfFreedom(format!(
                        "{}: n - p = {} is below q = {q}, so Σ̂ is singular",
                        e.name,
                        n - p
                    )))
                }
                Aicc | Maicc if dims.residual_dof() <= 0 => {
                    return Err(Error::DegreesOfFreedom(format!(
                        "{}: n - p - q - 1 = {} must be positive",
                        e.name,
                        dims.residual_dof()
                    )))
                }
                Maic | Maicc | Matsuda | Thm1 if p < q => {
                    return Err(Error::DegreesOfFreedom(format!(
                        "{}: needs p >= q for a nonsingular Gram matrix",
                        e.name
                    )))
                }
                Johnstone if p * q < 3 => {
                    return Err(Error::DegreesOfFreedom(format!(
                        "{}: needs pq >= 3 for a finite mean squared error",
                        e.name
                    )))
                }
                _ => {}
            }
            e.resolve_c(dims, point.c_ratio)?;
        }
        if let XSource::File { path, header } = &self.x_source {
            let x = crate::regression::read_matrix_csv(path, *header)?;
            if x.shape() != (n, p) {
                return Err(Error::Config(format!(
                    "design file is {}x{}, expected {n}x{p}",
                    x.nrows(),
                    x.ncols()
                )));
            }
        }
        Ok(())
    }
}
