//! Mean squared error of loss estimators over a grid of truths.

use crate::criteria::{
    aic, aic_known_sigma, aicc, johnstone, matsuda, sure_mat_regression, thm1_estimator,
    trace_against_fitted_gram, CriterionName, ModelDims,
};
use crate::error::Result;
use crate::matstat::{standard_normal_matrix, Matrix, RngStream, SpdMatrix};
use crate::regression::{
    fit_mle, generate_response, kl_discrepancy, kl_discrepancy_known_sigma, mahalanobis_loss,
    RegressionTruth,
};
use crate::stats::{accumulate, Moments};

use super::spec::{ExperimentSpec, GridPoint, Setting};
use super::fixed_design;

use nalgebra::DVector;

/// Summary of one estimator at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult {
    pub label: String,
    pub name: CriterionName,
    pub c_used: Option<f64>,
    /// Mean of `estimate − target`.
    pub bias: f64,
    pub bias_se: f64,
    /// Mean of `(estimate − target)²`.
    pub mse: f64,
    pub mse_se: f64,
    /// `100 (MSE_baseline − MSE) / MSE_baseline`.
    pub improvement_pct: f64,
    /// Delta-method standard error of the improvement, from paired replications.
    pub improvement_se: f64,
}

/// All estimators at one grid point, with the raw moments of the
/// per-replication vector `[e₁..e_K, e₁²..e_K², D₁..D_K]` where `e_k` is the
/// error of estimator `k` and `D_k = e_b² − e_k²` for the baseline `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub index: usize,
    pub axis_value: f64,
    pub dims: ModelDims,
    pub estimators: Vec<EstimatorResult>,
    pub moments: Moments,
}

impl PointSummary {
    fn k(&self) -> usize {
        self.estimators.len()
    }

    pub fn error_component(&self, k: usize) -> usize {
        k
    }

    pub fn squared_error_component(&self, k: usize) -> usize {
        self.k() + k
    }

    pub fn difference_component(&self, k: usize) -> usize {
        2 * self.k() + k
    }

    pub fn estimator(&self, label: &str) -> Option<&EstimatorResult> {
        self.estimators.iter().find(|e| e.label == label)
    }

    pub fn estimator_index(&self, label: &str) -> Option<usize> {
        self.estimators.iter().position(|e| e.label == label)
    }

    /// Mean and standard error of `Σ weights[i] · component[i]`.
    pub fn linear(&self, weights: &[(usize, f64)]) -> (f64, f64) {
        let mut a = vec![0.0; self.moments.dim()];
        for (i, w) in weights {
            a[*i] += *w;
        }
        self.moments.linear_mean_se(&a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub name: String,
    pub sweep_axis: String,
    pub reps: usize,
    pub seed: u64,
    pub baseline: String,
    pub labels: Vec<String>,
    pub points: Vec<PointSummary>,
}

/// Everything a replication needs at one grid point.
struct PointContext {
    setting: Setting,
    dims: ModelDims,
    b: Matrix,
    sigma: SpdMatrix,
    fixed_x: Option<Matrix>,
    estimators: Vec<(CriterionName, Option<f64>)>,
    seed: u64,
}

impl PointContext {
    fn new(spec: &ExperimentSpec, point: &GridPoint) -> Result<Self> {
        let dims = spec.point_dims(point);
        let ModelDims { n, p, q } = dims;
        let fixed_x = if spec.setting != Setting::NormalMean && !spec.redraw_x {
            Some(fixed_design(spec, n, p)?)
        } else {
            None
        };
        let estimators = spec
            .estimators
            .iter()
            .map(|e| Ok((e.name, e.resolve_c(dims, point.c_ratio)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            setting: spec.setting,
            dims,
            b: point.b.build(p, q)?,
            sigma: point.sigma.build(q)?,
            fixed_x,
            estimators,
            seed: spec.seed,
        })
    }

    /// Writes estimator errors into `errors`.
    fn replicate(&self, rep: u64, errors: &mut [f64]) -> Result<()> {
        let mut rng = RngStream::new(self.seed, rep).rng();
        let ModelDims { n, p, q } = self.dims;
        if self.setting == Setting::NormalMean {
            return self.replicate_normal_mean(&mut rng, errors);
        }
        let x = match &self.fixed_x {
            Some(x) => x.clone(),
            None => standard_normal_matrix(n, p, &mut rng),
        };
        let truth = RegressionTruth::from_parts(x, self.b.clone(), self.sigma.clone())?;
        let y = generate_response(&truth, &mut rng);
        let fit = fit_mle(truth.x(), &y)?;
        let needs_trace = self
            .estimators
            .iter()
            .any(|(name, _)| matches!(name, CriterionName::Maicc | CriterionName::Maic));
        match self.setting {
            Setting::UnknownSigma => {
                let d = kl_discrepancy(&truth, &fit)?;
                let aic_value = aic(&fit)?.value;
                let aicc_value = if self.estimators.iter().any(|(n, _)| *n != CriterionName::Aic) {
                    aicc(&fit)?.value
                } else {
                    f64::NAN
                };
                let trace = if needs_trace {
                    trace_against_fitted_gram(&fit, &fit.sigma_hat)?
                } else {
                    f64::NAN
                };
                for (slot, (name, c)) in errors.iter_mut().zip(&self.estimators) {
                    let value = match name {
                        CriterionName::Aic => aic_value,
                        CriterionName::Aicc => aicc_value,
                        _ => aicc_value - c.expect("MAICc constant resolved") * trace,
                    };
                    *slot = value - d;
                }
            }
            Setting::KnownSigma => {
                let d = kl_discrepancy_known_sigma(&truth, &fit.bhat);
                let aic_value = aic_known_sigma(&fit, &self.sigma)?.value;
                let trace = if needs_trace {
                    trace_against_fitted_gram(&fit, self.sigma.matrix())?
                } else {
                    f64::NAN
                };
                let maic_c = crate::criteria::inverse_gram_constant(p, q);
                for (slot, (name, _)) in errors.iter_mut().zip(&self.estimators) {
                    *slot = match name {
                        CriterionName::AicKnown => aic_value - d,
                        CriterionName::Maic => aic_value - maic_c * trace - d,
                        _ => {
                            sure_mat_regression(&fit, &self.sigma)? - mahalanobis_loss(&truth, &fit.bhat)
                        }
                    };
                }
            }
            Setting::NormalMean => unreachable!(),
        }
        Ok(())
    }

    fn replicate_normal_mean(&self, rng: &mut crate::matstat::StreamRng, errors: &mut [f64]) -> Result<()> {
        let ModelDims { p, q, .. } = self.dims;
        let noise = standard_normal_matrix(p, q, rng);
        let loss = noise.norm_squared();
        let y = &self.b + noise;
        for (slot, (name, _)) in errors.iter_mut().zip(&self.estimators) {
            let value = match name {
                CriterionName::SureVec => (p * q) as f64,
                CriterionName::Johnstone => johnstone(&DVector::from_column_slice(y.as_slice()))?.value,
                CriterionName::Matsuda => matsuda(&y)?.value,
                _ => thm1_estimator(&y)?.value,
            };
            *slot = value - loss;
        }
        Ok(())
    }
}

/// Runs every grid point of `spec` and summarizes the estimators' errors.
/// The spec is validated before any sampling.
pub fn run_mse_experiment(spec: &ExperimentSpec) -> Result<McSummary> {
    spec.validate()?;
    let labels = spec.labels();
    let baseline = spec.baseline_index()?;
    let k = labels.len();
    let mut points = Vec::with_capacity(spec.grid.len());
    for (index, point) in spec.grid.iter().enumerate() {
        let ctx = PointContext::new(spec, point)?;
        let moments = accumulate(spec.reps, 3 * k, |rep, out| {
            let (errors, rest) = out.split_at_mut(k);
            ctx.replicate(rep, errors)?;
            let (squares, diffs) = rest.split_at_mut(k);
            for i in 0..k {
                squares[i] = errors[i] * errors[i];
            }
            for i in 0..k {
                diffs[i] = squares[baseline] - squares[i];
            }
            Ok(())
        })?;
        let mut summary = PointSummary {
            index,
            axis_value: point.axis_value.unwrap_or(index as f64),
            dims: ctx.dims,
            estimators: Vec::with_capacity(k),
            moments,
        };
        // component layout as in PointSummary, computed before the
        // estimator list is filled
        let base_mse = summary.moments.mean(k + baseline);
        for (i, label) in labels.iter().enumerate() {
            let m = &summary.moments;
            let (e, s, dcomp) = (i, k + i, 2 * k + i);
            let diff = m.mean(dcomp);
            let mut grad = vec![0.0; m.dim()];
            grad[dcomp] = 100.0 / base_mse;
            grad[k + baseline] -= 100.0 * diff / (base_mse * base_mse);
            let improvement_se = if m.count() < 2 {
                f64::NAN
            } else {
                (m.linear_variance(&grad).max(0.0) / m.count() as f64).sqrt()
            };
            summary.estimators.push(EstimatorResult {
                label: label.clone(),
                name: ctx.estimators[i].0,
                c_used: ctx.estimators[i].1,
                bias: m.mean(e),
                bias_se: m.mean_se(e),
                mse: m.mean(s),
                mse_se: m.mean_se(s),
                improvement_pct: 100.0 * diff / base_mse,
                improvement_se,
            });
        }
        points.push(summary);
    }
    Ok(McSummary {
        name: spec.name.clone(),
        sweep_axis: spec.sweep_axis.clone(),
        reps: spec.reps,
        seed: spec.seed,
        baseline: labels[baseline].clone(),
        labels,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::cbar;
    use crate::mcengine::{in_pool, BSpec, EstimatorSpec, GridPoint};

    fn spec(json: &str) -> ExperimentSpec {
        ExperimentSpec::from_json_str(json).unwrap()
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let s = spec(
            r#"{"dims": {"n": 20, "p": 5, "q": 2}, "grid": [{}, {"b": {"singular_values": [3.0]}}],
                "estimators": [{"name": "AICC"}, {"name": "AICC"}], "reps": 3000, "seed": 4}"#,
        );
        let out = run_mse_experiment(&s).unwrap();
        for point in &out.points {
            let r = &point.estimators[1];
            assert_eq!(r.label, "AICC#2");
            assert_eq!(r.improvement_pct, 0.0);
            assert_eq!(r.improvement_se, 0.0);
            assert!(point.estimators[0].mse_se > 0.0);
        }
    }

    #[test]
    fn identical_across_runs_and_thread_counts() {
        let s = spec(
            r#"{"dims": {"n": 15, "p": 4, "q": 2}, "grid": [{"b": {"singular_values": [1.0, 0.5]}}],
                "estimators": [{"name": "AICC"}, {"name": "MAICC"}, {"name": "AIC"}], "reps": 2500, "seed": 11}"#,
        );
        let a = in_pool(Some(1), || run_mse_experiment(&s)).unwrap().unwrap();
        let b = in_pool(Some(3), || run_mse_experiment(&s)).unwrap().unwrap();
        let c = run_mse_experiment(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn invalid_spec_fails_before_sampling() {
        let s = spec(
            r#"{"dims": {"n": 12, "p": 10, "q": 1}, "grid": [{}],
                "estimators": [{"name": "AICC"}], "reps": 1000000000, "seed": 1}"#,
        );
        assert!(run_mse_experiment(&s).is_err());
    }

    #[test]
    fn known_sigma_aic_is_unbiased_and_maic_improves() {
        // AIC with known Σ is exactly unbiased for d; MAIC dominates it at B = O
        let s = spec(
            r#"{"dims": {"n": 30, "p": 10, "q": 2}, "setting": "known_sigma", "grid": [{}],
                "estimators": [{"name": "AIC_KNOWN"}, {"name": "MAIC"}, {"name": "SURE_MAT"}],
                "reps": 100000, "seed": 21}"#,
        );
        let out = run_mse_experiment(&s).unwrap();
        let p = &out.points[0];
        let aic = &p.estimators[0];
        assert!(aic.bias.abs() < 3.0 * aic.bias_se, "{aic:?}");
        let maic = &p.estimators[1];
        assert!(maic.improvement_pct > 3.0 * maic.improvement_se, "{maic:?}");
        let sure = &p.estimators[2];
        assert!(sure.bias.abs() < 3.0 * sure.bias_se, "{sure:?}");
        assert!((sure.mse - aic.mse).abs() < 1e-9 * aic.mse);
    }

    #[test]
    fn aicc_is_unbiased_and_maicc_improves_at_origin() {
        let s = spec(
            r#"{"dims": {"n": 30, "p": 10, "q": 1}, "grid": [{}],
                "estimators": [{"name": "AICC"}, {"name": "MAICC"}, {"name": "AIC"}],
                "reps": 100000, "seed": 5}"#,
        );
        let out = run_mse_experiment(&s).unwrap();
        let p = &out.points[0];
        let aicc = &p.estimators[0];
        assert!(aicc.bias.abs() < 3.0 * aicc.bias_se, "{aicc:?}");
        let maicc = &p.estimators[1];
        assert_eq!(maicc.c_used, Some(cbar(p.dims).unwrap()));
        assert!(maicc.improvement_pct > 3.0 * maicc.improvement_se, "{maicc:?}");
        let aic = &p.estimators[2];
        assert!(aic.bias < -3.0 * aic.bias_se);
        assert!(aic.improvement_pct < 0.0);
    }

    #[test]
    fn normal_mean_estimators_target_their_loss() {
        let s = spec(
            r#"{"dims": {"n": 8, "p": 8, "q": 2}, "setting": "normal_mean",
                "grid": [{}, {"b": {"singular_values": [10.0, 0.0]}}],
                "estimators": [{"name": "SURE_VEC"}, {"name": "THM1"}, {"name": "MATSUDA"}, {"name": "JOHNSTONE"}],
                "reps": 50000, "seed": 8}"#,
        );
        let out = run_mse_experiment(&s).unwrap();
        for p in &out.points {
            let sure = &p.estimators[0];
            assert!(sure.bias.abs() < 3.0 * sure.bias_se);
            // SURE of M̂ = Y has MSE Var(χ²_{pq}) = 2pq
            assert!((sure.mse - 32.0).abs() < 3.0 * sure.mse_se);
            assert!(p.estimators[1].improvement_pct > 3.0 * p.estimators[1].improvement_se);
        }
    }

    #[test]
    fn fixed_design_is_shared_and_file_designs_load() {
        let mut s = spec(
            r#"{"dims": {"n": 12, "p": 3, "q": 1}, "grid": [{}], "redraw_x": false,
                "estimators": [{"name": "AICC"}], "reps": 200, "seed": 2}"#,
        );
        let generated = run_mse_experiment(&s).unwrap();
        let x = crate::mcengine::fixed_design(&s, 12, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("icloss-design-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.csv");
        let text: String = (0..12)
            .map(|i| {
                (0..3).map(|j| format!("{:e}", x[(i, j)])).collect::<Vec<_>>().join(",") + "\n"
            })
            .collect();
        std::fs::write(&path, text).unwrap();
        s.x_source = crate::mcengine::XSource::File { path: path.clone(), header: false };
        let from_file = run_mse_experiment(&s).unwrap();
        assert_eq!(generated, from_file);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn grid_points_override_dims_and_constants() {
        let mut s = spec(
            r#"{"dims": {"n": 30, "p": 10, "q": 1}, "grid": [],
                "estimators": [{"name": "AICC"}, {"name": "MAICC"}], "reps": 100, "seed": 3}"#,
        );
        s.grid = vec![
            GridPoint { c_ratio: Some(0.5), ..Default::default() },
            GridPoint { dims: Some(ModelDims::new(50, 10, 1).unwrap()), b: BSpec::SingularValues(vec![2.0]), ..Default::default() },
        ];
        s.estimators.push(EstimatorSpec::new(CriterionName::Maicc).with_c_ratio(2.0));
        let out = run_mse_experiment(&s).unwrap();
        let c0 = cbar(ModelDims::new(30, 10, 1).unwrap()).unwrap();
        let c1 = cbar(ModelDims::new(50, 10, 1).unwrap()).unwrap();
        assert_eq!(out.points[0].estimators[1].c_used, Some(0.5 * c0));
        assert_eq!(out.points[0].estimators[2].c_used, Some(2.0 * c0));
        assert_eq!(out.points[1].estimators[1].c_used, Some(c1));
        assert_eq!(out.points[1].dims.n, 50);
    }
}
