//! Order selection among nested regression models.

use rayon::prelude::*;

use crate::criteria::{aic, aicc, trace_against_fitted_gram, CriterionName, ModelDims};
use crate::error::{Error, Result};
use crate::matstat::{standard_normal_matrix, Matrix, RngStream};
use crate::regression::{fit_mle, generate_response, RegressionTruth};

use super::fixed_design;
use super::spec::{ExperimentSpec, Setting};

/// How often each criterion picked each candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTable {
    pub orders: Vec<usize>,
    pub labels: Vec<String>,
    /// `counts[criterion][order index]`.
    pub counts: Vec<Vec<u64>>,
    /// MAICc constant per criterion and order (`None` for other criteria or
    /// when the order is infeasible).
    pub c_used: Vec<Vec<Option<f64>>>,
    pub realizations: usize,
}

impl SelectionTable {
    pub fn count(&self, label: &str, order: usize) -> Option<u64> {
        let row = self.labels.iter().position(|l| l == label)?;
        let col = self.orders.iter().position(|k| *k == order)?;
        Some(self.counts[row][col])
    }
}

fn validate(spec: &ExperimentSpec, orders: &[usize]) -> Result<()> {
    if spec.setting != Setting::UnknownSigma {
        return Err(Error::Config("selection experiments use the unknown-Σ setting".into()));
    }
    if spec.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if spec.grid.len() != 1 {
        return Err(Error::Config("selection experiments take exactly one grid point".into()));
    }
    if spec.estimators.is_empty() {
        return Err(Error::Config("at least one criterion is required".into()));
    }
    for e in &spec.estimators {
        if !matches!(e.name, CriterionName::Aic | CriterionName::Aicc | CriterionName::Maicc) {
            return Err(Error::Config(format!("{} cannot select among regressions", e.name)));
        }
    }
    spec.dims.validate()?;
    if orders.is_empty() {
        return Err(Error::Config("candidate order list is empty".into()));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("candidate orders must be strictly increasing".into()));
    }
    if orders[0] == 0 || *orders.last().unwrap() > spec.dims.p {
        return Err(Error::Config(format!(
            "candidate orders must lie in 1..={}",
            spec.dims.p
        )));
    }
    let point = &spec.grid[0];
    point.b.build(spec.dims.p, spec.dims.q)?;
    point.sigma.build(spec.dims.q)?;
    Ok(())
}

/// Fits every candidate (first `k` columns of `X`) for each realization and
/// records the order minimizing each criterion; ties go to the smaller order.
/// Candidates where a criterion is undefined (`n − k − q − 1 ≤ 0` for AICc
/// and MAICc, `n − k < q` for AIC) score `+∞`; candidates that fit `Y`
/// exactly score `−∞`.
pub fn run_selection_experiment(spec: &ExperimentSpec, candidate_orders: &[usize]) -> Result<SelectionTable> {
    validate(spec, candidate_orders)?;
    let ModelDims { n, p, q } = spec.dims;
    let point = &spec.grid[0];
    let b = point.b.build(p, q)?;
    let sigma = point.sigma.build(q)?;
    let fixed_x = if spec.redraw_x { None } else { Some(fixed_design(spec, n, p)?) };
    let labels = spec.labels();
    let constants: Vec<Vec<Option<f64>>> = spec
        .estimators
        .iter()
        .map(|e| {
            candidate_orders
                .iter()
                .map(|&k| e.resolve_c(ModelDims::new_unchecked(n, k, q), point.c_ratio).ok().flatten())
                .collect()
        })
        .collect();

    let choices: Vec<Vec<usize>> = (0..spec.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = RngStream::new(spec.seed, rep).rng();
            let x = match &fixed_x {
                Some(x) => x.clone(),
                None => standard_normal_matrix(n, p, &mut rng),
            };
            let truth = RegressionTruth::from_parts(x, b.clone(), sigma.clone())?;
            let y = generate_response(&truth, &mut rng);
            let mut scores = vec![vec![f64::INFINITY; candidate_orders.len()]; labels.len()];
            for (j, &k) in candidate_orders.iter().enumerate() {
                let xk: Matrix = truth.x().columns(0, k).into_owned();
                let fit = fit_mle(&xk, &y)?;
                let dims = fit.dims();
                if n < k + q {
                    continue;
                }
                if fit.sigma_hat_is_singular() {
                    // residuals vanish: every criterion diverges to −∞
                    for row in scores.iter_mut() {
                        row[j] = f64::NEG_INFINITY;
                    }
                    continue;
                }
                let aic_value = aic(&fit)?.value;
                let corrected = dims.residual_dof() > 0;
                let aicc_value = if corrected { aicc(&fit)?.value } else { f64::INFINITY };
                for (i, e) in spec.estimators.iter().enumerate() {
                    scores[i][j] = match e.name {
                        CriterionName::Aic => aic_value,
                        CriterionName::Aicc => aicc_value,
                        _ if !corrected => f64::INFINITY,
                        _ => {
                            let c = constants[i][j].expect("constant resolves for feasible orders");
                            aicc_value - c * trace_against_fitted_gram(&fit, &fit.sigma_hat)?
                        }
                    };
                }
            }
            Ok(scores
                .iter()
                .map(|row| {
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v < row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![vec![0u64; candidate_orders.len()]; labels.len()];
    for choice in &choices {
        for (i, j) in choice.iter().enumerate() {
            counts[i][*j] += 1;
        }
    }
    Ok(SelectionTable {
        orders: candidate_orders.to_vec(),
        labels,
        counts,
        c_used: constants,
        realizations: spec.reps,
    })
}
