//! Fixtures shared by the benchmarks.

use icloss::matstat::{standard_normal_matrix, RngStream};
use icloss::mcengine::ExperimentSpec;
use icloss::Matrix;
use nalgebra::DVector;

/// Design and response with `B = O`, `Σ = I`.
pub fn regression_data(n: usize, p: usize, q: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = RngStream::new(seed, 0).rng();
    let x = standard_normal_matrix(n, p, &mut rng);
    let y = standard_normal_matrix(n, q, &mut rng);
    (x, y)
}

/// A `p × q` observation of the normal-mean model at `M = O`.
pub fn normal_mean_data(p: usize, q: usize, seed: u64) -> Matrix {
    standard_normal_matrix(p, q, &mut RngStream::new(seed, 1).rng())
}

pub fn normal_vector(p: usize, seed: u64) -> DVector<f64> {
    DVector::from_column_slice(normal_mean_data(p, 1, seed).as_slice())
}

/// One-point MSE experiment comparing AICc and MAICc.
pub fn mse_spec(n: usize, p: usize, q: usize, reps: usize) -> ExperimentSpec {
    ExperimentSpec::from_json_str(&format!(
        r#"{{"dims": {{"n": {n}, "p": {p}, "q": {q}}}, "grid": [{{}}],
            "estimators": [{{"name": "AICC"}}, {{"name": "MAICC"}}],
            "reps": {reps}, "seed": 1}}"#
    ))
    .expect("fixture spec parses")
}

/// Nested-model selection among orders `1..=p`.
pub fn selection_spec(n: usize, p: usize, reps: usize) -> ExperimentSpec {
    let beta: Vec<String> = (0..p).map(|i| if i < p / 2 { "0.3" } else { "0" }.to_string()).collect();
    ExperimentSpec::from_json_str(&format!(
        r#"{{"dims": {{"n": {n}, "p": {p}, "q": 1}}, "redraw_x": false,
            "grid": [{{"b": {{"coefficients": [{}]}}}}],
            "estimators": [{{"name": "AIC"}}, {{"name": "AICC"}}, {{"name": "MAICC", "c_min": 0.0}}],
            "reps": {reps}, "seed": 1}}"#,
        beta.join(",")
    ))
    .expect("fixture spec parses")
}
