use didmean::simulate::{
    default_truth, draw_coefficients, truth_oracle, DGPConfig, DEFAULT_COEFFICIENT_SEED, DEFAULT_TRUTH_DRAWS, DEFAULT_TRUTH_SEED,
};
use didmean::Execution;

#[test]
fn default_coefficients_match_fixture() {
    let frozen: DGPConfig = serde_json::from_str(include_str!("../data/default_coefficients.json")).unwrap();
    assert_eq!(draw_coefficients(DEFAULT_COEFFICIENT_SEED), frozen);
}

#[test]
fn default_truth_reproduces() {
    let frozen = default_truth();
    assert_eq!(frozen.n_mc, DEFAULT_TRUTH_DRAWS);
    assert_eq!(frozen.coefficient_seed, DEFAULT_COEFFICIENT_SEED);
    let dgp = draw_coefficients(DEFAULT_COEFFICIENT_SEED);
    let fresh = truth_oracle(&dgp, DEFAULT_TRUTH_DRAWS, DEFAULT_TRUTH_SEED, Execution::Parallel).unwrap();
    // serialized floats round-trip exactly
    assert_eq!(fresh, frozen);
}

#[test]
fn frozen_truth_agrees_with_independent_draw() {
    let frozen = default_truth();
    let dgp = draw_coefficients(DEFAULT_COEFFICIENT_SEED);
    let other = truth_oracle(&dgp, 1_000_000, DEFAULT_TRUTH_SEED + 1, Execution::Parallel).unwrap();
    for t in 0..3 {
        let se = (frozen.mc_se[t].powi(2) + other.mc_se[t].powi(2)).sqrt();
        assert!((frozen.mu[t] - other.mu[t]).abs() < 4.0 * se, "t={t}");
    }
}
