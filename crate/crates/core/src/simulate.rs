//! The three-period structural model with an unmeasured confounder `U`,
//! ground truth by Monte Carlo, and the parallel-trends check.
//!
//! For `t = 0, 1, 2` (with `A_{-1} = 0` and lagged terms absent at `t = 0`):
//!
//! ```text
//! U    ~ N(0, 1)
//! W1_t ~ N(g1_0 + g1_1 W1_{t-1} + g1_2 A_{t-1}, sd)
//! W2_t ~ N(g2_0 + g2_1 W1_t + g2_2 W2_{t-1} + g2_3 A_{t-1}, sd)
//! W3_t ~ N(g3_0 + g3_1 W1_t + g3_2 W2_t + g3_3 W3_{t-1} + g3_4 A_{t-1}, sd)
//! A_t  ~ Bernoulli((1 - A_{t-1}) expit(a_0 + a_1 W1_t + a_2 cos W2_t + a_3 W3_t^2 + a_4 U))
//! Y_t  ~ N(b_0 + b_1 sin W1_t + b_2 W2_t W3_t + b_3 A_t + U, sd)
//! ```
//!
//! The `(1 - A_{t-1})` factor is kept as written: a unit treated at `t - 1`
//! is never treated at `t`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{rng_from, Execution};
use crate::learners::logistic::expit;
use crate::panel::PanelDataset;

pub const PERIODS: usize = 3;
/// Coefficient seed whose draw is committed as a fixture.
pub const DEFAULT_COEFFICIENT_SEED: u64 = 833;
pub const NOISE_SD: f64 = 0.1;
pub const MIN_ORACLE_DRAWS: usize = 100_000;
/// Draws and seed behind [`default_truth`].
pub const DEFAULT_TRUTH_DRAWS: usize = 10_000_000;
pub const DEFAULT_TRUTH_SEED: u64 = 3;
const SHARD: usize = 4096;

/// Structural coefficients, indexed `[t][subscript]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGPConfig {
    pub coefficient_seed: u64,
    pub gamma1: [[f64; 3]; PERIODS],
    pub gamma2: [[f64; 4]; PERIODS],
    pub gamma3: [[f64; 5]; PERIODS],
    pub alpha: [[f64; 5]; PERIODS],
    pub beta: [[f64; 4]; PERIODS],
    pub noise_sd: f64,
    /// Sets `A_0 = 0` for every unit.
    pub force_baseline_regime: bool,
    pub n_units: usize,
    /// Standard deviation of `U`.
    #[serde(default = "one")]
    pub u_scale: f64,
    /// Coefficient of `U` added to every `W1_t` equation. Nonzero values
    /// break parallel trends.
    #[serde(default)]
    pub u_in_w1: f64,
}

fn one() -> f64 {
    1.0
}

/// Draws every coefficient i.i.d. standard normal, in the order
/// W1, W2, W3, A, Y equations; within each, `t` ascending, then subscript ascending.
pub fn draw_coefficients(seed: u64) -> DGPConfig {
    let mut rng = rng_from(seed, &[0xC0EF]);
    let mut draw = || -> f64 { rng.sample(StandardNormal) };
    let mut gamma1 = [[0.0; 3]; PERIODS];
    let mut gamma2 = [[0.0; 4]; PERIODS];
    let mut gamma3 = [[0.0; 5]; PERIODS];
    let mut alpha = [[0.0; 5]; PERIODS];
    let mut beta = [[0.0; 4]; PERIODS];
    gamma1.iter_mut().flatten().for_each(|v| *v = draw());
    gamma2.iter_mut().flatten().for_each(|v| *v = draw());
    gamma3.iter_mut().flatten().for_each(|v| *v = draw());
    alpha.iter_mut().flatten().for_each(|v| *v = draw());
    beta.iter_mut().flatten().for_each(|v| *v = draw());
    DGPConfig {
        coefficient_seed: seed,
        gamma1,
        gamma2,
        gamma3,
        alpha,
        beta,
        noise_sd: NOISE_SD,
        force_baseline_regime: true,
        n_units: 1000,
        u_scale: 1.0,
        u_in_w1: 0.0,
    }
}

impl DGPConfig {
    pub fn with_units(mut self, n: usize) -> Self {
        self.n_units = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd > 0.0 && self.u_scale > 0.0) {
            return Err(Error::Invariant("noise standard deviations must be positive".into()));
        }
        let all = self
            .gamma1
            .iter()
            .flatten()
            .chain(self.gamma2.iter().flatten())
            .chain(self.gamma3.iter().flatten())
            .chain(self.alpha.iter().flatten())
            .chain(self.beta.iter().flatten());
        if all.copied().any(|v: f64| !v.is_finite()) {
            return Err(Error::Invariant("coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Copy of this model with the outcome coefficients of `t = 0` used at every time.
    pub fn with_constant_beta(mut self) -> Self {
        self.beta = [self.beta[0]; PERIODS];
        self
    }
}

/// One unit's trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub u: f64,
    pub w: [[f64; 3]; PERIODS],
    pub a: [i64; PERIODS],
    pub y: [f64; PERIODS],
}

/// Simulates one unit. Noise is always drawn in the same order
/// (`U`, then per period `W1, W2, W3, A, Y`), so natural and intervened
/// trajectories share their randomness.
fn simulate_unit(cfg: &DGPConfig, rng: &mut ChaCha8Rng, never_treat: bool) -> Trajectory {
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let sd = cfg.noise_sd;
    let u = cfg.u_scale * normal(rng);
    let mut w = [[0.0; 3]; PERIODS];
    let mut a = [0i64; PERIODS];
    let mut y = [0.0; PERIODS];
    let (mut w1p, mut w2p, mut w3p, mut ap) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..PERIODS {
        let g1 = cfg.gamma1[t];
        let g2 = cfg.gamma2[t];
        let g3 = cfg.gamma3[t];
        let w1 = g1[0] + g1[1] * w1p + g1[2] * ap + cfg.u_in_w1 * u + sd * normal(rng);
        let w2 = g2[0] + g2[1] * w1 + g2[2] * w2p + g2[3] * ap + sd * normal(rng);
        let w3 = g3[0] + g3[1] * w1 + g3[2] * w2 + g3[3] * w3p + g3[4] * ap + sd * normal(rng);
        let al = cfg.alpha[t];
        let p = (1.0 - ap) * expit(al[0] + al[1] * w1 + al[2] * w2.cos() + al[3] * w3 * w3 + al[4] * u);
        let draw: f64 = rng.gen();
        let at = if never_treat || (t == 0 && cfg.force_baseline_regime) { 0 } else { i64::from(draw < p) };
        let b = cfg.beta[t];
        y[t] = b[0] + b[1] * w1.sin() + b[2] * w2 * w3 + b[3] * at as f64 + u + sd * normal(rng);
        w[t] = [w1, w2, w3];
        a[t] = at;
        (w1p, w2p, w3p, ap) = (w1, w2, w3, at as f64);
    }
    Trajectory { u, w, a, y }
}

/// Simulates `n` units, sharded into fixed-size blocks with their own streams.
pub fn simulate_units(cfg: &DGPConfig, n: usize, seed: u64, never_treat: bool, exec: Execution) -> Vec<Trajectory> {
    let shards = n.div_ceil(SHARD);
    exec.map(shards, |s| {
        let mut rng = rng_from(seed, &[0x5EED, s as u64]);
        let len = SHARD.min(n - s * SHARD);
        (0..len).map(|_| simulate_unit(cfg, &mut rng, never_treat)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn to_panel(units: &[Trajectory]) -> PanelDataset {
    let n = units.len();
    PanelDataset::new(
        (1..=n).map(|i| i.to_string()).collect(),
        (0..PERIODS).map(|t| t.to_string()).collect(),
        vec!["w1".into(), "w2".into(), "w3".into()],
        (0..PERIODS).map(|t| units.iter().map(|u| u.a[t]).collect()).collect(),
        (0..PERIODS).map(|t| units.iter().map(|u| u.y[t]).collect()).collect(),
        (0..PERIODS).map(|t| DMatrix::from_fn(n, 3, |i, j| units[i].w[t][j])).collect(),
    )
    .expect("simulated panel is well formed")
    .with_alphabet(&[0, 1])
}

/// Observed panel (`U` omitted) with `config.n_units` units.
pub fn generate_panel(config: &DGPConfig, seed: u64) -> PanelDataset {
    to_panel(&simulate_units(config, config.n_units, seed, false, Execution::Sequential))
}

/// The same units as [`generate_panel`] with treatment set to zero throughout.
pub fn generate_counterfactual_panel(config: &DGPConfig, seed: u64) -> PanelDataset {
    to_panel(&simulate_units(config, config.n_units, seed, true, Execution::Sequential))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    /// `mu_t = E[Y_t(0, 0, 0)]`.
    pub mu: Vec<f64>,
    pub mc_se: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
    pub coefficient_seed: u64,
}

fn mean_se(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let m = values.clone().sum::<f64>() / n as f64;
    let v = values.map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (m, (v / n as f64).sqrt())
}

/// Monte Carlo means of `Y_t` with treatment forced to zero throughout.
pub fn truth_oracle(config: &DGPConfig, n_mc: usize, seed: u64, exec: Execution) -> Result<TruthTable> {
    if n_mc < MIN_ORACLE_DRAWS {
        return Err(Error::Invariant(format!("oracle needs at least {MIN_ORACLE_DRAWS} draws, got {n_mc}")));
    }
    config.validate()?;
    let units = simulate_units(config, n_mc, seed, true, exec);
    let (mu, mc_se) = (0..PERIODS).map(|t| mean_se(units.iter().map(move |u| u.y[t]), n_mc)).unzip();
    Ok(TruthTable { mu, mc_se, n_mc, seed, coefficient_seed: config.coefficient_seed })
}

/// Precomputed oracle for the default coefficients
/// (`DEFAULT_TRUTH_DRAWS` draws, seed `DEFAULT_TRUTH_SEED`).
pub fn default_truth() -> TruthTable {
    serde_json::from_str(include_str!("../data/default_truth.json")).expect("bundled truth table is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub t: usize,
    /// Correlation of `Y_t(0) - Y_{t-1}(0)` with `U`.
    pub correlation: f64,
    pub mc_se: f64,
}

impl TrendCheck {
    pub fn z(&self) -> f64 {
        self.correlation / self.mc_se
    }
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Correlation between counterfactual outcome changes and `U` for `t = 1, 2`.
/// Reports values only; callers decide what counts as a violation.
pub fn check_parallel_trends(config: &DGPConfig, n_mc: usize, seed: u64, exec: Execution) -> Result<Vec<TrendCheck>> {
    if n_mc < MIN_ORACLE_DRAWS {
        return Err(Error::Invariant(format!("trend check needs at least {MIN_ORACLE_DRAWS} draws, got {n_mc}")));
    }
    let units = simulate_units(config, n_mc, seed, true, exec);
    let u: Vec<f64> = units.iter().map(|t| t.u).collect();
    Ok((1..PERIODS)
        .map(|t| {
            let d: Vec<f64> = units.iter().map(|x| x.y[t] - x.y[t - 1]).collect();
            let r = correlation(&d, &u);
            TrendCheck { t, correlation: r, mc_se: (1.0 - r * r) / (n_mc as f64 - 2.0).sqrt() }
        })
        .collect())
}

/// Synthetic state-level panel: 51 units observed 2013-2019 with 12
/// covariates. Treatment 1 marks a unit matching the reference policy path;
/// every unit starts matched and units drift away over time.
pub fn state_panel(seed: u64) -> PanelDataset {
    const N: usize = 51;
    const YEARS: usize = 7;
    const P: usize = 12;
    // probability of leaving the reference path at each year, given still on it
    const LEAVE: [f64; YEARS] = [0.0, 0.0, 0.35, 0.3, 0.0, 0.55, 0.25];
    let mut rng = rng_from(seed, &[0x57A7E]);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let level: Vec<[f64; P]> = (0..N).map(|_| std::array::from_fn(|_| normal(&mut rng))).collect();
    let effect: Vec<f64> = (0..N).map(|_| 0.5 * normal(&mut rng)).collect();
    let mut x = vec![DMatrix::<f64>::zeros(N, P); YEARS];
    let mut a = vec![vec![1i64; N]; YEARS];
    let mut y = vec![vec![0.0; N]; YEARS];
    let mut on_path = vec![true; N];
    for t in 0..YEARS {
        for i in 0..N {
            for j in 0..P {
                let prev = if t == 0 { level[i][j] } else { x[t - 1][(i, j)] };
                x[t][(i, j)] = 0.8 * prev + 0.2 * level[i][j] + 0.3 * normal(&mut rng);
            }
            if on_path[i] && t > 0 {
                let p = (LEAVE[t] * (1.0 + 0.3 * x[t][(i, 0)].tanh())).clamp(0.0, 1.0);
                if rng.gen::<f64>() < p {
                    on_path[i] = false;
                }
            }
            a[t][i] = if on_path[i] { 1 } else { i64::from(rng.gen::<f64>() < 0.2) };
            y[t][i] = 0.5 + 0.1 * t as f64 + 0.3 * x[t][(i, 0)] - 0.2 * x[t][(i, 1)] + 0.1 * x[t][(i, 2)]
                + effect[i]
                - 0.15 * (1 - a[t][i]) as f64
                + 0.1 * normal(&mut rng);
        }
    }
    let names = [
        "unemployment", "median_income", "poverty_rate", "gdp_growth", "union_density", "pct_urban", "pct_college",
        "pct_over_65", "pct_uninsured", "cpi_index", "pct_nonwhite", "labor_force",
    ];
    PanelDataset::new(
        (1..=N).map(|i| format!("S{i:02}")).collect(),
        (2013..2013 + YEARS).map(|yr| yr.to_string()).collect(),
        names.iter().map(ToString::to_string).collect(),
        a,
        y,
        x,
    )
    .expect("state panel is well formed")
    .with_alphabet(&[0, 1])
    .with_outcome_name("health")
}
