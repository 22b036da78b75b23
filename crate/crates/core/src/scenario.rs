//! Sampled terminal-cost surrogates fit by a minimax linear program.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{simulate, trajectory_cost, Controller, DiscreteSystem, StageCost};
use crate::gbf::{ReachAvoidSet, ReachAvoidSets};
use crate::poly::{Monomial, Polynomial};
use crate::solvers::{solve_lp, LpError, LpProblem};

/// Default box on surrogate coefficients.
pub const DEFAULT_COEFF_BOUND: f64 = 1e4;

/// Rejection attempts allowed per sample before declaring failure.
const ATTEMPTS_PER_SAMPLE: usize = 10_000;

/// Slack on the hitting-time bound used as the rollout cap.
const ROLLOUT_SLACK: f64 = 1.1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("sampling failed: acceptance rate below {rate:e} after {attempts} attempts")]
    Sampling { rate: f64, attempts: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("template must contain the constant monomial")]
    NoConstant,
    #[error("lp failure: {0}")]
    Lp(#[from] LpError),
}

/// Smallest `N'` with `ε ≥ (2/N')(ln(1/β) + l + 1)`.
pub fn required_samples(epsilon: f64, beta: f64, l: usize) -> usize {
    assert!(epsilon > 0.0 && epsilon < 1.0 && beta > 0.0 && beta < 1.0 && l >= 1);
    let k = (1.0 / beta).ln() + l as f64 + 1.0;
    let mut n = (2.0 * k / epsilon).ceil().max(1.0) as usize;
    while n > 1 && epsilon >= 2.0 / (n - 1) as f64 * k {
        n -= 1;
    }
    while epsilon < 2.0 / n as f64 * k {
        n += 1;
    }
    n
}

/// One training pair `(x_i, Q_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Drawn points whose rollout did not reach the target in time.
    pub excluded: usize,
    pub attempts: usize,
}

impl Dataset {
    pub fn exclusion_fraction(&self) -> f64 {
        let total = self.samples.len() + self.excluded;
        if total == 0 {
            0.0
        } else {
            self.excluded as f64 / total as f64
        }
    }
}

/// Independent stream for sample `i` under a root seed.
pub fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Draws `count` uniform points of the reach-avoid set and rolls the
/// controller out from each, recording the closed-loop cost.
pub fn collect_dataset(
    set: &ReachAvoidSet,
    system: &DiscreteSystem,
    controller: &dyn Controller,
    sets: &ReachAvoidSets,
    cost: &StageCost,
    count: usize,
    seed: u64,
) -> Result<Dataset, ScenarioError> {
    let results: Vec<(Option<Sample>, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let mut attempts = 0;
            let x = loop {
                if attempts == ATTEMPTS_PER_SAMPLE {
                    return (None, attempts);
                }
                attempts += 1;
                let x = sets.safe_box.sample(&mut rng);
                if set.contains(&x) {
                    break x;
                }
            };
            let limit = set
                .barrier
                .hitting_time_bound(&x)
                .map(|b| (b as f64 * ROLLOUT_SLACK).ceil() as usize);
            let sample = limit.ok().and_then(|limit| {
                simulate(system, controller, &x, &sets.target, &sets.safe, cost, limit.max(1))
                    .ok()
                    .map(|t| Sample {
                        x: x.clone(),
                        q: trajectory_cost(&t),
                    })
            });
            (Some(sample.unwrap_or(Sample { x, q: f64::NAN })), attempts)
        })
        .collect();
    let attempts: usize = results.iter().map(|r| r.1).sum();
    if results.iter().any(|r| r.0.is_none()) {
        return Err(ScenarioError::Sampling {
            rate: 1.0 / ATTEMPTS_PER_SAMPLE as f64,
            attempts,
        });
    }
    let mut samples = Vec::with_capacity(count);
    let mut excluded = 0;
    for (s, _) in results {
        let s = s.expect("checked above");
        if s.q.is_nan() {
            excluded += 1;
        } else {
            samples.push(s);
        }
    }
    Ok(Dataset {
        samples,
        excluded,
        attempts,
    })
}

/// `Q_a(c, x) = Σ c_i φ_i(x)` with its worst training residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSurrogate {
    /// Exponent vectors of the template monomials.
    pub template: Vec<Vec<u32>>,
    pub c: Vec<f64>,
    pub delta_star: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub n_samples: usize,
}

impl CostSurrogate {
    pub fn polynomial(&self) -> Polynomial {
        let n = self.template.first().map_or(0, Vec::len);
        let basis: Vec<Monomial> = self.template.iter().map(|e| Monomial::new(e.clone())).collect();
        Polynomial::from_basis(n, &basis, &self.c)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.template
            .iter()
            .zip(&self.c)
            .map(|(e, c)| c * e.iter().zip(x).map(|(&k, v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }

    pub fn max_residual(&self, samples: &[Sample]) -> f64 {
        samples
            .iter()
            .map(|s| (self.eval(&s.x) - s.q).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("surrogate serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Minimizes the worst absolute residual over the dataset with `|c_i| ≤ bound`.
pub fn fit(
    samples: &[Sample],
    template: &[Monomial],
    coeff_bound: f64,
    epsilon: f64,
    beta: f64,
) -> Result<CostSurrogate, ScenarioError> {
    if samples.is_empty() {
        return Err(ScenarioError::EmptyDataset);
    }
    if !template.iter().any(Monomial::is_constant) {
        return Err(ScenarioError::NoConstant);
    }
    let l = template.len();
    let mut objective = vec![0.0; l + 1];
    objective[l] = 1.0;
    let mut lp = LpProblem::new(objective);
    for s in samples {
        let phi: Vec<f64> = template.iter().map(|m| m.eval(&s.x)).collect();
        let mut up = phi.clone();
        up.push(-1.0);
        lp.push_row(up, s.q);
        let mut down: Vec<f64> = phi.iter().map(|v| -v).collect();
        down.push(-1.0);
        lp.push_row(down, -s.q);
    }
    for j in 0..l {
        lp.lower[j] = -coeff_bound;
        lp.upper[j] = coeff_bound;
    }
    lp.lower[l] = 0.0;
    let sol = solve_lp(&lp)?;
    let c = sol.x[..l].to_vec();
    let surrogate = CostSurrogate {
        template: template.iter().map(|m| m.exponents().to_vec()).collect(),
        c,
        delta_star: sol.x[l],
        epsilon,
        beta,
        n_samples: samples.len(),
    };
    Ok(surrogate)
}

/// Fraction of points whose residual exceeds `δ*`.
pub fn holdout_violation(surrogate: &CostSurrogate, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let bad = samples
        .iter()
        .filter(|s| (surrogate.eval(&s.x) - s.q).abs() > surrogate.delta_star + 1e-9)
        .count();
    bad as f64 / samples.len() as f64
}
