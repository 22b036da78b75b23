//! Run configuration and the built-in example problems.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{DiscreteSystem, LinearFeedback, StageCost, Trajectory};
use crate::gbf::ReachAvoidSets;
use crate::poly::{monomial_basis, Monomial, Polynomial};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown example `{0}`")]
    UnknownExample(String),
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

/// Where the first trajectory comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialPolicy {
    /// Affine feedback `u = K x + k0`, clipped to the input box.
    Controller { gain: Vec<Vec<f64>>, offset: Vec<f64> },
    /// An explicit feasible trajectory.
    Trajectory { trajectory: Trajectory },
}

fn default_degrees() -> Vec<u32> {
    vec![2, 4, 6]
}

fn default_seed() -> u64 {
    2024
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleConfig {
    pub name: String,
    /// Sampling period the dynamics were discretized with (informational).
    pub dt: f64,
    pub state_dim: usize,
    pub control_dim: usize,
    /// `f_i(x, u)` over `state_dim + control_dim` variables.
    pub dynamics: Vec<Polynomial>,
    pub safe: Polynomial,
    pub target: Polynomial,
    pub outer: Polynomial,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub x0: Vec<f64>,
    pub cost: StageCost,
    pub initial: InitialPolicy,
    pub lambda: f64,
    #[serde(rename = "M")]
    pub bound: f64,
    pub horizon: usize,
    pub max_iters: usize,
    pub xi: f64,
    pub epsilon: f64,
    pub beta: f64,
    /// Exponent vectors of the surrogate template.
    pub template: Vec<Vec<u32>>,
    #[serde(default)]
    pub samples_override: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_degrees")]
    pub barrier_degrees: Vec<u32>,
}

impl ExampleConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExampleConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (n, m) = (self.state_dim, self.control_dim);
        if n == 0 {
            return Err(field("state_dim", "must be positive"));
        }
        if m == 0 {
            return Err(field("control_dim", "must be positive"));
        }
        if self.dynamics.len() != n || self.dynamics.iter().any(|p| p.nvars() != n + m) {
            return Err(field(
                "dynamics",
                format!("need {n} polynomials over {} variables", n + m),
            ));
        }
        for (name, p) in [("safe", &self.safe), ("target", &self.target), ("outer", &self.outer)] {
            if p.nvars() != n {
                return Err(ConfigError::Field {
                    field: name,
                    message: format!("must have {n} variables"),
                });
            }
        }
        if self.input_lower.len() != m || self.input_upper.len() != m {
            return Err(field("input_lower", format!("input box needs {m} entries")));
        }
        if self.input_lower.iter().zip(&self.input_upper).any(|(l, u)| !(l < u)) {
            return Err(field("input_upper", "each upper bound must exceed its lower bound"));
        }
        if self.x0.len() != n {
            return Err(field("x0", format!("must have {n} entries")));
        }
        if !(self.lambda > 1.0) || !self.lambda.is_finite() {
            return Err(field("lambda", "must lie in (1, inf)"));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(field("M", "must be positive"));
        }
        if self.horizon == 0 {
            return Err(field("horizon", "must be at least 1"));
        }
        if !(self.xi > 0.0) {
            return Err(field("xi", "must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(field("epsilon", "must lie in (0, 1)"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(field("beta", "must lie in (0, 1)"));
        }
        if self.template.is_empty() || self.template.iter().any(|e| e.len() != n) {
            return Err(field("template", format!("need exponent vectors of length {n}")));
        }
        if self.barrier_degrees.is_empty() || self.barrier_degrees.iter().any(|d| *d == 0 || d % 2 == 1) {
            return Err(field("barrier_degrees", "degrees must be even and positive"));
        }
        if !(self.cost.state_weight > 0.0 && self.cost.input_weight >= 0.0 && self.cost.terminal_weight >= 0.0) {
            return Err(field(
                "cost",
                "weights must be nonnegative with a positive state weight",
            ));
        }
        match &self.initial {
            InitialPolicy::Controller { gain, offset } => {
                if offset.len() != m || gain.len() != m || gain.iter().any(|r| r.len() != n) {
                    return Err(field("initial", format!("controller gain must be {m}x{n}")));
                }
            }
            InitialPolicy::Trajectory { trajectory } => {
                if trajectory.is_empty() || trajectory.states.len() != trajectory.len() + 1 {
                    return Err(field(
                        "initial",
                        "trajectory must have L >= 1 transitions and L + 1 states",
                    ));
                }
            }
        }
        self.sets().map_err(|e| field("outer", e.to_string()))?;
        Ok(())
    }

    pub fn system(&self) -> DiscreteSystem {
        DiscreteSystem::new(self.state_dim, self.control_dim, self.dynamics.clone()).expect("validated dynamics")
    }

    pub fn sets(&self) -> Result<ReachAvoidSets, crate::gbf::GbfError> {
        ReachAvoidSets::new(self.safe.clone(), self.target.clone(), self.outer.clone())
    }

    pub fn template_monomials(&self) -> Vec<Monomial> {
        self.template.iter().map(|e| Monomial::new(e.clone())).collect()
    }

    pub fn initial_controller(&self) -> Option<LinearFeedback> {
        match &self.initial {
            InitialPolicy::Controller { gain, offset } => Some(LinearFeedback::new(
                gain.clone(),
                offset.clone(),
                self.input_lower.clone(),
                self.input_upper.clone(),
            )),
            InitialPolicy::Trajectory { .. } => None,
        }
    }
}

fn var(n: usize, i: usize) -> Polynomial {
    Polynomial::var(n, i)
}

fn cst(n: usize, c: f64) -> Polynomial {
    Polynomial::constant(n, c)
}

/// `Σ (x_i / r_i)² − level`.
fn ellipse(radii: &[f64], level: f64) -> Polynomial {
    let n = radii.len();
    let mut p = cst(n, -level);
    for (i, r) in radii.iter().enumerate() {
        let x = var(n, i);
        p = &p + &(&x * &x).scale(1.0 / (r * r));
    }
    p
}

fn full_template(n: usize) -> Vec<Vec<u32>> {
    monomial_basis(n, 2)
        .into_iter()
        .map(|m| m.exponents().to_vec())
        .collect()
}

/// Double integrator, `p⁺ = p + dt·v`, `v⁺ = v + u`.
fn double_integrator(dt: f64) -> Vec<Polynomial> {
    let (p, v, u) = (var(3, 0), var(3, 1), var(3, 2));
    vec![&p + &v.scale(dt), &v + &u]
}

/// Reversed Van der Pol oscillator with additive input.
fn van_der_pol(dt: f64) -> Vec<Polynomial> {
    let (x1, x2, u) = (var(3, 0), var(3, 1), var(3, 2));
    let drift = &(&(&cst(3, 1.0) - &(&x1 * &x1)) * &x2) - &x1;
    vec![&x1 - &x2.scale(dt), &(&x2 - &drift.scale(dt)) + &u]
}

fn three_state(dt: f64) -> Vec<Polynomial> {
    let (x1, x2, x3, u) = (var(4, 0), var(4, 1), var(4, 2), var(4, 3));
    let d1 = x2.scale(-2.0);
    let d2 = &(&(&x1.scale(0.8) - &x2.scale(2.1)) + &x3) + &(&(&x1 * &x1) * &x2).scale(10.0);
    let d3 = &x3.powi(3) - &x3;
    vec![&x1 + &d1.scale(dt), &x2 + &d2.scale(dt), &(&x3 + &d3.scale(dt)) + &u]
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 5] = ["ex1", "ex2", "ex3", "ex2-dt01", "ex1-N2"];

/// Horizons of the horizon-sensitivity sweep.
pub const SWEEP_HORIZONS: [usize; 6] = [2, 4, 6, 8, 10, 12];

/// A built-in configuration by name.
pub fn builtin(name: &str) -> Result<ExampleConfig, ConfigError> {
    let cfg = match name {
        "ex1" => ExampleConfig {
            name: "ex1".into(),
            dt: 0.1,
            state_dim: 2,
            control_dim: 1,
            dynamics: double_integrator(0.1),
            safe: ellipse(&[8.0, 8.0], 1.0),
            target: ellipse(&[1.0, 1.0], 0.25),
            outer: ellipse(&[8.0, 8.0], 2.0),
            input_lower: vec![-0.5],
            input_upper: vec![0.5],
            x0: vec![4.0, -6.0],
            cost: StageCost::default(),
            initial: InitialPolicy::Controller {
                gain: vec![vec![-0.04, -0.1]],
                offset: vec![0.0],
            },
            lambda: 1.001,
            bound: 1.0,
            horizon: 4,
            max_iters: 8,
            xi: 0.1,
            epsilon: 0.1,
            beta: 0.1,
            template: full_template(2),
            samples_override: Some(207),
            seed: default_seed(),
            barrier_degrees: default_degrees(),
        },
        "ex2" => ExampleConfig {
            name: "ex2".into(),
            dt: 0.05,
            state_dim: 2,
            control_dim: 1,
            dynamics: van_der_pol(0.05),
            safe: ellipse(&[2.0, 2.0], 1.0),
            target: ellipse(&[1.0, 1.0], 0.04),
            outer: ellipse(&[2.0, 2.0], 2.0),
            input_lower: vec![-0.5],
            input_upper: vec![0.5],
            x0: vec![1.2, 1.0],
            cost: StageCost::default(),
            initial: InitialPolicy::Controller {
                gain: vec![vec![0.0, 0.0]],
                offset: vec![0.0],
            },
            lambda: 1.001,
            bound: 1.0,
            horizon: 3,
            max_iters: 8,
            xi: 0.1,
            epsilon: 0.05,
            beta: 0.05,
            template: full_template(2),
            samples_override: Some(428),
            seed: default_seed(),
            barrier_degrees: default_degrees(),
        },
        "ex3" => ExampleConfig {
            name: "ex3".into(),
            dt: 0.1,
            state_dim: 3,
            control_dim: 1,
            dynamics: three_state(0.1),
            safe: ellipse(&[1.0, 1.0, 1.0], 0.25),
            target: ellipse(&[1.0, 1.0, 1.0], 0.01),
            outer: ellipse(&[1.0, 1.0, 1.0], 0.5),
            input_lower: vec![-2.0],
            input_upper: vec![2.0],
            x0: vec![0.2, 0.4, 0.1],
            cost: StageCost::default(),
            initial: InitialPolicy::Controller {
                gain: vec![vec![0.0, 0.0, 0.0]],
                offset: vec![0.0],
            },
            lambda: 1.001,
            bound: 1.0,
            horizon: 4,
            max_iters: 6,
            xi: 0.002,
            epsilon: 0.1,
            beta: 0.1,
            template: full_template(3),
            samples_override: Some(267),
            seed: default_seed(),
            barrier_degrees: default_degrees(),
        },
        "ex2-dt01" => ExampleConfig {
            name: "ex2-dt01".into(),
            dt: 0.1,
            dynamics: van_der_pol(0.1),
            horizon: 2,
            max_iters: 10,
            xi: 0.01,
            ..builtin("ex2")?
        },
        "ex1-N2" => ExampleConfig {
            name: "ex1-N2".into(),
            horizon: 2,
            max_iters: 10,
            xi: 0.01,
            ..builtin("ex1")?
        },
        other => return Err(ConfigError::UnknownExample(other.to_string())),
    };
    Ok(cfg)
}

/// Horizon-sweep configurations derived from `ex2-dt01`.
pub fn sweep_configs() -> Vec<ExampleConfig> {
    let base = builtin("ex2-dt01").expect("built-in exists");
    SWEEP_HORIZONS
        .iter()
        .map(|&n| ExampleConfig {
            name: format!("ex2-dt01-N{n}"),
            horizon: n,
            max_iters: 3,
            xi: 0.01,
            epsilon: 0.05,
            beta: 0.05,
            ..base.clone()
        })
        .collect()
}
