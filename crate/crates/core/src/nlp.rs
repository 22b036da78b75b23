//! Single-shooting solver for the finite-horizon MPC program.
//!
//! ```text
//! minimize    Σ_{k<N} h(x_k, u_k) + Q(x_N)
//! subject to  x_{k+1} = f(x_k, u_k),  u_k ∈ U,
//!             w(x_k) ≤ 0 for k < N,  v(x_N) ≥ b
//! ```
//!
//! States are eliminated by rollout. Inequalities go through a
//! Powell-Hestenes-Rockafellar augmented Lagrangian; each subproblem is a
//! box-constrained minimization solved by projected BFGS with an analytic
//! adjoint gradient.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{DiscreteSystem, StageCost};
use crate::poly::Polynomial;
use crate::scenario::sample_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Data shared by every solve of an episode.
#[derive(Debug, Clone)]
pub struct NlpModel {
    pub system: DiscreteSystem,
    pub horizon: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cost: StageCost,
    pub safe: Polynomial,
    pub terminal_value: Polynomial,
    pub terminal_cost: Polynomial,
    safe_grad: Vec<Polynomial>,
    value_grad: Vec<Polynomial>,
    cost_grad: Vec<Polynomial>,
}

/// Tuning of [`solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpSettings {
    pub feas_tol: f64,
    pub inner_tol: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Random restarts besides the warm start.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for NlpSettings {
    fn default() -> Self {
        NlpSettings {
            feas_tol: 1e-6,
            inner_tol: 1e-8,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e8,
            max_outer: 30,
            max_inner: 400,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    /// `N` rows of `m` controls.
    pub controls: Vec<Vec<f64>>,
    /// `N + 1` rolled-out states.
    pub states: Vec<Vec<f64>>,
    pub objective: f64,
    pub max_violation: f64,
    pub converged: bool,
}

/// Constraint values at a rollout: `w(x_k)` for `k < N`, then `b − v(x_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    pub state: Vec<f64>,
    pub terminal: f64,
}

impl ConstraintValues {
    pub fn max_violation(&self) -> f64 {
        self.state.iter().copied().chain([self.terminal]).fold(0.0, f64::max)
    }
}

impl NlpModel {
    pub fn new(
        system: DiscreteSystem,
        horizon: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        cost: StageCost,
        safe: Polynomial,
        terminal_value: Polynomial,
        terminal_cost: Polynomial,
    ) -> Result<Self, NlpError> {
        let (n, m) = (system.state_dim(), system.control_dim());
        if horizon == 0 {
            return Err(NlpError::Invalid("horizon must be at least 1".into()));
        }
        if lower.len() != m || upper.len() != m || lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(NlpError::Invalid("control box mismatch".into()));
        }
        if [&safe, &terminal_value, &terminal_cost].iter().any(|p| p.nvars() != n) {
            return Err(NlpError::Invalid(
                "constraint polynomials must be over the state".into(),
            ));
        }
        Ok(NlpModel {
            safe_grad: safe.gradient(),
            value_grad: terminal_value.gradient(),
            cost_grad: terminal_cost.gradient(),
            system,
            horizon,
            lower,
            upper,
            cost,
            safe,
            terminal_value,
            terminal_cost,
        })
    }

    pub fn control_dim(&self) -> usize {
        self.system.control_dim()
    }

    fn unflatten(&self, u: &[f64]) -> Vec<Vec<f64>> {
        u.chunks(self.control_dim()).map(<[f64]>::to_vec).collect()
    }

    fn project(&self, u: &mut [f64]) {
        let m = self.control_dim();
        for (i, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i % m], self.upper[i % m]);
        }
    }

    pub fn rollout(&self, x0: &[f64], controls: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.to_vec());
        for u in controls {
            let next = self.system.step(states.last().expect("nonempty"), u);
            states.push(next);
        }
        states
    }

    pub fn objective(&self, states: &[Vec<f64>], controls: &[Vec<f64>]) -> f64 {
        let stage: f64 = states.iter().zip(controls).map(|(x, u)| self.cost.eval(x, u)).sum();
        stage + self.terminal_cost.eval_unchecked(states.last().expect("nonempty"))
    }

    pub fn constraints(&self, states: &[Vec<f64>], bound: f64) -> ConstraintValues {
        let n = states.len() - 1;
        ConstraintValues {
            state: states[..n].iter().map(|x| self.safe.eval_unchecked(x)).collect(),
            terminal: bound - self.terminal_value.eval_unchecked(&states[n]),
        }
    }

    /// Objective, constraints and rollout at a control sequence.
    pub fn evaluate(&self, x0: &[f64], controls: &[Vec<f64>], bound: f64) -> (f64, ConstraintValues, Vec<Vec<f64>>) {
        let states = self.rollout(x0, controls);
        (
            self.objective(&states, controls),
            self.constraints(&states, bound),
            states,
        )
    }

    /// Gradient of the plain objective with respect to the controls.
    pub fn gradient(&self, x0: &[f64], controls: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let flat: Vec<f64> = controls.concat();
        let (_, g) = self.lagrangian(x0, &flat, f64::NAN, &Multipliers::zero(self.horizon), 0.0);
        self.unflatten(&g)
    }

    /// Augmented Lagrangian value and gradient. With `rho = 0` only the
    /// objective is returned.
    fn lagrangian(&self, x0: &[f64], u: &[f64], bound: f64, mult: &Multipliers, rho: f64) -> (f64, Vec<f64>) {
        let controls = self.unflatten(u);
        let states = self.rollout(x0, &controls);
        let nh = self.horizon;
        let m = self.control_dim();
        let eval_grad =
            |g: &[Polynomial], x: &[f64]| DVector::from_iterator(x.len(), g.iter().map(|p| p.eval_unchecked(x)));
        let phr = |mu: f64, c: f64| -> (f64, f64) {
            let t = (mu + rho * c).max(0.0);
            ((t * t - mu * mu) / (2.0 * rho), t)
        };
        let xn = &states[nh];
        let mut value = self.objective(&states, &controls);
        let mut lam = eval_grad(&self.cost_grad, xn);
        if rho > 0.0 {
            let (pv, dv) = phr(mult.terminal, bound - self.terminal_value.eval_unchecked(xn));
            value += pv;
            lam -= eval_grad(&self.value_grad, xn) * dv;
        }
        let mut grad = vec![0.0; nh * m];
        for k in (0..nh).rev() {
            let (x, uk) = (&states[k], &controls[k]);
            let (fx, fu) = self.system.jacobians(x, uk);
            let gu = DVector::from_vec(self.cost.grad_u(uk)) + fu.transpose() * &lam;
            grad[k * m..(k + 1) * m].copy_from_slice(gu.as_slice());
            let mut lx = DVector::from_vec(self.cost.grad_x(x)) + fx.transpose() * &lam;
            if rho > 0.0 && k > 0 {
                let (pv, dv) = phr(mult.state[k], self.safe.eval_unchecked(x));
                value += pv;
                lx += eval_grad(&self.safe_grad, x) * dv;
            }
            lam = lx;
        }
        (value, grad)
    }
}

#[derive(Debug, Clone)]
struct Multipliers {
    state: Vec<f64>,
    terminal: f64,
}

impl Multipliers {
    fn zero(n: usize) -> Self {
        Multipliers {
            state: vec![0.0; n],
            terminal: 0.0,
        }
    }
}

/// Projected BFGS on the box; returns the final point and whether the
/// projected gradient fell below tolerance.
fn minimize_box(
    model: &NlpModel,
    f: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    mut u: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, bool) {
    let d = u.len();
    let (mut fv, mut g) = f(&u);
    let mut h = DMatrix::<f64>::identity(d, d);
    let at_bound = |u: &[f64], i: usize, gi: f64| {
        let m = model.control_dim();
        (u[i] <= model.lower[i % m] + 1e-12 && gi > 0.0) || (u[i] >= model.upper[i % m] - 1e-12 && gi < 0.0)
    };
    for _ in 0..max_iters {
        let mut trial = u.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>();
        model.project(&mut trial);
        let pg = trial.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if pg <= tol * (1.0 + fv.abs()) {
            return (u, true);
        }
        let free: Vec<bool> = (0..d).map(|i| !at_bound(&u, i, g[i])).collect();
        let gv = DVector::from_iterator(d, (0..d).map(|i| if free[i] { g[i] } else { 0.0 }));
        let mut dir = -(&h * &gv);
        for i in 0..d {
            if !free[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&gv) >= -1e-16 {
            h = DMatrix::identity(d, d);
            dir = -gv.clone();
        }
        // Projected Armijo backtracking along the path P(u + α d).
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand: Vec<f64> = u.iter().zip(dir.iter()).map(|(a, b)| a + alpha * b).collect();
            model.project(&mut cand);
            let (cv, cg) = f(&cand);
            let decrease: f64 = g.iter().zip(&cand).zip(&u).map(|((gi, c), ui)| gi * (c - ui)).sum();
            if cv <= fv + 1e-4 * decrease && cv.is_finite() {
                accepted = Some((cand, cv, cg));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, cv, cg)) = accepted else {
            // No progress along the quasi-Newton path; retry once with steepest descent.
            if h != DMatrix::identity(d, d) {
                h = DMatrix::identity(d, d);
                continue;
            }
            return (u, false);
        };
        let s = DVector::from_iterator(d, cand.iter().zip(&u).map(|(a, b)| a - b));
        let y = DVector::from_iterator(d, cg.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h = left * &h * right + &s * s.transpose() * rho;
        }
        let stalled = (fv - cv).abs() <= 1e-15 * (1.0 + fv.abs()) && s.amax() <= 1e-15;
        u = cand;
        fv = cv;
        g = cg;
        if stalled {
            return (u, false);
        }
    }
    (u, false)
}

/// One augmented-Lagrangian run from a starting point.
fn solve_from(model: &NlpModel, x0: &[f64], bound: f64, start: Vec<f64>, s: &NlpSettings) -> (Vec<f64>, bool) {
    let nh = model.horizon;
    let mut mult = Multipliers::zero(nh);
    let mut rho = s.initial_penalty;
    let mut u = start;
    model.project(&mut u);
    let mut last_viol = f64::INFINITY;
    for _ in 0..s.max_outer {
        let f = |v: &[f64]| model.lagrangian(x0, v, bound, &mult, rho);
        let (next, inner_ok) = minimize_box(model, &f, u, s.inner_tol, s.max_inner);
        u = next;
        let states = model.rollout(x0, &model.unflatten(&u));
        let c = model.constraints(&states, bound);
        let viol = c.max_violation();
        let mut comp: f64 = 0.0;
        for k in 1..nh {
            mult.state[k] = (mult.state[k] + rho * c.state[k]).max(0.0);
            comp = comp.max((mult.state[k] * c.state[k]).abs());
        }
        mult.terminal = (mult.terminal + rho * c.terminal).max(0.0);
        comp = comp.max((mult.terminal * c.terminal).abs());
        if viol <= s.feas_tol * 1e-2 && inner_ok && comp <= 1e-6 {
            return (u, true);
        }
        if viol > 0.25 * last_viol {
            rho = (rho * s.penalty_growth).min(s.max_penalty);
        }
        last_viol = viol;
    }
    (u, false)
}

/// Solves from the warm start plus seeded random restarts and keeps the
/// best feasible point that is no worse than the warm start. If none
/// qualifies, the warm start is returned with `converged = false`.
pub fn solve(
    model: &NlpModel,
    x0: &[f64],
    bound: f64,
    warm: &[Vec<f64>],
    settings: &NlpSettings,
) -> Result<NlpSolution, NlpError> {
    let m = model.control_dim();
    if warm.len() != model.horizon || warm.iter().any(|u| u.len() != m) {
        return Err(NlpError::Invalid(format!("warm start must be {}x{m}", model.horizon)));
    }
    if x0.len() != model.system.state_dim() {
        return Err(NlpError::Invalid("initial state dimension mismatch".into()));
    }
    let mut warm_flat: Vec<f64> = warm.concat();
    model.project(&mut warm_flat);
    let warm_ctrl = model.unflatten(&warm_flat);
    let (warm_obj, warm_c, warm_states) = model.evaluate(x0, &warm_ctrl, bound);
    let warm_sol = NlpSolution {
        controls: warm_ctrl,
        states: warm_states,
        objective: warm_obj,
        max_violation: warm_c.max_violation(),
        converged: false,
    };

    let mut starts = vec![warm_flat.clone()];
    for r in 0..settings.restarts {
        let mut rng = sample_rng(settings.seed, r);
        starts.push(
            (0..warm_flat.len())
                .map(|i| rng.random_range(model.lower[i % m]..=model.upper[i % m]))
                .collect(),
        );
    }
    let runs: Vec<(Vec<f64>, bool)> = starts
        .into_par_iter()
        .map(|s| solve_from(model, x0, bound, s, settings))
        .collect();

    let mut best: Option<NlpSolution> = None;
    for (u, ok) in runs {
        let controls = model.unflatten(&u);
        let (obj, c, states) = model.evaluate(x0, &controls, bound);
        let viol = c.max_violation();
        if viol > settings.feas_tol || obj > warm_obj + 1e-9 {
            continue;
        }
        if best.as_ref().is_none_or(|b| obj < b.objective) {
            best = Some(NlpSolution {
                controls,
                states,
                objective: obj,
                max_violation: viol,
                converged: ok,
            });
        }
    }
    Ok(best.unwrap_or(warm_sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::builtin;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ball(n: usize, r2: f64) -> Polynomial {
        let mut p = Polynomial::constant(n, -r2);
        for i in 0..n {
            let x = Polynomial::var(n, i);
            p = &p + &(&x * &x);
        }
        p
    }

    fn model_for(name: &str, horizon: usize) -> NlpModel {
        let cfg = builtin(name).unwrap();
        let n = cfg.state_dim;
        NlpModel::new(
            cfg.system(),
            horizon,
            cfg.input_lower.clone(),
            cfg.input_upper.clone(),
            cfg.cost,
            cfg.safe.clone(),
            &Polynomial::constant(n, 1.0) - &ball(n, 0.0).scale(0.1),
            ball(n, 0.0).scale(2.0),
        )
        .unwrap()
    }

    fn finite_difference(model: &NlpModel, x0: &[f64], u: &[Vec<f64>]) -> Vec<f64> {
        let flat = u.concat();
        let h = 1e-6;
        (0..flat.len())
            .map(|i| {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[i] += h;
                dn[i] -= h;
                let fu = model.evaluate(x0, &model.unflatten(&up), 0.0).0;
                let fd = model.evaluate(x0, &model.unflatten(&dn), 0.0).0;
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for name in ["ex1", "ex2", "ex3"] {
            let model = model_for(name, 5);
            let n = model.system.state_dim();
            for _ in 0..20 {
                let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
                let u: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-0.5..0.5)]).collect();
                let g = model.gradient(&x0, &u).concat();
                let fd = finite_difference(&model, &x0, &u);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{name}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn one_step_least_squares() {
        // x⁺ = x + u, cost x² + u² + 2 x₁², no active constraints:
        // minimize u² + 2 (x + u)² → u = −2x/3.
        let x = Polynomial::var(2, 0);
        let u = Polynomial::var(2, 1);
        let sys = DiscreteSystem::new(1, 1, vec![&x + &u]).unwrap();
        let xs = Polynomial::var(1, 0);
        let model = NlpModel::new(
            sys,
            1,
            vec![-10.0],
            vec![10.0],
            StageCost::default(),
            ball(1, 100.0),
            Polynomial::constant(1, 1.0),
            (&xs * &xs).scale(2.0),
        )
        .unwrap();
        let sol = solve(&model, &[0.9], 0.0, &[vec![0.0]], &NlpSettings::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.controls[0][0] + 0.6).abs() < 1e-6, "{:?}", sol.controls);
    }

    #[test]
    fn never_worse_than_warm_start_and_feasible() {
        let model = model_for("ex2", 4);
        let warm = vec![vec![0.0]; 4];
        let x0 = [0.5, 0.3];
        // Bound reachable by the warm start.
        let (_, _, st) = model.evaluate(&x0, &warm, 0.0);
        let bound = model.terminal_value.eval_unchecked(&st[4]) - 1e-3;
        let sol = solve(&model, &x0, bound, &warm, &NlpSettings::default()).unwrap();
        let (wobj, _, _) = model.evaluate(&x0, &warm, bound);
        assert!(sol.objective <= wobj + 1e-9);
        assert!(sol.max_violation <= 1e-6);
        let re = model.rollout(&x0, &sol.controls);
        assert_eq!(re, sol.states);
    }

    #[test]
    fn impossible_bound_returns_warm_start() {
        let model = model_for("ex1", 2);
        let warm = vec![vec![0.1]; 2];
        let sol = solve(&model, &[4.0, -6.0], 10.0, &warm, &NlpSettings::default()).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.controls, warm);
    }

    #[test]
    fn zero_horizon_rejected() {
        let cfg = builtin("ex1").unwrap();
        let n = 2;
        let err = NlpModel::new(
            cfg.system(),
            0,
            vec![-0.5],
            vec![0.5],
            cfg.cost,
            cfg.safe.clone(),
            Polynomial::constant(n, 1.0),
            Polynomial::zero(n),
        );
        assert!(err.is_err());
    }
}
