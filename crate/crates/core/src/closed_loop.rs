//! Closed-loop simulation, cost accounting and affine controller fitting.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{PolyError, Polynomial};

#[derive(Debug, Error)]
pub enum ClosedLoopError {
    #[error("polynomial error: {0}")]
    Poly(#[from] PolyError),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("cannot fit a controller to an empty trajectory")]
    EmptyTrajectory,
    #[error("csv error: {0}")]
    Csv(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// `x⁺ = f(x, u)` with each component a polynomial over `(x, u)`.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    n: usize,
    m: usize,
    f: Vec<Polynomial>,
    /// `∂f_i/∂z_j` over the joint variables `z = (x, u)`.
    jac: Vec<Vec<Polynomial>>,
}

impl DiscreteSystem {
    pub fn new(n: usize, m: usize, f: Vec<Polynomial>) -> Result<Self, ClosedLoopError> {
        if n == 0 || f.len() != n {
            return Err(ClosedLoopError::InvalidSystem(format!(
                "expected {n} components, found {}",
                f.len()
            )));
        }
        if let Some(bad) = f.iter().find(|p| p.nvars() != n + m) {
            return Err(ClosedLoopError::InvalidSystem(format!(
                "component over {} variables, expected {}",
                bad.nvars(),
                n + m
            )));
        }
        let jac = f.iter().map(Polynomial::gradient).collect();
        Ok(DiscreteSystem { n, m, f, jac })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.f
    }

    fn joint(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n + self.m);
        z.extend_from_slice(x);
        z.extend_from_slice(u);
        z
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let z = self.joint(x, u);
        self.f.iter().map(|p| p.eval_unchecked(&z)).collect()
    }

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`.
    pub fn jacobians(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let z = self.joint(x, u);
        let fx = DMatrix::from_fn(self.n, self.n, |i, j| self.jac[i][j].eval_unchecked(&z));
        let fu = DMatrix::from_fn(self.n, self.m, |i, j| self.jac[i][self.n + j].eval_unchecked(&z));
        (fx, fu)
    }

    /// `x ↦ f(x, û(x))` for a polynomial control law `û` over `n` variables.
    pub fn close_loop(&self, law: &[Polynomial]) -> Result<Vec<Polynomial>, ClosedLoopError> {
        if law.len() != self.m {
            return Err(ClosedLoopError::InvalidSystem("control law dimension mismatch".into()));
        }
        let mut subs: Vec<Polynomial> = (0..self.n).map(|i| Polynomial::var(self.n, i)).collect();
        subs.extend(law.iter().cloned());
        Ok(self.f.iter().map(|p| p.compose(&subs)).collect::<Result<_, _>>()?)
    }
}

/// `h(x, u) = a‖x‖² + b‖u‖²`, with terminal penalty `c‖x_L‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub state_weight: f64,
    pub input_weight: f64,
    pub terminal_weight: f64,
}

impl Default for StageCost {
    fn default() -> Self {
        StageCost {
            state_weight: 1.0,
            input_weight: 1.0,
            terminal_weight: 1.0,
        }
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

impl StageCost {
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        self.state_weight * sq(x) + self.input_weight * sq(u)
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        self.terminal_weight * sq(x)
    }

    pub fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 2.0 * self.state_weight * v).collect()
    }

    pub fn grad_u(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| 2.0 * self.input_weight * v).collect()
    }
}

/// Anything mapping a state to a control.
pub trait Controller: Sync {
    fn control(&self, x: &[f64]) -> Vec<f64>;
}

/// `u = clip(K x + k0)` to a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFeedback {
    /// `m × n`, row-major.
    pub gain: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearFeedback {
    pub fn new(gain: Vec<Vec<f64>>, offset: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        LinearFeedback {
            gain,
            offset,
            lower,
            upper,
        }
    }

    pub fn zero(n: usize, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let m = lower.len();
        LinearFeedback {
            gain: vec![vec![0.0; n]; m],
            offset: vec![0.0; m],
            lower,
            upper,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.gain.first().map_or(0, Vec::len)
    }

    pub fn control_dim(&self) -> usize {
        self.offset.len()
    }

    /// The affine value before clipping.
    pub fn raw(&self, x: &[f64]) -> Vec<f64> {
        self.gain
            .iter()
            .zip(&self.offset)
            .map(|(row, k0)| k0 + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// The affine law as polynomials in the state (no clipping).
    pub fn polynomials(&self) -> Vec<Polynomial> {
        let n = self.state_dim();
        self.gain
            .iter()
            .zip(&self.offset)
            .map(|(row, &k0)| {
                let mut p = Polynomial::constant(n, k0);
                for (j, &a) in row.iter().enumerate() {
                    p = &p + &Polynomial::var(n, j).scale(a);
                }
                p
            })
            .collect()
    }
}

impl Controller for LinearFeedback {
    fn control(&self, x: &[f64]) -> Vec<f64> {
        self.raw(x)
            .into_iter()
            .enumerate()
            .map(|(i, u)| u.clamp(self.lower[i], self.upper[i]))
            .collect()
    }
}

/// A finite state/control sequence ending at the first target hit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    /// `L + 1` states.
    pub states: Vec<Vec<f64>>,
    /// `L` controls.
    pub controls: Vec<Vec<f64>>,
    /// `L` stage costs.
    pub stage_costs: Vec<f64>,
    /// Penalty on the final state.
    pub terminal_cost: f64,
}

impl Trajectory {
    pub fn starting_at(x0: Vec<f64>) -> Self {
        Trajectory {
            states: vec![x0],
            ..Default::default()
        }
    }

    /// Number of transitions `L`.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("a trajectory has at least one state")
    }

    pub fn push(&mut self, u: Vec<f64>, h: f64, next: Vec<f64>) {
        self.controls.push(u);
        self.stage_costs.push(h);
        self.states.push(next);
    }

    /// Largest deviation between stored successors and re-simulated ones.
    pub fn resimulation_error(&self, system: &DiscreteSystem) -> f64 {
        (0..self.len())
            .map(|i| {
                let next = system.step(&self.states[i], &self.controls[i]);
                next.iter()
                    .zip(&self.states[i + 1])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotReachedCause {
    Timeout,
    LeftSafeSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NotReached {
    pub step: usize,
    pub cause: NotReachedCause,
    pub partial: Trajectory,
}

/// Total cost: stage costs plus the terminal penalty.
pub fn trajectory_cost(traj: &Trajectory) -> f64 {
    traj.stage_costs.iter().sum::<f64>() + traj.terminal_cost
}

/// Runs `controller` from `x0` until the state enters `{target ≤ 0}`.
/// Fails if `{safe ≤ 0}` is left first or `max_steps` transitions elapse.
pub fn simulate(
    system: &DiscreteSystem,
    controller: &dyn Controller,
    x0: &[f64],
    target: &Polynomial,
    safe: &Polynomial,
    cost: &StageCost,
    max_steps: usize,
) -> Result<Trajectory, NotReached> {
    let mut traj = Trajectory::starting_at(x0.to_vec());
    let mut x = x0.to_vec();
    for step in 0..=max_steps {
        if target.eval_unchecked(&x) <= 0.0 {
            traj.terminal_cost = cost.terminal(&x);
            return Ok(traj);
        }
        if safe.eval_unchecked(&x) > 0.0 {
            return Err(NotReached {
                step,
                cause: NotReachedCause::LeftSafeSet,
                partial: traj,
            });
        }
        if step == max_steps {
            break;
        }
        let u = controller.control(&x);
        let h = cost.eval(&x, &u);
        let next = system.step(&x, &u);
        traj.push(u, h, next.clone());
        x = next;
    }
    Err(NotReached {
        step: max_steps,
        cause: NotReachedCause::Timeout,
        partial: traj,
    })
}

/// Regressor rows `(x, 1)` or `(x)` for the first `rows` states.
fn regressors(traj: &Trajectory, rows: usize, offset: bool) -> DMatrix<f64> {
    let n = traj.states[0].len();
    let cols = n + usize::from(offset);
    DMatrix::from_fn(rows, cols, |i, j| if j < n { traj.states[i][j] } else { 1.0 })
}

fn unpack(theta: &[DVector<f64>], n: usize, offset: bool, lower: Vec<f64>, upper: Vec<f64>) -> LinearFeedback {
    LinearFeedback {
        gain: theta.iter().map(|t| t.rows(0, n).iter().copied().collect()).collect(),
        offset: theta.iter().map(|t| if offset { t[n] } else { 0.0 }).collect(),
        lower,
        upper,
    }
}

/// Least-squares law `u = K x (+ k0)` through the `(x(i), u(i))` pairs of a
/// trajectory; minimum-norm when the data are rank deficient. Without an
/// offset the law vanishes at the origin.
pub fn fit_linear(
    traj: &Trajectory,
    lower: Vec<f64>,
    upper: Vec<f64>,
    offset: bool,
) -> Result<LinearFeedback, ClosedLoopError> {
    if traj.is_empty() {
        return Err(ClosedLoopError::EmptyTrajectory);
    }
    let n = traj.states[0].len();
    let m = traj.controls[0].len();
    let l = traj.len();
    let phi = regressors(traj, l, offset);
    let targets = DMatrix::from_fn(l, m, |i, j| traj.controls[i][j]);
    let theta = least_squares_min_norm(&phi, &targets);
    let cols: Vec<DVector<f64>> = (0..m).map(|i| theta.column(i).into_owned()).collect();
    Ok(unpack(&cols, n, offset, lower, upper))
}

fn least_squares_min_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |acc, &s| acc.max(s));
    let eps = smax * 1e-12 * a.nrows().max(a.ncols()) as f64;
    svd.solve(b, eps).expect("u and v were computed")
}

/// CSV header: `iter,t,x_1..x_n,u_1..u_m,stage_cost`.
pub fn trajectory_csv_header(n: usize, m: usize) -> String {
    let mut cols = vec!["iter".to_string(), "t".to_string()];
    cols.extend((1..=n).map(|i| format!("x_{i}")));
    cols.extend((1..=m).map(|i| format!("u_{i}")));
    cols.push("stage_cost".into());
    cols.join(",")
}

/// Writes one row per transition and a final row holding the last state
/// with empty controls and the terminal penalty as its cost.
pub fn write_trajectory_csv<W: Write>(mut w: W, iter: usize, traj: &Trajectory) -> Result<(), ClosedLoopError> {
    let n = traj.states[0].len();
    let m = traj.controls.first().map_or(0, Vec::len);
    writeln!(w, "{}", trajectory_csv_header(n, m))?;
    for t in 0..traj.states.len() {
        let mut row = vec![iter.to_string(), t.to_string()];
        row.extend(traj.states[t].iter().map(|v| format!("{v:e}")));
        if t < traj.len() {
            row.extend(traj.controls[t].iter().map(|v| format!("{v:e}")));
            row.push(format!("{:e}", traj.stage_costs[t]));
        } else {
            row.extend(std::iter::repeat_n(String::new(), m));
            row.push(format!("{:e}", traj.terminal_cost));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Parses a file written by [`write_trajectory_csv`]; returns the iteration
/// index and the trajectory. `m` is inferred from the header.
pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<(usize, Trajectory), ClosedLoopError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| ClosedLoopError::Csv("missing header".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let n = cols.iter().filter(|c| c.starts_with("x_")).count();
    let m = cols.iter().filter(|c| c.starts_with("u_")).count();
    if cols.len() != n + m + 3 || cols[0] != "iter" || cols[1] != "t" || cols[cols.len() - 1] != "stage_cost" {
        return Err(ClosedLoopError::Csv(format!("unexpected header {header:?}")));
    }
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| ClosedLoopError::Csv(format!("{s:?}: {e}")))
    };
    let mut traj = Trajectory::default();
    let mut iter = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(ClosedLoopError::Csv(format!(
                "row has {} fields, expected {}",
                f.len(),
                cols.len()
            )));
        }
        iter = f[0].parse().map_err(|_| ClosedLoopError::Csv("bad iter".into()))?;
        let x = f[2..2 + n].iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?;
        let cost = parse(f[cols.len() - 1])?;
        let u_fields = &f[2 + n..2 + n + m];
        traj.states.push(x);
        if m > 0 && u_fields.iter().all(|s| s.is_empty()) {
            traj.terminal_cost = cost;
        } else {
            traj.controls
                .push(u_fields.iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?);
            traj.stage_costs.push(cost);
        }
    }
    if traj.states.len() != traj.controls.len() + 1 {
        return Err(ClosedLoopError::Csv("final state row missing".into()));
    }
    Ok((iter, traj))
}

/// Converts a slice of states to column vectors.
pub fn to_dvector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn double_integrator() -> DiscreteSystem {
        // z = (p, v, u)
        let p = Polynomial::var(3, 0);
        let v = Polynomial::var(3, 1);
        let u = Polynomial::var(3, 2);
        DiscreteSystem::new(2, 1, vec![&p + &v.scale(0.1), &v + &u]).unwrap()
    }

    fn ball(n: usize, r2: f64) -> Polynomial {
        let mut p = Polynomial::constant(n, -r2);
        for i in 0..n {
            let x = Polynomial::var(n, i);
            p = &p + &(&x * &x);
        }
        p
    }

    #[test]
    fn initial_double_integrator_cost() {
        let sys = double_integrator();
        let k = LinearFeedback::new(vec![vec![-0.04, -0.1]], vec![0.0], vec![-0.5], vec![0.5]);
        let safe = ball(2, 64.0);
        let traj = simulate(
            &sys,
            &k,
            &[4.0, -6.0],
            &ball(2, 0.25),
            &safe,
            &StageCost::default(),
            10_000,
        )
        .unwrap();
        assert!(
            (trajectory_cost(&traj) - 369.8267).abs() < 1e-3,
            "{}",
            trajectory_cost(&traj)
        );
        assert!(traj.resimulation_error(&sys) <= 1e-12);
    }

    #[test]
    fn start_in_target_is_empty() {
        let sys = double_integrator();
        let k = LinearFeedback::zero(2, vec![-0.5], vec![0.5]);
        let traj = simulate(
            &sys,
            &k,
            &[0.1, 0.1],
            &ball(2, 0.25),
            &ball(2, 64.0),
            &StageCost::default(),
            10,
        )
        .unwrap();
        assert!(traj.is_empty());
        assert_eq!(traj.stage_costs.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn not_reached_causes() {
        let sys = double_integrator();
        let k = LinearFeedback::zero(2, vec![-0.5], vec![0.5]);
        let err = simulate(
            &sys,
            &k,
            &[4.0, 1.0],
            &ball(2, 0.25),
            &ball(2, 64.0),
            &StageCost::default(),
            5,
        )
        .unwrap_err();
        assert_eq!(err.cause, NotReachedCause::Timeout);
        let err = simulate(
            &sys,
            &k,
            &[4.0, 40.0],
            &ball(2, 0.25),
            &ball(2, 64.0),
            &StageCost::default(),
            5,
        )
        .unwrap_err();
        assert_eq!(err.cause, NotReachedCause::LeftSafeSet);
        assert_eq!(err.step, 0);
    }

    #[test]
    fn single_step_cost() {
        let h = StageCost::default();
        assert_eq!(h.eval(&[1.0, 0.0], &[1.0]), 2.0);
    }

    #[test]
    fn fit_recovers_affine_law() {
        let sys = double_integrator();
        let k = LinearFeedback::new(vec![vec![-0.04, -0.1]], vec![0.0], vec![-5.0], vec![5.0]);
        let traj = simulate(
            &sys,
            &k,
            &[4.0, -6.0],
            &ball(2, 0.25),
            &ball(2, 1e4),
            &StageCost::default(),
            10_000,
        )
        .unwrap();
        let fit = fit_linear(&traj, vec![-5.0], vec![5.0], true).unwrap();
        assert!((fit.gain[0][0] + 0.04).abs() < 1e-9);
        assert!((fit.gain[0][1] + 0.1).abs() < 1e-9);
        assert!(fit.offset[0].abs() < 1e-9);
    }

    #[test]
    fn fit_zero_controls() {
        let sys = double_integrator();
        let k = LinearFeedback::zero(2, vec![-0.5], vec![0.5]);
        let mut traj = Trajectory::starting_at(vec![1.0, 0.5]);
        for _ in 0..5 {
            let x = traj.last_state().to_vec();
            let u = k.control(&x);
            let next = sys.step(&x, &u);
            traj.push(u, 0.0, next);
        }
        let fit = fit_linear(&traj, vec![-0.5], vec![0.5], true).unwrap();
        assert!(fit.gain[0].iter().all(|a| a.abs() < 1e-12));
        assert!(fit.offset[0].abs() < 1e-12);
    }

    #[test]
    fn fit_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut traj = Trajectory::starting_at(vec![0.0, 0.0]);
        traj.states.clear();
        for _ in 0..30 {
            traj.states
                .push(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            traj.controls.push(vec![rng.random_range(-1.0..1.0)]);
            traj.stage_costs.push(0.0);
        }
        traj.states.push(vec![0.0, 0.0]);
        let fit = fit_linear(&traj, vec![-1.0], vec![1.0], true).unwrap();
        // Normal equations oracle.
        let phi = DMatrix::from_fn(30, 3, |i, j| if j < 2 { traj.states[i][j] } else { 1.0 });
        let y = DVector::from_fn(30, |i, _| traj.controls[i][0]);
        let theta = (phi.transpose() * &phi).lu().solve(&(phi.transpose() * y)).unwrap();
        assert!((fit.gain[0][0] - theta[0]).abs() < 1e-9);
        assert!((fit.gain[0][1] - theta[1]).abs() < 1e-9);
        assert!((fit.offset[0] - theta[2]).abs() < 1e-9);
        // No random perturbation lowers the residual.
        let resid = |k: &[f64], k0: f64| -> f64 {
            (0..30)
                .map(|i| (k[0] * traj.states[i][0] + k[1] * traj.states[i][1] + k0 - traj.controls[i][0]).powi(2))
                .sum()
        };
        let base = resid(&fit.gain[0], fit.offset[0]);
        for _ in 0..200 {
            let d: Vec<f64> = (0..3).map(|_| rng.random_range(-1e-3..1e-3)).collect();
            let k = [fit.gain[0][0] + d[0], fit.gain[0][1] + d[1]];
            assert!(resid(&k, fit.offset[0] + d[2]) >= base - 1e-12);
        }
    }

    #[test]
    fn clipping() {
        let k = LinearFeedback::new(vec![vec![-0.04, -0.1]], vec![0.0], vec![-0.5], vec![0.5]);
        assert_eq!(k.control(&[0.0, -20.0]), vec![0.5]);
        assert_eq!(k.control(&[0.0, 20.0]), vec![-0.5]);
        assert_eq!(k.raw(&[0.0, -20.0]), vec![2.0]);
    }

    #[test]
    fn close_loop_matches_pointwise() {
        let sys = double_integrator();
        let k = LinearFeedback::new(vec![vec![-0.04, -0.1]], vec![0.2], vec![-5.0], vec![5.0]);
        let cl = sys.close_loop(&k.polynomials()).unwrap();
        let x = [1.5, -0.7];
        let direct = sys.step(&x, &k.raw(&x));
        for i in 0..2 {
            assert!((cl[i].eval(&x).unwrap() - direct[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn csv_round_trip() {
        let sys = double_integrator();
        let k = LinearFeedback::new(vec![vec![-0.04, -0.1]], vec![0.0], vec![-0.5], vec![0.5]);
        let traj = simulate(
            &sys,
            &k,
            &[4.0, -6.0],
            &ball(2, 0.25),
            &ball(2, 64.0),
            &StageCost::default(),
            10_000,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, 3, &traj).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,t,x_1,x_2,u_1,stage_cost\n"));
        let (iter, back) = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(iter, 3);
        assert_eq!(back, traj);
    }

    proptest! {
        #[test]
        fn cost_is_nonnegative(p in -5.0..5.0f64, v in -5.0..5.0f64) {
            let sys = double_integrator();
            let k = LinearFeedback::new(vec![vec![-0.04, -0.1]], vec![0.0], vec![-0.5], vec![0.5]);
            if let Ok(t) = simulate(&sys, &k, &[p, v], &ball(2, 0.25), &ball(2, 64.0), &StageCost::default(), 2000) {
                prop_assert!(trajectory_cost(&t) >= 0.0);
                prop_assert_eq!(trajectory_cost(&t) == 0.0, p * p + v * v == 0.0);
                prop_assert!(t.resimulation_error(&sys) == 0.0);
            }
        }
    }
}
