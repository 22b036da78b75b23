//! Receding-horizon episodes under a guidance-barrier terminal constraint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{Controller, StageCost, Trajectory};
use crate::gbf::GuidanceBarrier;
use crate::nlp::{solve, NlpError, NlpModel, NlpSettings, NlpSolution};
use crate::poly::Polynomial;

/// Relaxation applied once to the first bound when the warm start misses it
/// by float noise.
pub const INITIAL_RELAXATION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error("no feasible warm start at step {t} (violation {violation:e})")]
    Infeasible {
        t: usize,
        violation: f64,
        partial: Box<Trajectory>,
    },
    #[error("episode exceeded {limit} steps")]
    StepLimit { limit: usize, partial: Box<Trajectory> },
}

impl EpisodeError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            EpisodeError::Infeasible { partial, .. } | EpisodeError::StepLimit { partial, .. } => Some(partial),
            EpisodeError::Nlp(_) => None,
        }
    }
}

/// `λ^N v(x₀)` at the first step, `λ v(x*_N)` of the previous solve after.
pub fn terminal_bound(lambda: f64, t: usize, v_x0: f64, prev_terminal_v: f64, horizon: usize) -> f64 {
    if t == 0 {
        lambda.powi(horizon as i32) * v_x0
    } else {
        lambda * prev_terminal_v
    }
}

/// Drops the first control of a solution and appends the fallback
/// controller's action at the predicted terminal state.
pub fn warm_start_shift(prev: &NlpSolution, controller: &dyn Controller) -> Vec<Vec<f64>> {
    let mut controls = prev.controls[1..].to_vec();
    controls.push(controller.control(prev.states.last().expect("nonempty rollout")));
    controls
}

/// `N` controls obtained by running `controller` from `x`.
pub fn controller_rollout(model: &NlpModel, x: &[f64], controller: &dyn Controller) -> Vec<Vec<f64>> {
    let mut x = x.to_vec();
    let mut controls = Vec::with_capacity(model.horizon);
    for _ in 0..model.horizon {
        let u = controller.control(&x);
        x = model.system.step(&x, &u);
        controls.push(u);
    }
    controls
}

/// Where the warm start of a step came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmSource {
    Rollout,
    Shift,
}

/// One receding-horizon step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub bound: f64,
    /// Barrier value at the predicted terminal state.
    pub terminal_v: f64,
    pub objective: f64,
    pub warm_objective: f64,
    pub warm_source: WarmSource,
    /// Worst constraint violation of the shifted warm start (steps t ≥ 1).
    pub shift_violation: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub steps: Vec<StepRecord>,
    /// Step at which the predicted prefix reached the target.
    pub early_stop: Option<usize>,
    /// Whether the first bound needed relaxing.
    pub relaxed: bool,
}

impl Episode {
    /// Worst violation over all shifted warm starts.
    pub fn max_shift_violation(&self) -> f64 {
        self.steps.iter().filter_map(|s| s.shift_violation).fold(0.0, f64::max)
    }
}

/// Everything a step needs besides the state.
pub struct EpisodeContext<'a> {
    /// Terminal value is the barrier polynomial, terminal cost the surrogate.
    pub model: &'a NlpModel,
    pub barrier: &'a GuidanceBarrier,
    /// Controller certified by the barrier, used for warm starts.
    pub fallback: &'a dyn Controller,
    pub target: &'a Polynomial,
    pub cost: &'a StageCost,
    pub nlp: NlpSettings,
}

impl EpisodeContext<'_> {
    fn violation(&self, x: &[f64], controls: &[Vec<f64>], bound: f64) -> f64 {
        self.model.evaluate(x, controls, bound).1.max_violation()
    }

    fn in_target(&self, x: &[f64]) -> bool {
        self.target.eval_unchecked(x) <= 0.0
    }
}

/// Runs one episode from `x0` until the target is reached.
pub fn run_episode(ctx: &EpisodeContext, x0: &[f64], max_steps: usize) -> Result<Episode, EpisodeError> {
    let feas_tol = ctx.nlp.feas_tol;
    let horizon = ctx.model.horizon;
    let mut traj = Trajectory::starting_at(x0.to_vec());
    let mut steps = Vec::new();
    let mut relaxed = false;
    if ctx.in_target(x0) {
        traj.terminal_cost = ctx.cost.terminal(x0);
        return Ok(Episode {
            trajectory: traj,
            steps,
            early_stop: None,
            relaxed,
        });
    }

    let mut x = x0.to_vec();
    let mut bound = terminal_bound(ctx.barrier.lambda, 0, ctx.barrier.value(x0), 0.0, horizon);
    let mut warm = controller_rollout(ctx.model, x0, ctx.fallback);
    let mut source = WarmSource::Rollout;
    let mut shift_violation = None;
    if ctx.violation(&x, &warm, bound) > feas_tol {
        let relaxed_bound = bound * (1.0 - INITIAL_RELAXATION);
        let v = ctx.violation(&x, &warm, relaxed_bound);
        log::warn!("initial warm start misses the terminal bound; relaxing by {INITIAL_RELAXATION:e}");
        if v > feas_tol {
            return Err(EpisodeError::Infeasible {
                t: 0,
                violation: v,
                partial: Box::new(traj),
            });
        }
        bound = relaxed_bound;
        relaxed = true;
    }

    for t in 0..max_steps {
        let warm_objective = ctx.model.evaluate(&x, &warm, bound).0;
        let settings = NlpSettings {
            seed: ctx.nlp.seed.wrapping_add(t as u64),
            ..ctx.nlp
        };
        let sol = solve(ctx.model, &x, bound, &warm, &settings)?;
        if sol.max_violation > feas_tol {
            return Err(EpisodeError::Infeasible {
                t,
                violation: sol.max_violation,
                partial: Box::new(traj),
            });
        }
        let terminal_v = ctx.barrier.value(&sol.states[horizon]);
        steps.push(StepRecord {
            t,
            x: x.clone(),
            u: sol.controls[0].clone(),
            bound,
            terminal_v,
            objective: sol.objective,
            warm_objective,
            warm_source: source,
            shift_violation,
            converged: sol.converged,
        });

        if let Some(l) = (1..=horizon).find(|&l| ctx.in_target(&sol.states[l])) {
            for k in 0..l {
                let (xk, uk) = (&sol.states[k], &sol.controls[k]);
                traj.push(uk.clone(), ctx.cost.eval(xk, uk), sol.states[k + 1].clone());
            }
            traj.terminal_cost = ctx.cost.terminal(traj.last_state());
            return Ok(Episode {
                trajectory: traj,
                steps,
                early_stop: Some(t),
                relaxed,
            });
        }

        let u = sol.controls[0].clone();
        traj.push(u.clone(), ctx.cost.eval(&x, &u), sol.states[1].clone());
        x = sol.states[1].clone();
        bound = terminal_bound(ctx.barrier.lambda, t + 1, 0.0, terminal_v, horizon);

        let shifted = warm_start_shift(&sol, ctx.fallback);
        let sv = ctx.violation(&x, &shifted, bound);
        shift_violation = Some(sv);
        if sv <= feas_tol {
            warm = shifted;
            source = WarmSource::Shift;
        } else {
            log::warn!("shifted warm start violates constraints by {sv:e} at step {}", t + 1);
            let rollout = controller_rollout(ctx.model, &x, ctx.fallback);
            let rv = ctx.violation(&x, &rollout, bound);
            if rv > feas_tol {
                return Err(EpisodeError::Infeasible {
                    t: t + 1,
                    violation: sv.min(rv),
                    partial: Box::new(traj),
                });
            }
            warm = rollout;
            source = WarmSource::Rollout;
        }
    }
    Err(EpisodeError::StepLimit {
        limit: max_steps,
        partial: Box::new(traj),
    })
}
