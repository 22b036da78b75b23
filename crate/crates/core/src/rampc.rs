//! The outer learning loop: fit a controller to the last trajectory, certify
//! it, fit a terminal-cost surrogate, run an MPC episode, repeat.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{
    fit_linear, simulate, trajectory_cost, write_trajectory_csv, ClosedLoopError, LinearFeedback, Trajectory,
};
use crate::config::{ConfigError, ExampleConfig, InitialPolicy};
use crate::gbf::{synthesize, GbfError, GuidanceBarrier, ReachAvoidSet, ReachAvoidSets, SynthesisOptions, Synthesized};
use crate::mpc::{run_episode, Episode, EpisodeContext, EpisodeError, StepRecord};
use crate::nlp::{NlpError, NlpModel, NlpSettings};
use crate::poly::Polynomial;
use crate::scenario::{collect_dataset, fit, required_samples, CostSurrogate, ScenarioError, DEFAULT_COEFF_BOUND};
use crate::sos::Certificate;

/// Largest tolerated share of sampled states whose rollout misses the target.
pub const MAX_EXCLUSION_FRACTION: f64 = 0.01;

/// Step cap for simulating the initial controller.
pub const INITIAL_ROLLOUT_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum RampcError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initial policy does not reach the target: {0}")]
    InitialPolicy(String),
    #[error(transparent)]
    ClosedLoop(#[from] ClosedLoopError),
    #[error(transparent)]
    Synthesis(#[from] GbfError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{excluded} of {total} sampled rollouts missed the target")]
    Exclusions { excluded: usize, total: usize },
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A certificate together with what is needed to re-check it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub certificate: Certificate,
    pub controller: LinearFeedback,
    pub deg_v: u32,
}

impl CertificateFile {
    pub fn reach_avoid(&self, safe: &Polynomial) -> ReachAvoidSet {
        ReachAvoidSet {
            barrier: GuidanceBarrier::from_certificate(&self.certificate),
            safe: safe.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// One row of `iterations.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub j: usize,
    pub cost: f64,
    pub episode_len: usize,
    pub delta_star: Option<f64>,
    pub certificate_path: Option<String>,
    pub t_interp_s: f64,
    pub t_gbf_s: f64,
    pub t_surrogate_s: f64,
    pub t_mpc_s: f64,
}

/// Diagnostics of an iteration beyond its report row.
#[derive(Debug, Clone)]
pub struct IterationDetail {
    pub controller: LinearFeedback,
    /// Weight of the fitted law in `controller`; below 1 when the fit itself
    /// could not be certified and was blended with the previous law.
    pub blend: f64,
    pub certificate: CertificateFile,
    pub reach_avoid: ReachAvoidSet,
    pub v_x0: f64,
    /// Residual of the barrier program at the accepted point.
    pub sdp_kkt: f64,
    pub surrogate: CostSurrogate,
    pub excluded: usize,
    /// Whether the barrier is positive along the previous trajectory.
    pub assumption2: bool,
    pub assumption2_worst: f64,
    pub episode: Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub j: usize,
    pub phase: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationLimit,
    Failed,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<IterationReport>,
    /// Trajectory `j` is the closed loop of iteration `j`.
    pub trajectories: Vec<Trajectory>,
    /// Detail for iterations `1..`.
    pub details: Vec<IterationDetail>,
    pub failure: Option<FailureRecord>,
    pub termination: Termination,
}

impl RunOutcome {
    pub fn costs(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.cost).collect()
    }

    pub fn final_cost(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.cost)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Also write per-step MPC records as `steps_j.json`.
    pub step_log: bool,
    /// Multistart count override for the MPC solver.
    pub restarts: Option<usize>,
}

/// Closed loop of the configured initial policy.
pub fn initial_trajectory(cfg: &ExampleConfig) -> Result<Trajectory, RampcError> {
    match &cfg.initial {
        InitialPolicy::Controller { .. } => {
            let k = cfg.initial_controller().expect("controller policy");
            simulate(
                &cfg.system(),
                &k,
                &cfg.x0,
                &cfg.target,
                &cfg.safe,
                &cfg.cost,
                INITIAL_ROLLOUT_CAP,
            )
            .map_err(|e| RampcError::InitialPolicy(format!("{:?} after {} steps", e.cause, e.step)))
        }
        InitialPolicy::Trajectory { trajectory } => {
            let sys = cfg.system();
            if trajectory.states[0] != cfg.x0 {
                return Err(RampcError::InitialPolicy("trajectory does not start at x0".into()));
            }
            if trajectory.resimulation_error(&sys) > 1e-9 {
                return Err(RampcError::InitialPolicy(
                    "trajectory is inconsistent with the dynamics".into(),
                ));
            }
            if cfg.target.eval_unchecked(trajectory.last_state()) > 0.0 {
                return Err(RampcError::InitialPolicy(
                    "trajectory does not end in the target".into(),
                ));
            }
            let mut t = trajectory.clone();
            t.stage_costs = t
                .states
                .iter()
                .zip(&t.controls)
                .map(|(x, u)| cfg.cost.eval(x, u))
                .collect();
            t.terminal_cost = cfg.cost.terminal(t.last_state());
            Ok(t)
        }
    }
}

/// Smallest value of `v` along the states before the final one.
pub fn check_assumption2(barrier: &GuidanceBarrier, traj: &Trajectory) -> (bool, f64) {
    let worst = traj.states[..traj.len()]
        .iter()
        .map(|x| barrier.value(x))
        .fold(f64::INFINITY, f64::min);
    (worst > 0.0, worst)
}

/// Surrogate sample count for a configuration.
pub fn surrogate_samples(cfg: &ExampleConfig) -> usize {
    cfg.samples_override
        .unwrap_or_else(|| required_samples(cfg.epsilon, cfg.beta, cfg.template.len()))
}

/// Weights of the fitted law tried in turn; 0 reuses the previous law and
/// its certificate.
pub const BLEND_WEIGHTS: [f64; 4] = [1.0, 0.5, 0.25, 0.0];

/// Highest barrier degree tried for blended controllers.
pub const FALLBACK_MAX_DEGREE: u32 = 4;

/// A certificate accepted for the current iteration.
struct Accepted {
    certificate: Certificate,
    reach_avoid: ReachAvoidSet,
    deg_v: u32,
    kkt: f64,
}

impl From<Synthesized> for Accepted {
    fn from(s: Synthesized) -> Self {
        Accepted {
            certificate: s.certificate,
            reach_avoid: s.reach_avoid,
            deg_v: s.deg_v,
            kkt: s.kkt_residual,
        }
    }
}

/// `(1 − w)·prev + w·fitted`, gains and offsets alike.
pub fn blend_controllers(prev: &LinearFeedback, fitted: &LinearFeedback, w: f64) -> LinearFeedback {
    let mix = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, f)| (1.0 - w) * p + w * f)
            .collect::<Vec<f64>>()
    };
    LinearFeedback::new(
        prev.gain.iter().zip(&fitted.gain).map(|(p, f)| mix(p, f)).collect(),
        mix(&prev.offset, &fitted.offset),
        fitted.lower.clone(),
        fitted.upper.clone(),
    )
}

struct Iterate<'a> {
    cfg: &'a ExampleConfig,
    sets: &'a ReachAvoidSets,
    opts: &'a RunOptions,
}

impl Iterate<'_> {
    fn run(
        &self,
        j: usize,
        prev: &Trajectory,
        certified: Option<&IterationDetail>,
        report: &mut IterationReport,
    ) -> Result<IterationDetail, (String, RampcError)> {
        let cfg = self.cfg;
        let sys = cfg.system();
        let tag = |phase: &str| {
            let phase = phase.to_string();
            move |e: RampcError| (phase, e)
        };

        let clock = Instant::now();
        let fitted = match (j, cfg.initial_controller()) {
            (1, Some(k)) => k,
            _ => fit_linear(prev, cfg.input_lower.clone(), cfg.input_upper.clone(), false)
                .map_err(|e| tag("interp")(e.into()))?,
        };
        report.t_interp_s = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let synth_opts = SynthesisOptions {
            degrees: cfg.barrier_degrees.clone(),
            seed: cfg.seed.wrapping_add(j as u64),
            ..SynthesisOptions::default()
        };
        // A fitted law can be destabilising; fall back toward the last certified one.
        let weights: &[f64] = if certified.is_some() { &BLEND_WEIGHTS } else { &[1.0] };
        let mut accepted = None;
        let mut last = GbfError::InvalidInput("no candidate controller".into());
        let mut controller = fitted.clone();
        let mut blend = 1.0;
        for &w in weights {
            blend = w;
            let attempt = match certified {
                Some(d) if w == 0.0 => {
                    controller = d.controller.clone();
                    Ok(Accepted {
                        certificate: d.certificate.certificate.clone(),
                        reach_avoid: d.reach_avoid.clone(),
                        deg_v: d.certificate.deg_v,
                        kkt: d.sdp_kkt,
                    })
                }
                Some(d) => {
                    controller = blend_controllers(&d.controller, &fitted, w);
                    let mut opts = synth_opts.clone();
                    if w < 1.0 {
                        opts.degrees.retain(|&deg| deg <= FALLBACK_MAX_DEGREE);
                    }
                    synthesize(&sys, &controller, self.sets, cfg.lambda, cfg.bound, &cfg.x0, &opts).map(Accepted::from)
                }
                None => synthesize(
                    &sys,
                    &controller,
                    self.sets,
                    cfg.lambda,
                    cfg.bound,
                    &cfg.x0,
                    &synth_opts,
                )
                .map(Accepted::from),
            };
            match attempt {
                Ok(a) => {
                    accepted = Some(a);
                    break;
                }
                Err(e) => {
                    log::info!("iteration {j}: no certificate at blend weight {w}: {e}");
                    last = e;
                }
            }
        }
        let syn = accepted.ok_or_else(|| tag("gbf")(last.into()))?;
        report.t_gbf_s = clock.elapsed().as_secs_f64();
        let (assumption2, assumption2_worst) = check_assumption2(&syn.reach_avoid.barrier, prev);
        if !assumption2 {
            log::info!("iteration {j}: barrier not positive along the previous trajectory (min {assumption2_worst:e})");
        }

        let clock = Instant::now();
        let count = surrogate_samples(cfg);
        let data = collect_dataset(
            &syn.reach_avoid,
            &sys,
            &controller,
            self.sets,
            &cfg.cost,
            count,
            cfg.seed.wrapping_mul(31).wrapping_add(j as u64),
        )
        .map_err(|e| tag("surrogate")(e.into()))?;
        if data.exclusion_fraction() > MAX_EXCLUSION_FRACTION {
            let total = data.samples.len() + data.excluded;
            return Err(tag("surrogate")(RampcError::Exclusions {
                excluded: data.excluded,
                total,
            }));
        }
        let surrogate = fit(
            &data.samples,
            &cfg.template_monomials(),
            DEFAULT_COEFF_BOUND,
            cfg.epsilon,
            cfg.beta,
        )
        .map_err(|e| tag("surrogate")(e.into()))?;
        report.delta_star = Some(surrogate.delta_star);
        report.t_surrogate_s = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let model = NlpModel::new(
            sys.clone(),
            cfg.horizon,
            cfg.input_lower.clone(),
            cfg.input_upper.clone(),
            cfg.cost,
            cfg.safe.clone(),
            syn.reach_avoid.barrier.v.clone(),
            surrogate.polynomial(),
        )
        .map_err(|e| tag("mpc")(e.into()))?;
        let mut nlp = NlpSettings {
            seed: cfg.seed.wrapping_add(1000 * j as u64),
            ..NlpSettings::default()
        };
        if let Some(r) = self.opts.restarts {
            nlp.restarts = r;
        }
        let ctx = EpisodeContext {
            model: &model,
            barrier: &syn.reach_avoid.barrier,
            fallback: &controller,
            target: &cfg.target,
            cost: &cfg.cost,
            nlp,
        };
        let v_x0 = syn.reach_avoid.barrier.value(&cfg.x0);
        let limit = syn
            .reach_avoid
            .barrier
            .hitting_time_bound(&cfg.x0)
            .map_err(|e| tag("mpc")(e.into()))? as usize;
        let episode = run_episode(&ctx, &cfg.x0, limit.max(1)).map_err(|e| tag("mpc")(e.into()))?;
        report.t_mpc_s = clock.elapsed().as_secs_f64();
        report.cost = trajectory_cost(&episode.trajectory);
        report.episode_len = episode.trajectory.len();

        Ok(IterationDetail {
            certificate: CertificateFile {
                certificate: syn.certificate.clone(),
                controller: controller.clone(),
                deg_v: syn.deg_v,
            },
            reach_avoid: syn.reach_avoid.clone(),
            controller,
            blend,
            v_x0,
            sdp_kkt: syn.kkt,
            surrogate,
            excluded: data.excluded,
            assumption2,
            assumption2_worst,
            episode,
        })
    }
}

/// Runs the loop until successive costs differ by at most `ξ` or the
/// iteration budget is spent. A failed iteration ends the run with the
/// reports gathered so far plus a failure record.
pub fn run(cfg: &ExampleConfig, opts: &RunOptions) -> Result<RunOutcome, RampcError> {
    cfg.validate()?;
    let sets = cfg.sets().map_err(RampcError::Synthesis)?;
    let writer = opts.out_dir.as_deref().map(OutputWriter::create).transpose()?;

    let traj0 = initial_trajectory(cfg)?;
    let report0 = IterationReport {
        j: 0,
        cost: trajectory_cost(&traj0),
        episode_len: traj0.len(),
        delta_star: None,
        certificate_path: None,
        t_interp_s: 0.0,
        t_gbf_s: 0.0,
        t_surrogate_s: 0.0,
        t_mpc_s: 0.0,
    };
    let mut out = RunOutcome {
        reports: vec![report0],
        trajectories: vec![traj0],
        details: Vec::new(),
        failure: None,
        termination: Termination::IterationLimit,
    };
    if let Some(w) = &writer {
        w.trajectory(0, &out.trajectories[0])?;
        w.iterations(&out.reports)?;
    }

    let it = Iterate { cfg, sets: &sets, opts };
    for j in 1..=cfg.max_iters {
        let mut report = IterationReport {
            j,
            cost: f64::NAN,
            episode_len: 0,
            delta_star: None,
            certificate_path: Some(format!("cert_{j}.json")),
            t_interp_s: 0.0,
            t_gbf_s: 0.0,
            t_surrogate_s: 0.0,
            t_mpc_s: 0.0,
        };
        let prev = out.trajectories.last().expect("initial trajectory");
        let certified = out.details.last();
        match it.run(j, prev, certified, &mut report) {
            Ok(detail) => {
                log::info!("iteration {j}: cost {:.6}, length {}", report.cost, report.episode_len);
                if let Some(w) = &writer {
                    w.iteration(j, &detail, opts.step_log)?;
                }
                out.trajectories.push(detail.episode.trajectory.clone());
                out.details.push(detail);
                let prev_cost = out.reports.last().expect("nonempty").cost;
                let done = (report.cost - prev_cost).abs() <= cfg.xi;
                out.reports.push(report);
                if let Some(w) = &writer {
                    w.iterations(&out.reports)?;
                }
                if done {
                    out.termination = Termination::Converged;
                    break;
                }
            }
            Err((phase, e)) => {
                log::error!("iteration {j} failed in {phase}: {e}");
                if let (Some(w), RampcError::Episode(ep)) = (&writer, &e) {
                    if let Some(partial) = ep.partial() {
                        w.trajectory(j, partial)?;
                    }
                }
                out.failure = Some(FailureRecord {
                    j,
                    phase,
                    message: e.to_string(),
                });
                out.termination = Termination::Failed;
                break;
            }
        }
    }
    if let Some(w) = &writer {
        w.summary(&out)?;
    }
    Ok(out)
}

/// Writes run artifacts into a directory.
pub struct OutputWriter {
    dir: PathBuf,
}

impl OutputWriter {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(OutputWriter { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn trajectory(&self, j: usize, traj: &Trajectory) -> Result<(), RampcError> {
        let f = BufWriter::new(fs::File::create(self.dir.join(format!("trajectory_{j}.csv")))?);
        write_trajectory_csv(f, j, traj)?;
        Ok(())
    }

    pub fn iterations(&self, reports: &[IterationReport]) -> Result<(), RampcError> {
        let f = BufWriter::new(fs::File::create(self.dir.join("iterations.csv"))?);
        write_iterations_csv(f, reports)?;
        Ok(())
    }

    fn iteration(&self, j: usize, detail: &IterationDetail, step_log: bool) -> Result<(), RampcError> {
        self.trajectory(j, &detail.episode.trajectory)?;
        fs::write(self.dir.join(format!("cert_{j}.json")), detail.certificate.to_json())?;
        fs::write(self.dir.join(format!("surrogate_{j}.json")), detail.surrogate.to_json())?;
        if step_log {
            let steps: &[StepRecord] = &detail.episode.steps;
            fs::write(
                self.dir.join(format!("steps_{j}.json")),
                serde_json::to_string_pretty(steps).expect("steps serialize"),
            )?;
        }
        Ok(())
    }

    fn summary(&self, out: &RunOutcome) -> Result<(), RampcError> {
        if let Some(f) = &out.failure {
            fs::write(
                self.dir.join("failure.json"),
                serde_json::to_string_pretty(f).expect("failure serializes"),
            )?;
        }
        Ok(())
    }
}

pub const ITERATIONS_HEADER: &str = "j,cost,episode_len,delta_star,t_interp_s,t_gbf_s,t_surrogate_s,t_mpc_s";

pub fn write_iterations_csv<W: Write>(mut w: W, reports: &[IterationReport]) -> std::io::Result<()> {
    writeln!(w, "{ITERATIONS_HEADER}")?;
    for r in reports {
        let delta = r.delta_star.map(|d| format!("{d:e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.j, r.cost, r.episode_len, delta, r.t_interp_s, r.t_gbf_s, r.t_surrogate_s, r.t_mpc_s
        )?;
    }
    w.flush()
}

pub fn read_iterations_csv<R: BufRead>(r: R) -> Result<Vec<IterationReport>, ClosedLoopError> {
    let bad = |m: String| ClosedLoopError::Csv(m);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("missing header".into()))??;
    if header.trim() != ITERATIONS_HEADER {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(bad(format!("row {row}: expected 8 cells")));
        }
        let num = |i: usize| cells[i].parse::<f64>().map_err(|e| bad(format!("row {row}: {e}")));
        let int = |i: usize| cells[i].parse::<usize>().map_err(|e| bad(format!("row {row}: {e}")));
        let j = int(0)?;
        out.push(IterationReport {
            j,
            cost: num(1)?,
            episode_len: int(2)?,
            delta_star: if cells[3].is_empty() { None } else { Some(num(3)?) },
            certificate_path: (j > 0).then(|| format!("cert_{j}.json")),
            t_interp_s: num(4)?,
            t_gbf_s: num(5)?,
            t_surrogate_s: num(6)?,
            t_mpc_s: num(7)?,
        });
    }
    Ok(out)
}
