//! Guidance-barrier synthesis, reach-avoid sets, and sampled certificate checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{simulate, ClosedLoopError, Controller, DiscreteSystem, LinearFeedback, StageCost};
use crate::poly::{PolyError, Polynomial};
use crate::solvers::{SdpError, SdpSettings};
use crate::sos::{extract_certificate, solve_gbf, Certificate, GbfSynthesisSpec, LoopPiece, SosError};

#[derive(Debug, Error)]
pub enum GbfError {
    #[error("no certificate found at degrees {tried:?}: {last}")]
    InfeasibleAtAllDegrees { tried: Vec<u32>, last: String },
    #[error("solver breakdown: {0}")]
    SolverBreakdown(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("polynomial error: {0}")]
    Poly(#[from] PolyError),
    #[error(transparent)]
    ClosedLoop(#[from] ClosedLoopError),
}

/// `v` with growth factor `λ` and target bound `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBarrier {
    pub v: Polynomial,
    pub lambda: f64,
    #[serde(rename = "M")]
    pub bound: f64,
}

impl GuidanceBarrier {
    pub fn from_certificate(cert: &Certificate) -> Self {
        GuidanceBarrier {
            v: cert.v.clone(),
            lambda: cert.lambda,
            bound: cert.bound,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.v.eval_unchecked(x)
    }

    /// `(v/M, 1)`, the same certificate with unit bound.
    pub fn normalized(&self) -> GuidanceBarrier {
        GuidanceBarrier {
            v: self.v.scale(1.0 / self.bound),
            lambda: self.lambda,
            bound: 1.0,
        }
    }

    /// Upper bound on the number of steps to reach the target from `x`.
    pub fn hitting_time_bound(&self, x: &[f64]) -> Result<u64, GbfError> {
        hitting_time_bound(self.lambda, self.bound, self.value(x))
    }
}

/// `⌈log_λ(M / v)⌉`, clamped at zero.
pub fn hitting_time_bound(lambda: f64, bound: f64, v: f64) -> Result<u64, GbfError> {
    if !(v > 0.0) {
        return Err(GbfError::Domain(format!("barrier value {v:e} is not positive")));
    }
    let steps = ((bound / v).ln() / lambda.ln()).ceil();
    // Guard against ln rounding producing 1 for v = M.
    Ok(if v >= bound { 0 } else { steps.max(0.0) as u64 })
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundingBox {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Largest Euclidean norm over the box.
    pub fn radius(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| rng.random_range(l..=u))
            .collect()
    }

    /// Exact box of a sublevel set `{q ≤ 0}` for a quadratic `q` with
    /// positive-definite Hessian.
    pub fn of_quadratic(q: &Polynomial) -> Result<BoundingBox, GbfError> {
        let n = q.nvars();
        if q.degree() != 2 {
            return Err(GbfError::InvalidInput("bounding box needs a quadratic".into()));
        }
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        let mut c = 0.0;
        for (m, coef) in q.terms() {
            let nz: Vec<usize> = (0..n).filter(|&i| m.exponents()[i] > 0).collect();
            match (m.degree(), nz.as_slice()) {
                (0, _) => c += coef,
                (1, [i]) => b[*i] += coef,
                (2, [i]) => a[(*i, *i)] += coef,
                (2, [i, j]) => {
                    a[(*i, *j)] += coef / 2.0;
                    a[(*j, *i)] += coef / 2.0;
                }
                _ => unreachable!("degree checked"),
            }
        }
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| GbfError::InvalidInput("quadratic is not positive definite".into()))?;
        let ainv = chol.inverse();
        let centre = -(&ainv * &b) / 2.0;
        let r = centre.dot(&(&a * &centre)) - c;
        if !(r > 0.0) {
            return Err(GbfError::InvalidInput("sublevel set is empty".into()));
        }
        let lower = (0..n).map(|i| centre[i] - (r * ainv[(i, i)]).sqrt()).collect();
        let upper = (0..n).map(|i| centre[i] + (r * ainv[(i, i)]).sqrt()).collect();
        Ok(BoundingBox { lower, upper })
    }
}

/// Safe set `X = {w ≤ 0}`, target `T = {g ≤ 0}`, enclosing set `Y = {w0 ≤ 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachAvoidSets {
    pub safe: Polynomial,
    pub target: Polynomial,
    pub outer: Polynomial,
    pub outer_box: BoundingBox,
    pub safe_box: BoundingBox,
}

impl ReachAvoidSets {
    pub fn new(safe: Polynomial, target: Polynomial, outer: Polynomial) -> Result<Self, GbfError> {
        let outer_box = BoundingBox::of_quadratic(&outer)?;
        let safe_box = BoundingBox::of_quadratic(&safe)?;
        Ok(ReachAvoidSets {
            safe,
            target,
            outer,
            outer_box,
            safe_box,
        })
    }

    pub fn dim(&self) -> usize {
        self.safe.nvars()
    }

    pub fn in_safe(&self, x: &[f64]) -> bool {
        self.safe.eval_unchecked(x) <= 0.0
    }

    pub fn in_target(&self, x: &[f64]) -> bool {
        self.target.eval_unchecked(x) <= 0.0
    }

    pub fn in_outer(&self, x: &[f64]) -> bool {
        self.outer.eval_unchecked(x) <= 0.0
    }
}

/// `{x | v(x) > 0, w(x) ≤ 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachAvoidSet {
    pub barrier: GuidanceBarrier,
    pub safe: Polynomial,
}

impl ReachAvoidSet {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.barrier.value(x) > 0.0 && self.safe.eval_unchecked(x) <= 0.0
    }
}

/// Closed-loop pieces of the clipped law `clip(Kx + k0)` over a box: in each
/// channel the input is the lower bound, the affine value or the upper
/// bound, on the region where that branch is active. Branches that cannot
/// occur on the box are skipped.
pub fn saturation_pieces(
    system: &DiscreteSystem,
    controller: &LinearFeedback,
    bbox: &BoundingBox,
) -> Result<Vec<LoopPiece>, GbfError> {
    let n = system.state_dim();
    let raw = controller.polynomials();
    let cst = |c: f64| Polynomial::constant(n, c);
    // Per channel: (input polynomial, region constraints ≤ 0).
    let mut branches: Vec<Vec<(Polynomial, Vec<Polynomial>)>> = Vec::new();
    for (i, r) in raw.iter().enumerate() {
        let (lo, hi) = (controller.lower[i], controller.upper[i]);
        let (mut min, mut max) = (controller.offset[i], controller.offset[i]);
        for j in 0..n {
            let a = controller.gain[i][j];
            min += (a * bbox.lower[j]).min(a * bbox.upper[j]);
            max += (a * bbox.lower[j]).max(a * bbox.upper[j]);
        }
        let mut opts = Vec::new();
        if min < lo {
            opts.push((cst(lo), vec![r - &cst(lo)]));
        }
        if max >= lo && min <= hi {
            let mut region = Vec::new();
            if min < lo {
                region.push(&cst(lo) - r);
            }
            if max > hi {
                region.push(r - &cst(hi));
            }
            opts.push((r.clone(), region));
        }
        if max > hi {
            opts.push((cst(hi), vec![&cst(hi) - r]));
        }
        branches.push(opts);
    }
    let mut pieces = vec![(Vec::new(), Vec::new())];
    for opts in &branches {
        let mut next = Vec::with_capacity(pieces.len() * opts.len());
        for (inputs, region) in &pieces {
            for (u, r) in opts {
                let mut inputs: Vec<Polynomial> = Clone::clone(inputs);
                inputs.push(u.clone());
                let mut region: Vec<Polynomial> = Clone::clone(region);
                region.extend(r.iter().cloned());
                next.push((inputs, region));
            }
        }
        pieces = next;
    }
    pieces
        .into_iter()
        .map(|(inputs, region)| {
            Ok(LoopPiece {
                map: system.close_loop(&inputs)?,
                region,
            })
        })
        .collect()
}

/// Rejection-sampling cap per requested point.
pub const MAX_REJECTION_ATTEMPTS: usize = 1_000_000;

/// Draws up to `count` points uniformly from `{x ∈ bbox | accept(x)}`.
/// Stops early when the cumulative attempt budget is spent.
pub fn sample_uniform<R: Rng>(
    bbox: &BoundingBox,
    count: usize,
    rng: &mut R,
    accept: impl Fn(&[f64]) -> bool,
) -> Vec<Vec<f64>> {
    let budget = MAX_REJECTION_ATTEMPTS.max(count.saturating_mul(1000));
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < budget {
        attempts += 1;
        let x = bbox.sample(rng);
        if accept(&x) {
            out.push(x);
        }
    }
    out
}

/// Tuning of [`synthesize`].
#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    /// Barrier degrees tried in order.
    pub degrees: Vec<u32>,
    pub eps_pos: f64,
    pub sdp: SdpSettings,
    /// Samples per region in the post-synthesis check.
    pub check_samples: usize,
    pub seed: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            degrees: vec![2, 4, 6],
            eps_pos: 1e-4,
            sdp: SdpSettings::default(),
            check_samples: 2000,
            seed: 0,
        }
    }
}

/// Output of a successful synthesis.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub certificate: Certificate,
    pub reach_avoid: ReachAvoidSet,
    pub pieces: Vec<LoopPiece>,
    pub deg_v: u32,
    pub v_max: f64,
    pub sdp_iterations: usize,
    pub kkt_residual: f64,
}

impl Synthesized {
    pub fn barrier(&self) -> &GuidanceBarrier {
        &self.reach_avoid.barrier
    }
}

/// Searches for a guidance-barrier certificate for the closed loop under the
/// clipped affine law, raising the barrier degree until one is found.
pub fn synthesize(
    system: &DiscreteSystem,
    controller: &LinearFeedback,
    sets: &ReachAvoidSets,
    lambda: f64,
    bound: f64,
    x0: &[f64],
    opts: &SynthesisOptions,
) -> Result<Synthesized, GbfError> {
    if x0.len() != system.state_dim() || controller.state_dim() != system.state_dim() {
        return Err(GbfError::InvalidInput("dimension mismatch".into()));
    }
    if !sets.in_safe(x0) || sets.in_target(x0) {
        return Err(GbfError::InvalidInput(
            "x0 must lie in the safe set outside the target".into(),
        ));
    }
    let pieces = saturation_pieces(system, controller, &sets.safe_box)?;
    let mut last = String::from("no degrees tried");
    let mut breakdowns = 0;
    for &deg in &opts.degrees {
        let spec = GbfSynthesisSpec {
            pieces: pieces.clone(),
            safe: sets.safe.clone(),
            target: sets.target.clone(),
            outer: sets.outer.clone(),
            lambda,
            bound,
            x0: x0.to_vec(),
            deg_v: deg,
            deg_s: None,
            eps_pos: opts.eps_pos,
            scale: sets.outer_box.radius(),
        };
        let attempt = solve_gbf(&spec, &opts.sdp)
            .and_then(|s| extract_certificate(&spec, &s.program, &s.solution).map(|c| (c, s)));
        let (certificate, solved) = match attempt {
            Ok(v) => v,
            Err(SosError::InvalidSpec(m)) if m.contains("lambda") || m.contains("target") => {
                return Err(GbfError::InvalidInput(m));
            }
            Err(e) => {
                if matches!(e, SosError::Solver(SdpError::NumericalBreakdown(_))) {
                    breakdowns += 1;
                }
                log::debug!("barrier degree {deg}: {e}");
                last = e.to_string();
                continue;
            }
        };
        let reach_avoid = ReachAvoidSet {
            barrier: GuidanceBarrier::from_certificate(&certificate),
            safe: sets.safe.clone(),
        };
        let report = verify_certificate(
            &reach_avoid,
            system,
            controller,
            sets,
            x0,
            opts.check_samples,
            opts.seed,
        );
        if !report.passes(VERIFY_TOLERANCE) {
            log::debug!("barrier degree {deg} failed the sampled check: {report:?}");
            last = format!("sampled check failed: {report:?}");
            continue;
        }
        return Ok(Synthesized {
            certificate,
            reach_avoid,
            pieces,
            deg_v: deg,
            v_max: solved.v_max,
            sdp_iterations: solved.solution.iterations,
            kkt_residual: solved.solution.kkt_residual,
        });
    }
    if breakdowns == opts.degrees.len() && breakdowns > 0 {
        return Err(GbfError::SolverBreakdown(last));
    }
    Err(GbfError::InfeasibleAtAllDegrees {
        tried: opts.degrees.clone(),
        last,
    })
}

/// Slack tolerated by the sampled check.
pub const VERIFY_TOLERANCE: f64 = 1e-6;

/// Worst slack per clause over uniform samples; nonnegative means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// `min v(f(x)) − λ v(x)` over the safe set minus the target.
    pub decrease: f64,
    /// `min −v(x)` over the enclosing set minus the safe set.
    pub outside_safe: f64,
    /// `min M − v(x)` over the target.
    pub target_bound: f64,
    /// `v(x0)`.
    pub v_x0: f64,
    /// Number of samples drawn for the three regions.
    pub samples: [usize; 3],
}

impl ViolationReport {
    pub fn worst(&self) -> f64 {
        self.decrease.min(self.outside_safe).min(self.target_bound)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() >= -tol && self.v_x0 > 0.0
    }
}

/// Falsification check of all certificate clauses on uniform samples.
pub fn verify_certificate(
    set: &ReachAvoidSet,
    system: &DiscreteSystem,
    controller: &dyn Controller,
    sets: &ReachAvoidSets,
    x0: &[f64],
    samples: usize,
    seed: u64,
) -> ViolationReport {
    let b = &set.barrier;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decrease_pts = sample_uniform(&sets.outer_box, samples, &mut rng, |x| {
        sets.in_safe(x) && !sets.in_target(x)
    });
    let outside_pts = sample_uniform(&sets.outer_box, samples, &mut rng, |x| {
        sets.in_outer(x) && !sets.in_safe(x)
    });
    let target_pts = sample_uniform(&sets.outer_box, samples, &mut rng, |x| sets.in_target(x));
    let min = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
    let decrease = min(&mut decrease_pts.iter().map(|x| {
        let fx = system.step(x, &controller.control(x));
        b.value(&fx) - b.lambda * b.value(x)
    }));
    let outside_safe = min(&mut outside_pts.iter().map(|x| -b.value(x)));
    let target_bound = min(&mut target_pts.iter().map(|x| b.bound - b.value(x)));
    let v_x0 = b.value(x0);
    ViolationReport {
        decrease,
        outside_safe,
        target_bound,
        v_x0,
        samples: [decrease_pts.len(), outside_pts.len(), target_pts.len()],
    }
}

/// Outcome of closed-loop rollouts from sampled members of a reach-avoid set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachCheck {
    pub rollouts: usize,
    pub reached: usize,
    pub bound_exceeded: usize,
    pub left_safe: usize,
}

impl ReachCheck {
    pub fn all_good(&self) -> bool {
        self.rollouts > 0 && self.reached == self.rollouts && self.bound_exceeded == 0 && self.left_safe == 0
    }
}

/// Simulates the clipped controller from `count` uniform points of the set
/// and counts target hits within the hitting-time bound.
pub fn check_reach(
    set: &ReachAvoidSet,
    system: &DiscreteSystem,
    controller: &LinearFeedback,
    sets: &ReachAvoidSets,
    count: usize,
    seed: u64,
) -> ReachCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = sample_uniform(&sets.safe_box, count, &mut rng, |x| set.contains(x));
    let cost = StageCost::default();
    let mut check = ReachCheck {
        rollouts: pts.len(),
        reached: 0,
        bound_exceeded: 0,
        left_safe: 0,
    };
    for x in &pts {
        let Ok(limit) = set.barrier.hitting_time_bound(x) else {
            continue;
        };
        let limit = limit.min(10_000_000) as usize;
        match simulate(system, controller, x, &sets.target, &sets.safe, &cost, limit) {
            Ok(_) => check.reached += 1,
            Err(e) => match e.cause {
                crate::closed_loop::NotReachedCause::Timeout => check.bound_exceeded += 1,
                crate::closed_loop::NotReachedCause::LeftSafeSet => check.left_safe += 1,
            },
        }
    }
    check
}
