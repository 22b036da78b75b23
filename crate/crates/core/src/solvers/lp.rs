//! Linear programs solved by a primal-dual interior-point method, then
//! purified to a vertex.
//!
//! ```text
//! minimize    cᵀx
//! subject to  A x ≤ b,  lower ≤ x ≤ upper
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    /// Rows of `A`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    /// Per-variable bounds; infinite entries are absent bounds.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest violation of any row or bound at `x`.
    pub max_violation: f64,
    /// Whether `x` is a basic solution (n independent active constraints).
    pub basic: bool,
}

impl LpProblem {
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            objective,
            a: Vec::new(),
            b: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>, rhs: f64) {
        self.a.push(row);
        self.b.push(rhs);
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        let bad = |m: String| Err(LpError::Malformed(m));
        if n == 0 {
            return bad("no variables".into());
        }
        if self.a.len() != self.b.len() {
            return bad(format!("{} rows but {} right-hand sides", self.a.len(), self.b.len()));
        }
        if let Some(i) = self
            .a
            .iter()
            .position(|r| r.len() != n || r.iter().any(|v| !v.is_finite()))
        {
            return bad(format!("row {i} has wrong length or non-finite entries"));
        }
        if self.b.iter().chain(&self.objective).any(|v| !v.is_finite()) {
            return bad("non-finite data".into());
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bounds need one entry per variable".into());
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| l > u || l.is_nan() || u.is_nan())
        {
            return bad("lower bound exceeds upper bound".into());
        }
        Ok(())
    }

    /// All constraints as rows `g_i x ≤ h_i`, bounds included.
    fn rows(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = self.num_vars();
        let mut g = self.a.clone();
        let mut h = self.b.clone();
        for j in 0..n {
            if self.upper[j].is_finite() {
                let mut r = vec![0.0; n];
                r[j] = 1.0;
                g.push(r);
                h.push(self.upper[j]);
            }
            if self.lower[j].is_finite() {
                let mut r = vec![0.0; n];
                r[j] = -1.0;
                g.push(r);
                h.push(-self.lower[j]);
            }
        }
        (g, h)
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let (g, h) = self.rows();
        g.iter().zip(&h).map(|(r, hi)| dot(r, x) - hi).fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the LP; the returned point is a vertex whenever one is optimal.
pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution, LpError> {
    problem.validate()?;
    let n = problem.num_vars();
    let (g, h) = problem.rows();
    if g.is_empty() {
        if problem.objective.iter().all(|c| *c == 0.0) {
            return Ok(LpSolution {
                x: vec![0.0; n],
                objective: 0.0,
                max_violation: 0.0,
                basic: false,
            });
        }
        return Err(LpError::Unbounded);
    }
    // Row scaling keeps the data near unit size.
    let scales: Vec<f64> = g
        .iter()
        .zip(&h)
        .map(|(r, hi)| r.iter().fold(hi.abs().min(1.0), |m, v| m.max(v.abs())).max(1e-300))
        .collect();
    let gs: Vec<Vec<f64>> = g
        .iter()
        .zip(&scales)
        .map(|(r, s)| r.iter().map(|v| v / s).collect())
        .collect();
    let hs: Vec<f64> = h.iter().zip(&scales).map(|(v, s)| v / s).collect();
    let cscale = problem.objective.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let cs: Vec<f64> = problem.objective.iter().map(|v| v / cscale).collect();
    let (x0, converged) = interior_point(&cs, &gs, &hs)?;
    let feas_tol = 1e-7;
    let scaled_violation = |x: &[f64]| {
        g.iter()
            .zip(&h)
            .zip(&scales)
            .map(|((r, hi), s)| (dot(r, x) - hi) / s)
            .fold(0.0, f64::max)
    };
    if !converged && scaled_violation(&x0) > feas_tol {
        return Err(LpError::Numerical("interior-point iteration did not converge".into()));
    }
    let x = purify(&problem.objective, &g, &h, &scales, x0)?;
    let basic = is_basic(&g, &h, &scales, &x);
    Ok(LpSolution {
        objective: problem.evaluate(&x),
        max_violation: problem.max_violation(&x),
        x,
        basic,
    })
}

/// Mehrotra predictor-corrector on `min cᵀx` s.t. `Gx + s = h`, `s ≥ 0`, with
/// dual `Gᵀz + c = 0`, `z ≥ 0`. Returns the final primal point and whether
/// the residuals met tolerance.
fn interior_point(c: &[f64], g: &[Vec<f64>], h: &[f64]) -> Result<(Vec<f64>, bool), LpError> {
    const TOL: f64 = 1e-11;
    const MAX_ITERS: usize = 200;
    let n = c.len();
    let m = g.len();
    let gm = DMatrix::from_fn(m, n, |i, j| g[i][j]);
    let hv = DVector::from_column_slice(h);
    let cv = DVector::from_column_slice(c);
    let hnorm = hv.amax().max(1.0);
    let cnorm = cv.amax().max(1.0);
    let mut x = DVector::zeros(n);
    let mut s = DVector::from_fn(m, |i, _| (h[i]).max(1.0));
    let mut z = DVector::from_element(m, 1.0);
    let step_to_boundary = |v: &DVector<f64>, dv: &DVector<f64>| {
        v.iter()
            .zip(dv.iter())
            .filter(|(_, d)| **d < 0.0)
            .map(|(a, d)| -a / d)
            .fold(f64::INFINITY, f64::min)
    };
    for _ in 0..MAX_ITERS {
        let rp = &gm * &x + &s - &hv;
        let rd = gm.transpose() * &z + &cv;
        let mu = s.dot(&z) / m as f64;
        let pobj = cv.dot(&x);
        let dobj = -hv.dot(&z);
        if rp.amax() <= TOL * hnorm && rd.amax() <= TOL * cnorm && (pobj - dobj).abs() <= TOL * (1.0 + pobj.abs()) {
            return Ok((x.iter().copied().collect(), true));
        }
        // Rays: z with Gᵀz ≈ 0, hᵀz < 0 certifies infeasibility; x with
        // Gx ≤ 0, cᵀx < 0 certifies unboundedness.
        let zn = z.amax();
        if zn > 1e5 && (gm.transpose() * &z).amax() / zn <= 1e-7 && hv.dot(&z) / zn < -1e-7 {
            return Err(LpError::Infeasible);
        }
        let xn = x.amax();
        if xn > 1e5 && pobj / xn < -1e-7 && (&gm * &x).max() / xn <= 1e-7 {
            return Err(LpError::Unbounded);
        }
        let w = DVector::from_fn(m, |i, _| z[i] / s[i]);
        let normal = gm.transpose() * DMatrix::from_diagonal(&w) * &gm;
        let scale = normal.diagonal().amax().max(1.0);
        let mut chol = None;
        for reg in [1e-14, 1e-10, 1e-6] {
            let mut reg_normal = normal.clone();
            for j in 0..n {
                reg_normal[(j, j)] += reg * scale;
            }
            chol = reg_normal.cholesky();
            if chol.is_some() {
                break;
            }
        }
        // Near the optimum the weights can spread past double precision;
        // the caller purifies whatever point was reached.
        let Some(chol) = chol else {
            return Ok((x.iter().copied().collect(), false));
        };
        // Direction for complementarity target `rc` (= s∘z − σμ − corrections).
        let solve = |rc: &DVector<f64>| {
            let zinv_rc = DVector::from_fn(m, |i, _| rc[i] / z[i]);
            let t = DVector::from_fn(m, |i, _| w[i] * (rp[i] - zinv_rc[i]));
            let rhs = -(&rd + gm.transpose() * &t);
            let dx = chol.solve(&rhs);
            let dz = DVector::from_fn(m, |i, _| w[i] * ((&gm * &dx)[i] + rp[i] - zinv_rc[i]));
            let ds = DVector::from_fn(m, |i, _| (-rc[i] - s[i] * dz[i]) / z[i]);
            (dx, ds, dz)
        };
        let rc_aff = s.component_mul(&z);
        let (_, ds_a, dz_a) = solve(&rc_aff);
        let ap = step_to_boundary(&s, &ds_a).min(1.0);
        let ad = step_to_boundary(&z, &dz_a).min(1.0);
        let mu_aff = (&s + &ds_a * ap).dot(&(&z + &dz_a * ad)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rc = &rc_aff + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
        let (dx, ds, dz) = solve(&rc);
        let ap = (0.99 * step_to_boundary(&s, &ds)).min(1.0);
        let ad = (0.99 * step_to_boundary(&z, &dz)).min(1.0);
        x += &dx * ap;
        s += &ds * ap;
        z += &dz * ad;
        if !(x.iter().chain(s.iter()).chain(z.iter()).all(|v| v.is_finite())) {
            return Err(LpError::Numerical("non-finite iterate".into()));
        }
    }
    Ok((x.iter().copied().collect(), false))
}

/// Row indices whose scaled slack is within `tol`.
fn active_set(g: &[Vec<f64>], h: &[f64], scales: &[f64], x: &[f64], tol: f64) -> Vec<usize> {
    (0..g.len())
        .filter(|&i| (h[i] - dot(&g[i], x)) / scales[i] <= tol)
        .collect()
}

fn matrix_of(g: &[Vec<f64>], scales: &[f64], rows: &[usize], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), n, |r, j| g[rows[r]][j] / scales[rows[r]])
}

/// Orthonormal basis of the null space of the active rows.
fn null_space(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Eigenvectors of AᵀA with zero eigenvalue span the null space.
    let ata = a.transpose() * a;
    let eig = ata.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cols: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k].abs() <= 1e-10 * top.max(1.0))
        .collect();
    DMatrix::from_fn(n, cols.len(), |i, k| eig.eigenvectors[(i, cols[k])])
}

fn is_basic(g: &[Vec<f64>], h: &[f64], scales: &[f64], x: &[f64]) -> bool {
    let n = x.len();
    let act = active_set(g, h, scales, x, 1e-9);
    null_space(&matrix_of(g, scales, &act, n), n).ncols() == 0
}

/// Moves from a feasible point to a vertex without increasing the objective.
fn purify(c: &[f64], g: &[Vec<f64>], h: &[f64], scales: &[f64], mut x: Vec<f64>) -> Result<Vec<f64>, LpError> {
    let n = x.len();
    let act_tol = 1e-8;
    let cv = DVector::from_column_slice(c);
    for _ in 0..=n {
        let act = active_set(g, h, scales, &x, act_tol);
        let ns = null_space(&matrix_of(g, scales, &act, n), n);
        if ns.ncols() == 0 {
            break;
        }
        let proj = &ns * (ns.transpose() * &cv);
        let dirs: Vec<DVector<f64>> = if proj.norm() > 1e-12 * cv.norm().max(1.0) {
            vec![-proj]
        } else {
            let d = ns.column(0).into_owned();
            vec![d.clone(), -d]
        };
        let mut moved = false;
        for d in dirs {
            let (mut step, mut block) = (f64::INFINITY, None);
            for i in 0..g.len() {
                if act.contains(&i) {
                    continue;
                }
                let rate = dot(&g[i], d.as_slice());
                if rate > 1e-14 * scales[i] {
                    let slack = (h[i] - dot(&g[i], &x)).max(0.0);
                    let t = slack / rate;
                    if t < step {
                        step = t;
                        block = Some(i);
                    }
                }
            }
            if block.is_some() {
                for j in 0..n {
                    x[j] += step * d[j];
                }
                moved = true;
                break;
            }
            if cv.dot(&d) < -1e-12 {
                return Err(LpError::Unbounded);
            }
        }
        if !moved {
            break;
        }
    }
    Ok(snap_to_vertex(g, h, scales, x))
}

/// Re-solves the active rows exactly when they pin down a unique point.
fn snap_to_vertex(g: &[Vec<f64>], h: &[f64], scales: &[f64], x: Vec<f64>) -> Vec<f64> {
    let n = x.len();
    let mut act = active_set(g, h, scales, &x, 1e-8);
    act.sort_by(|&a, &b| {
        let sa = (h[a] - dot(&g[a], &x)) / scales[a];
        let sb = (h[b] - dot(&g[b], &x)) / scales[b];
        sa.total_cmp(&sb).then(a.cmp(&b))
    });
    // Greedily collect n independent rows.
    let mut basis: Vec<usize> = Vec::new();
    for &i in &act {
        let mut trial = basis.clone();
        trial.push(i);
        let m = matrix_of(g, scales, &trial, n);
        if m.clone().svd(false, false).singular_values.iter().all(|s| *s > 1e-9) {
            basis = trial;
        }
        if basis.len() == n {
            break;
        }
    }
    if basis.len() < n {
        return x;
    }
    let a = matrix_of(g, scales, &basis, n);
    let rhs = DVector::from_fn(n, |r, _| h[basis[r]] / scales[basis[r]]);
    let Some(v) = a.lu().solve(&rhs) else {
        return x;
    };
    let candidate: Vec<f64> = v.iter().copied().collect();
    let worst = (0..g.len())
        .map(|i| (dot(&g[i], &candidate) - h[i]) / scales[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if worst <= 1e-9 {
        candidate
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::simplex::simplex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force optimum over all vertices of a bounded LP.
    pub(crate) fn vertex_enumeration(p: &LpProblem) -> Option<(Vec<f64>, f64)> {
        let (g, h) = p.rows();
        let n = p.num_vars();
        let m = g.len();
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let a = DMatrix::from_fn(n, n, |r, j| g[idx[r]][j]);
            let rhs = DVector::from_fn(n, |r, _| h[idx[r]]);
            if a.determinant().abs() > 1e-10 {
                if let Some(v) = a.lu().solve(&rhs) {
                    let x: Vec<f64> = v.iter().copied().collect();
                    if (0..m).all(|i| dot(&g[i], &x) <= h[i] + 1e-9) {
                        let obj = p.evaluate(&x);
                        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                            best = Some((x, obj));
                        }
                    }
                }
            }
            // Next n-combination of 0..m.
            let mut k = n;
            loop {
                if k == 0 {
                    return best;
                }
                k -= 1;
                if idx[k] < m - n + k {
                    idx[k] += 1;
                    for t in k + 1..n {
                        idx[t] = idx[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn random_bounded(rng: &mut ChaCha8Rng, n: usize, rows: usize) -> LpProblem {
        let mut p = LpProblem::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        for _ in 0..rows {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.push_row(r, rng.random_range(0.1..2.0));
        }
        p.lower = vec![-5.0; n];
        p.upper = vec![5.0; n];
        p
    }

    #[test]
    fn constant_midrange_fit() {
        // min δ s.t. |c − 1| ≤ δ, |c − 3| ≤ δ
        let mut p = LpProblem::new(vec![0.0, 1.0]);
        p.push_row(vec![1.0, -1.0], 1.0);
        p.push_row(vec![-1.0, -1.0], -1.0);
        p.push_row(vec![1.0, -1.0], 3.0);
        p.push_row(vec![-1.0, -1.0], -3.0);
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-9);
        assert!((s.x[1] - 1.0).abs() < 1e-9);
        assert!(s.basic);
    }

    #[test]
    fn coefficient_bound_active() {
        // Fit c to 10 with |c| ≤ 4.
        let mut p = LpProblem::new(vec![0.0, 1.0]);
        p.push_row(vec![1.0, -1.0], 10.0);
        p.push_row(vec![-1.0, -1.0], -10.0);
        p.lower = vec![-4.0, f64::NEG_INFINITY];
        p.upper = vec![4.0, f64::INFINITY];
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 4.0).abs() < 1e-9);
        assert!((s.objective - 6.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut p = LpProblem::new(vec![1.0]);
        p.push_row(vec![1.0], -1.0);
        p.push_row(vec![-1.0], -1.0);
        assert_eq!(solve_lp(&p), Err(LpError::Infeasible));
        let mut q = LpProblem::new(vec![-1.0]);
        q.push_row(vec![-1.0], 0.0);
        assert_eq!(solve_lp(&q), Err(LpError::Unbounded));
    }

    #[test]
    fn degenerate_face_returns_vertex() {
        // Every point on the edge x + y = 1 in the unit box is optimal.
        let mut p = LpProblem::new(vec![-1.0, -1.0]);
        p.push_row(vec![1.0, 1.0], 1.0);
        p.lower = vec![0.0, 0.0];
        p.upper = vec![1.0, 1.0];
        let s = solve_lp(&p).unwrap();
        assert!(s.basic);
        assert!((s.objective + 1.0).abs() < 1e-9);
        assert!(s.x.iter().all(|v| v.abs() < 1e-9 || (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn random_instances_match_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = random_bounded(&mut rng, 3, 8);
            let (_, best) = vertex_enumeration(&p).unwrap();
            let s = solve_lp(&p).unwrap();
            assert!(s.max_violation <= 1e-9, "violation {}", s.max_violation);
            assert!(
                (s.objective - best).abs() <= 1e-9 * (1.0 + best.abs()),
                "{} vs {}",
                s.objective,
                best
            );
            assert!(s.basic);
            let sx = simplex(&p).unwrap();
            assert!((sx.1 - best).abs() <= 1e-9 * (1.0 + best.abs()));
        }
    }
}
