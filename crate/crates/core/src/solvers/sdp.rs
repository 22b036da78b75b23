//! Dense primal-dual interior-point solver for small semidefinite programs.
//!
//! Standard form, with `x_f` free and every `X_b` symmetric PSD:
//!
//! ```text
//! minimize    c_f·x_f + Σ_b ⟨C_b, X_b⟩
//! subject to  A_f x_f + Σ_b 𝒜_b(X_b) = b
//! ```
//!
//! The iteration runs on the homogeneous self-dual embedding, so an
//! infeasible problem produces a dual improving ray instead of diverging.
//! Search directions use Nesterov-Todd scaling with a Mehrotra
//! predictor-corrector; each step factors the dense Schur complement
//! `M_kl = Σ_b ⟨A_bk, W_b A_bl W_b⟩` by Cholesky and eliminates the free
//! variables through a second, small Schur complement.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One entry of a symmetric coefficient matrix. `row <= col`; off-diagonal
/// entries stand for both `(row, col)` and `(col, row)`, so they contribute
/// `2 · value · X[row, col]` to the inner product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// A linear functional over the free variables and all block entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearFunctional {
    pub free: Vec<(usize, f64)>,
    pub blocks: Vec<BlockEntry>,
}

impl LinearFunctional {
    pub fn is_empty(&self) -> bool {
        self.free.is_empty() && self.blocks.is_empty()
    }

    pub fn eval(&self, free: &[f64], blocks: &[DMatrix<f64>]) -> f64 {
        let mut acc: f64 = self.free.iter().map(|&(i, a)| a * free[i]).sum();
        for e in &self.blocks {
            let x = blocks[e.block][(e.row, e.col)];
            acc += if e.row == e.col { e.value * x } else { 2.0 * e.value * x };
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpEquality {
    pub lhs: LinearFunctional,
    pub rhs: f64,
}

/// A semidefinite program in standard form (minimization).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub block_dims: Vec<usize>,
    pub free_vars: usize,
    pub equalities: Vec<SdpEquality>,
    pub objective: LinearFunctional,
}

impl SdpProblem {
    pub fn validate(&self) -> Result<(), SdpError> {
        if let Some(b) = self.block_dims.iter().position(|&d| d == 0) {
            return Err(SdpError::Malformed(format!("block {b} has dimension 0")));
        }
        let check = |f: &LinearFunctional, what: &str| -> Result<(), SdpError> {
            for &(i, a) in &f.free {
                if i >= self.free_vars || !a.is_finite() {
                    return Err(SdpError::Malformed(format!("{what}: bad free variable reference {i}")));
                }
            }
            for e in &f.blocks {
                let ok = e.block < self.block_dims.len()
                    && e.row <= e.col
                    && e.col < self.block_dims[e.block]
                    && e.value.is_finite();
                if !ok {
                    return Err(SdpError::Malformed(format!("{what}: bad block entry {e:?}")));
                }
            }
            Ok(())
        };
        for (k, eq) in self.equalities.iter().enumerate() {
            check(&eq.lhs, &format!("equality {k}"))?;
            if !eq.rhs.is_finite() {
                return Err(SdpError::Malformed(format!("equality {k}: non-finite right-hand side")));
            }
        }
        check(&self.objective, "objective")?;
        Ok(())
    }

    /// Sum of block dimensions (the barrier parameter of the cone).
    pub fn cone_degree(&self) -> usize {
        self.block_dims.iter().sum()
    }

    /// Writes the problem as pretty JSON for offline inspection.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    /// Optimal within tolerance.
    Feasible,
    /// Primal infeasible; `dual` holds the improving ray.
    Infeasible,
    /// Dual infeasible (primal unbounded); the primal fields hold the ray.
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub gram_blocks: Vec<DMatrix<f64>>,
    pub free_vars: Vec<f64>,
    pub dual: Vec<f64>,
    pub dual_blocks: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Infinity norm of the primal equality residual.
    pub primal_residual: f64,
    /// Infinity norm of the dual residual.
    pub dual_residual: f64,
    /// `max(primal_residual, dual_residual)`.
    pub kkt_residual: f64,
    /// `|primal_objective - dual_objective|`.
    pub duality_gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SdpSettings {
    pub tol: f64,
    pub max_iters: usize,
    /// Threshold for accepting infeasibility certificates.
    pub infeasibility_tol: f64,
    /// Print one line per iteration to stderr.
    pub verbose: bool,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings {
            tol: 1e-8,
            max_iters: 200,
            infeasibility_tol: 1e-8,
            verbose: false,
        }
    }
}

pub fn solve_sdp(problem: &SdpProblem, tol: f64, max_iters: usize) -> Result<SdpSolution, SdpError> {
    solve_sdp_with(
        problem,
        &SdpSettings {
            tol,
            max_iters,
            ..SdpSettings::default()
        },
    )
}

/// Symmetric sparse matrix stored as full (both triangles) coordinate list.
#[derive(Debug, Clone, Default)]
struct FullSym {
    entries: Vec<(usize, usize, f64)>,
}

impl FullSym {
    fn push(&mut self, r: usize, c: usize, v: f64) {
        if r == c {
            self.entries.push((r, r, v));
        } else {
            self.entries.push((r, c, v));
            self.entries.push((c, r, v));
        }
    }

    fn inner(&self, x: &DMatrix<f64>) -> f64 {
        self.entries.iter().map(|&(r, c, v)| v * x[(r, c)]).sum()
    }

    fn add_to(&self, out: &mut DMatrix<f64>, scale: f64) {
        for &(r, c, v) in &self.entries {
            out[(r, c)] += scale * v;
        }
    }
}

/// Per-problem data reorganised for the Newton system.
struct Structure {
    m: usize,
    nf: usize,
    /// For each block: the constraint rows touching it with their coefficient matrices.
    block_rows: Vec<Vec<(usize, FullSym)>>,
    /// Dense free-variable columns, `m × nf`.
    a_free: DMatrix<f64>,
    b: DVector<f64>,
    c_free: DVector<f64>,
    c_blocks: Vec<DMatrix<f64>>,
    /// True when every block touches at most one row, making M diagonal.
    diagonal_schur: bool,
}

impl Structure {
    fn new(p: &SdpProblem) -> Self {
        let m = p.equalities.len();
        let nf = p.free_vars;
        let nb = p.block_dims.len();
        let mut block_rows: Vec<Vec<(usize, FullSym)>> = vec![Vec::new(); nb];
        let mut a_free = DMatrix::zeros(m, nf);
        let mut b = DVector::zeros(m);
        for (k, eq) in p.equalities.iter().enumerate() {
            b[k] = eq.rhs;
            for &(i, a) in &eq.lhs.free {
                a_free[(k, i)] += a;
            }
            for e in &eq.lhs.blocks {
                let rows = &mut block_rows[e.block];
                match rows.last_mut() {
                    Some((row, sym)) if *row == k => sym.push(e.row, e.col, e.value),
                    _ => {
                        let mut sym = FullSym::default();
                        sym.push(e.row, e.col, e.value);
                        rows.push((k, sym));
                    }
                }
            }
        }
        // Merge duplicate row entries (an equality may list the same block twice
        // non-contiguously).
        for rows in &mut block_rows {
            rows.sort_by_key(|(k, _)| *k);
            let mut merged: Vec<(usize, FullSym)> = Vec::with_capacity(rows.len());
            for (k, sym) in rows.drain(..) {
                match merged.last_mut() {
                    Some((mk, msym)) if *mk == k => msym.entries.extend(sym.entries),
                    _ => merged.push((k, sym)),
                }
            }
            *rows = merged;
        }
        let mut c_free = DVector::zeros(nf);
        for &(i, a) in &p.objective.free {
            c_free[i] += a;
        }
        let mut c_blocks: Vec<DMatrix<f64>> = p.block_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for e in &p.objective.blocks {
            c_blocks[e.block][(e.row, e.col)] += e.value;
            if e.row != e.col {
                c_blocks[e.block][(e.col, e.row)] += e.value;
            }
        }
        let diagonal_schur = block_rows.iter().all(|rows| rows.len() <= 1);
        Structure {
            m,
            nf,
            block_rows,
            a_free,
            b,
            c_free,
            c_blocks,
            diagonal_schur,
        }
    }

    /// 𝒜_X(X) (block part only).
    fn apply_blocks(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (bi, rows) in self.block_rows.iter().enumerate() {
            for (k, sym) in rows {
                out[*k] += sym.inner(&xs[bi]);
            }
        }
        out
    }

    /// 𝒜_X*(y), one matrix per block.
    fn adjoint(&self, y: &DVector<f64>, dims: &[usize]) -> Vec<DMatrix<f64>> {
        let mut out: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for (bi, rows) in self.block_rows.iter().enumerate() {
            for (k, sym) in rows {
                if y[*k] != 0.0 {
                    sym.add_to(&mut out[bi], y[*k]);
                }
            }
        }
        out
    }
}

/// NT scaling of one block: `R⁻¹ X R⁻ᵀ = Rᵀ S R = diag(lambda)`.
struct Scaling {
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn psd_factor(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.l());
    }
    // Fall back to a symmetric square root when Cholesky rejects a
    // numerically borderline matrix.
    let eig = SymmetricEigen::new(a.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
        return None;
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Some(&eig.eigenvectors * sqrt * eig.eigenvectors.transpose())
}

fn nt_scaling(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<Scaling> {
    let l1 = psd_factor(x)?;
    let l2 = psd_factor(s)?;
    let svd = (l2.transpose() * &l1).svd(true, true);
    let u_t = svd.v_t?; // Vᵀ
    let sig = svd.singular_values;
    if sig.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return None;
    }
    let v = u_t.transpose();
    let inv_sqrt = DMatrix::from_diagonal(&sig.map(|v| 1.0 / v.sqrt()));
    let sqrt = DMatrix::from_diagonal(&sig.map(f64::sqrt));
    let r = &l1 * &v * &inv_sqrt;
    // R⁻¹ = Σ^{1/2} Vᵀ L1⁻¹
    let l1_inv = l1.clone().try_inverse()?;
    let r_inv = &sqrt * &u_t * l1_inv;
    let w = &r * r.transpose();
    Some(Scaling {
        r,
        r_inv,
        w,
        lambda: sig,
    })
}

enum SchurFactor {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Diagonal(DVector<f64>),
}

impl SchurFactor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            SchurFactor::Dense(ch) => ch.solve(rhs),
            SchurFactor::Diagonal(d) => rhs.component_div(d),
        }
    }

    fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SchurFactor::Dense(ch) => ch.solve(rhs),
            SchurFactor::Diagonal(d) => {
                let mut out = rhs.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= d[i];
                }
                out
            }
        }
    }
}

/// Factored augmented system `[M A_f; A_fᵀ 0]`.
struct Kkt {
    schur: SchurFactor,
    /// `M⁻¹ A_f`
    m_inv_af: DMatrix<f64>,
    /// Cholesky of `A_fᵀ M⁻¹ A_f`
    reduced: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Kkt {
    /// Solves against the exact operator. With no free variables this is
    /// conjugate gradients on `M` preconditioned by the (possibly
    /// regularized) factor; otherwise plain iterative refinement.
    fn solve_refined(
        &self,
        st: &Structure,
        scal: &[Scaling],
        dims: &[usize],
        p: &DVector<f64>,
        q: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let apply_m = |v: &DVector<f64>| -> DVector<f64> {
            let aty = st.adjoint(v, dims);
            let waw: Vec<DMatrix<f64>> = (0..dims.len()).map(|b| &scal[b].w * &aty[b] * &scal[b].w).collect();
            st.apply_blocks(&waw)
        };
        let scale = vec_max_abs(p).max(vec_max_abs(q)).max(1e-300);
        if st.nf == 0 {
            let mut x = self.schur.solve(p);
            let mut r = p - apply_m(&x);
            let mut z = self.schur.solve(&r);
            let mut d = z.clone();
            let mut rz = r.dot(&z);
            for _ in 0..50 {
                if vec_max_abs(&r) <= 1e-14 * scale {
                    break;
                }
                let md = apply_m(&d);
                let dmd = d.dot(&md);
                if !(dmd > 0.0) {
                    break;
                }
                let alpha = rz / dmd;
                x.axpy(alpha, &d, 1.0);
                r.axpy(-alpha, &md, 1.0);
                z = self.schur.solve(&r);
                let rz_new = r.dot(&z);
                let beta = rz_new / rz;
                rz = rz_new;
                d = &z + &d * beta;
            }
            return (x, DVector::zeros(0));
        }
        let (mut dy, mut dxf) = self.solve(&st.a_free, p, q);
        for _ in 0..4 {
            let r1 = p - apply_m(&dy) - &st.a_free * &dxf;
            let r2 = q - st.a_free.transpose() * &dy;
            if vec_max_abs(&r1).max(vec_max_abs(&r2)) <= 1e-15 * scale {
                break;
            }
            let (cy, cf) = self.solve(&st.a_free, &r1, &r2);
            dy += cy;
            dxf += cf;
        }
        (dy, dxf)
    }

    fn solve(&self, a_free: &DMatrix<f64>, p: &DVector<f64>, q: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m_inv_p = self.schur.solve(p);
        match &self.reduced {
            None => (m_inv_p, DVector::zeros(0)),
            Some(red) => {
                let rhs = a_free.transpose() * &m_inv_p - q;
                let dxf = red.solve(&rhs);
                let dy = m_inv_p - &self.m_inv_af * &dxf;
                (dy, dxf)
            }
        }
    }
}

fn build_schur(st: &Structure, scal: &[Scaling]) -> Result<Kkt, SdpError> {
    let m = st.m;
    let schur = if st.diagonal_schur {
        let mut d = DVector::<f64>::zeros(m);
        for (bi, rows) in st.block_rows.iter().enumerate() {
            let w = &scal[bi].w;
            for (k, sym) in rows {
                d[*k] += schur_entry(sym, sym, w);
            }
        }
        let maxd = d.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
        for v in d.iter_mut() {
            if *v <= 1e-300 {
                *v = maxd.max(1.0) * 1e-14;
            }
        }
        SchurFactor::Diagonal(d)
    } else {
        let mut mm = DMatrix::<f64>::zeros(m, m);
        for (bi, rows) in st.block_rows.iter().enumerate() {
            let w = &scal[bi].w;
            if rows.len() > 48 {
                // Many rows: form W A_l W densely once per row and contract.
                let n = w.nrows();
                for (li, (l, sym_l)) in rows.iter().enumerate() {
                    let mut g = DMatrix::<f64>::zeros(n, n);
                    for &(p, q, a) in &sym_l.entries {
                        // g += a * W[:,p] W[q,:]
                        let wp = w.column(p);
                        let wq = w.column(q);
                        g.ger(a, &wp, &wq, 1.0);
                    }
                    for (k, sym_k) in rows.iter().take(li + 1) {
                        let v = sym_k.inner(&g);
                        mm[(*k, *l)] += v;
                        if k != l {
                            mm[(*l, *k)] += v;
                        }
                    }
                }
            } else {
                for (li, (l, sym_l)) in rows.iter().enumerate() {
                    for (k, sym_k) in rows.iter().take(li + 1) {
                        let v = schur_entry(sym_k, sym_l, w);
                        mm[(*k, *l)] += v;
                        if k != l {
                            mm[(*l, *k)] += v;
                        }
                    }
                }
            }
        }
        let maxd = mm.diagonal().iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(1e-300);
        let mut reg = 1e-14 * maxd;
        loop {
            let mut trial = mm.clone();
            for i in 0..m {
                trial[(i, i)] += reg;
            }
            if let Some(ch) = trial.cholesky() {
                break SchurFactor::Dense(ch);
            }
            reg *= 100.0;
            if reg > 1e-4 * maxd {
                return Err(SdpError::NumericalBreakdown(
                    "Schur complement is not positive definite".into(),
                ));
            }
        }
    };
    let (m_inv_af, reduced) = if st.nf == 0 {
        (DMatrix::zeros(m, 0), None)
    } else {
        let m_inv_af = schur.solve_mat(&st.a_free);
        let mut red = st.a_free.transpose() * &m_inv_af;
        red = (&red + red.transpose()) * 0.5;
        let maxd = red.diagonal().iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(1e-300);
        let mut reg = 1e-15 * maxd;
        let ch = loop {
            let mut trial = red.clone();
            for i in 0..st.nf {
                trial[(i, i)] += reg;
            }
            if let Some(ch) = trial.cholesky() {
                break ch;
            }
            reg *= 100.0;
            if reg > 1e-4 * maxd {
                return Err(SdpError::NumericalBreakdown(
                    "free-variable columns are rank deficient".into(),
                ));
            }
        };
        (m_inv_af, Some(ch))
    };
    Ok(Kkt {
        schur,
        m_inv_af,
        reduced,
    })
}

/// `⟨A_k, W A_l W⟩ = Σ (A_k)_ij (A_l)_pq W_ip W_qj`.
fn schur_entry(ak: &FullSym, al: &FullSym, w: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for &(i, j, a) in &ak.entries {
        for &(p, q, b) in &al.entries {
            acc += a * b * w[(i, p)] * w[(q, j)];
        }
    }
    acc
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

fn sym_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    (a * b + b * a) * 0.5
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
}

fn vec_max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

/// Largest `α ≤ 1/0` such that `Λ + α D ⪰ 0` for diagonal positive `Λ`.
fn max_step(lambda: &DVector<f64>, d: &DMatrix<f64>) -> f64 {
    let n = lambda.len();
    let mut scaled = d.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] /= (lambda[i] * lambda[j]).sqrt();
        }
    }
    let scaled = (&scaled + scaled.transpose()) * 0.5;
    let min_eig = if n == 1 {
        scaled[(0, 0)]
    } else {
        SymmetricEigen::new(scaled)
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &v| a.min(v))
    };
    if min_eig >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / min_eig
    }
}

struct Direction {
    dxf: DVector<f64>,
    dy: DVector<f64>,
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
    dtau: f64,
    dkappa: f64,
}

fn solve_homogeneous(problem: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution, SdpError> {
    let st = Structure::new(problem);
    let dims = &problem.block_dims;
    let nb = dims.len();
    let nu = problem.cone_degree() as f64 + 1.0;

    let mut xf = DVector::<f64>::zeros(st.nf);
    let mut y = DVector::<f64>::zeros(st.m);
    let mut xs: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::identity(d, d)).collect();
    let mut ss: Vec<DMatrix<f64>> = xs.clone();
    let mut tau = 1.0_f64;
    let mut kappa = 1.0_f64;

    let b_norm = vec_max_abs(&st.b);
    let c_norm = vec_max_abs(&st.c_free).max(st.c_blocks.iter().map(max_abs).fold(0.0, f64::max));

    // Best iterate by relative KKT merit; returned on every unconverged exit.
    let mut best: Option<(f64, SdpSolution)> = None;
    let mut mu0 = f64::NAN;
    for iter in 0..=settings.max_iters {
        // Residuals of the homogeneous system.
        let ax = &st.a_free * &xf + st.apply_blocks(&xs);
        let r_p = &ax - &st.b * tau;
        let r_f = st.a_free.transpose() * &y - &st.c_free * tau;
        let aty = st.adjoint(&y, dims);
        let r_d: Vec<DMatrix<f64>> = (0..nb).map(|b| -&aty[b] + &st.c_blocks[b] * tau - &ss[b]).collect();
        let cx = st.c_free.dot(&xf) + (0..nb).map(|b| inner(&st.c_blocks[b], &xs[b])).sum::<f64>();
        let by = st.b.dot(&y);
        let r_g = by - cx - kappa;
        let mu = ((0..nb).map(|b| inner(&xs[b], &ss[b])).sum::<f64>() + tau * kappa) / nu;
        if iter == 0 {
            mu0 = mu;
        }

        // Normalised iterate and convergence tests.
        let pres = vec_max_abs(&(&ax / tau - &st.b));
        let dres_free = vec_max_abs(&(&r_f / tau));
        let dres_blk = r_d.iter().map(|m| max_abs(m) / tau).fold(0.0, f64::max);
        let dres = dres_free.max(dres_blk);
        let pobj = cx / tau;
        let dobj = by / tau;
        let gap = (pobj - dobj).abs();
        let sol = |status: SdpStatus, scale: f64| SdpSolution {
            status,
            gram_blocks: xs.iter().map(|m| m / scale).collect(),
            free_vars: (&xf / scale).iter().copied().collect(),
            dual: (&y / scale).iter().copied().collect(),
            dual_blocks: ss.iter().map(|m| m / scale).collect(),
            primal_objective: pobj,
            dual_objective: dobj,
            primal_residual: pres,
            dual_residual: dres,
            kkt_residual: pres.max(dres),
            duality_gap: gap,
            iterations: iter,
        };
        let merit = (pres / (1.0 + b_norm))
            .max(dres / (1.0 + c_norm))
            .max(gap / (1.0 + pobj.abs().max(dobj.abs())));
        if merit.is_finite() && best.as_ref().is_none_or(|(m, _)| merit < *m) {
            best = Some((merit, sol(SdpStatus::MaxIter, tau)));
        }
        let unconverged =
            |best: &mut Option<(f64, SdpSolution)>| best.take().map_or_else(|| sol(SdpStatus::MaxIter, tau), |b| b.1);
        if settings.verbose {
            eprintln!(
                "{iter:3} pobj {pobj:+.6e} dobj {dobj:+.6e} pres {pres:.2e} dres {dres:.2e} mu {mu:.2e} tau {tau:.2e} kappa {kappa:.2e} by {by:+.3e}"
            );
        }
        if pres <= settings.tol * (1.0 + b_norm)
            && dres <= settings.tol * (1.0 + c_norm)
            && gap <= settings.tol * (1.0 + pobj.abs().max(dobj.abs()))
        {
            return Ok(sol(SdpStatus::Feasible, tau));
        }
        // Primal infeasibility: y with A_fᵀy = 0, -𝒜*(y) ⪰ 0, bᵀy > 0.
        if by > 0.0 {
            let free_res = vec_max_abs(&(st.a_free.transpose() * &y));
            let blk_res = (0..nb).map(|b| max_abs(&(&aty[b] + &ss[b]))).fold(0.0, f64::max);
            if free_res.max(blk_res) <= settings.infeasibility_tol * by && tau < 1e-2 * kappa.max(1e-300) {
                return Ok(sol(SdpStatus::Infeasible, by));
            }
        }
        // Dual infeasibility: x with 𝒜x = 0, x ⪰ 0, cᵀx < 0.
        if cx < 0.0 {
            let res = vec_max_abs(&ax);
            if res <= settings.infeasibility_tol * (-cx) && tau < 1e-2 * kappa.max(1e-300) {
                return Ok(sol(SdpStatus::Unbounded, -cx));
            }
        }
        if iter == settings.max_iters {
            return Ok(unconverged(&mut best));
        }

        // Scaling and factorisation.
        // Past this point of μ the iterates carry no further information.
        if mu <= 1e-15 * mu0 {
            return Ok(unconverged(&mut best));
        }
        // A breakdown after the first iteration leaves a valid interior
        // point; report it as unconverged rather than failing.
        let Some(scal) = (0..nb)
            .map(|b| nt_scaling(&xs[b], &ss[b]))
            .collect::<Option<Vec<Scaling>>>()
        else {
            if iter == 0 {
                return Err(SdpError::NumericalBreakdown("initial point is not interior".into()));
            }
            return Ok(unconverged(&mut best));
        };
        let kkt = match build_schur(&st, &scal) {
            Ok(k) => k,
            Err(e) if iter == 0 => return Err(e),
            Err(_) => return Ok(unconverged(&mut best)),
        };
        let wcw: Vec<DMatrix<f64>> = (0..nb).map(|b| &scal[b].w * &st.c_blocks[b] * &scal[b].w).collect();
        let p2 = st.apply_blocks(&wcw) + &st.b;
        let (dy2, dxf2) = kkt.solve_refined(&st, &scal, dims, &p2, &st.c_free);
        let aty2 = st.adjoint(&dy2, dims);
        let d2: Vec<DMatrix<f64>> = (0..nb).map(|b| &scal[b].w * &aty2[b] * &scal[b].w - &wcw[b]).collect();
        let c_d2 = (0..nb).map(|b| inner(&st.c_blocks[b], &d2[b])).sum::<f64>();
        let denom_base = st.b.dot(&dy2) - st.c_free.dot(&dxf2) - c_d2;

        let solve_dir = |eta: f64, g: &[DMatrix<f64>], r_tk: f64| -> Direction {
            let mut d1: Vec<DMatrix<f64>> = (0..nb)
                .map(|b| {
                    let rgr = &scal[b].r * &g[b] * scal[b].r.transpose();
                    rgr - &scal[b].w * &r_d[b] * &scal[b].w * eta
                })
                .collect();
            let p1 = -&r_p * eta - st.apply_blocks(&d1);
            let q1 = -&r_f * eta;
            let (dy1, dxf1) = kkt.solve_refined(&st, &scal, dims, &p1, &q1);
            let aty1 = st.adjoint(&dy1, dims);
            for b in 0..nb {
                d1[b] += &scal[b].w * &aty1[b] * &scal[b].w;
            }
            let c_d1 = (0..nb).map(|b| inner(&st.c_blocks[b], &d1[b])).sum::<f64>();
            let num = -eta * r_g - st.b.dot(&dy1) + st.c_free.dot(&dxf1) + c_d1 + r_tk / tau;
            let dtau = num / (denom_base + kappa / tau);
            let dy = &dy1 + &dy2 * dtau;
            let dxf = &dxf1 + &dxf2 * dtau;
            let dx: Vec<DMatrix<f64>> = (0..nb).map(|b| &d1[b] + &d2[b] * dtau).collect();
            let aty_d = st.adjoint(&dy, dims);
            let ds: Vec<DMatrix<f64>> = (0..nb)
                .map(|b| -&aty_d[b] + &st.c_blocks[b] * dtau + &r_d[b] * eta)
                .collect();
            let dkappa = (r_tk - kappa * dtau) / tau;
            Direction {
                dxf,
                dy,
                dx,
                ds,
                dtau,
                dkappa,
            }
        };

        let step_len = |d: &Direction| -> (f64, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
            let mut alpha = f64::INFINITY;
            let mut sx = Vec::with_capacity(nb);
            let mut sz = Vec::with_capacity(nb);
            for b in 0..nb {
                let tx = &scal[b].r_inv * &d.dx[b] * scal[b].r_inv.transpose();
                let ts = scal[b].r.transpose() * &d.ds[b] * &scal[b].r;
                alpha = alpha.min(max_step(&scal[b].lambda, &tx));
                alpha = alpha.min(max_step(&scal[b].lambda, &ts));
                sx.push(tx);
                sz.push(ts);
            }
            if d.dtau < 0.0 {
                alpha = alpha.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                alpha = alpha.min(-kappa / d.dkappa);
            }
            (alpha, sx, sz)
        };

        // Predictor.
        let g_aff: Vec<DMatrix<f64>> = scal.iter().map(|s| -DMatrix::from_diagonal(&s.lambda)).collect();
        let aff = solve_dir(1.0, &g_aff, -tau * kappa);
        let (alpha_aff, tx_a, ts_a) = step_len(&aff);
        let alpha_aff = alpha_aff.min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(1e-8, 1.0);

        // Corrector.
        let g_cor: Vec<DMatrix<f64>> = (0..nb)
            .map(|b| {
                let lam = &scal[b].lambda;
                let n = lam.len();
                let corr = sym_product(&tx_a[b], &ts_a[b]);
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let mut rhs = -corr[(i, j)];
                        if i == j {
                            rhs += -lam[i] * lam[i] + sigma * mu;
                        }
                        g[(i, j)] = 2.0 * rhs / (lam[i] + lam[j]);
                    }
                }
                g
            })
            .collect();
        let r_tk = -tau * kappa + sigma * mu - aff.dtau * aff.dkappa;
        let dir = solve_dir(1.0 - sigma, &g_cor, r_tk);
        let (alpha_max, _, _) = step_len(&dir);
        let alpha = (0.99 * alpha_max).min(1.0);
        if !alpha.is_finite() || alpha < 1e-12 {
            if iter == 0 {
                return Err(SdpError::NumericalBreakdown(
                    "step length collapsed at the first iteration".into(),
                ));
            }
            return Ok(unconverged(&mut best));
        }

        xf += &dir.dxf * alpha;
        y += &dir.dy * alpha;
        for b in 0..nb {
            xs[b] += &dir.dx[b] * alpha;
            ss[b] += &dir.ds[b] * alpha;
            xs[b] = (&xs[b] + xs[b].transpose()) * 0.5;
            ss[b] = (&ss[b] + ss[b].transpose()) * 0.5;
        }
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;

        // Keep the embedding normalised so entries stay O(1).
        let scale = tau + kappa;
        if !(1e-6..=1e6).contains(&scale) {
            xf /= scale;
            y /= scale;
            for b in 0..nb {
                xs[b] /= scale;
                ss[b] /= scale;
            }
            tau /= scale;
            kappa /= scale;
        }
    }
    unreachable!("the final iteration returns")
}

/// Free variables expressed through a set of pivot equalities:
/// `x_f = P⁻¹ (b_I − 𝒜_I(X))`.
struct Elimination {
    pivot_rows: Vec<usize>,
    other_rows: Vec<usize>,
    /// `P⁻¹`, with `P = A_f[I, :]`.
    pivot_inv: DMatrix<f64>,
    /// `A_f[R, :]`
    other_free: DMatrix<f64>,
}

fn row_block_nnz(eq: &SdpEquality) -> usize {
    eq.lhs.blocks.len()
}

/// Removes the free variables by Gaussian elimination on the equalities.
/// Pivots are chosen among numerically acceptable candidates by sparsity.
fn eliminate_free(p: &SdpProblem) -> Result<(SdpProblem, Elimination, f64), SdpError> {
    let m = p.equalities.len();
    let nf = p.free_vars;
    let mut af = DMatrix::<f64>::zeros(m, nf);
    for (k, eq) in p.equalities.iter().enumerate() {
        for &(i, a) in &eq.lhs.free {
            af[(k, i)] += a;
        }
    }
    let mut work = af.clone();
    let mut used = vec![false; m];
    let mut pivot_rows = Vec::with_capacity(nf);
    for j in 0..nf {
        let colmax = (0..m)
            .filter(|&r| !used[r])
            .map(|r| work[(r, j)].abs())
            .fold(0.0, f64::max);
        if colmax <= 1e-12 {
            return Err(SdpError::Malformed(format!(
                "free variable {j} is not determined by the equalities"
            )));
        }
        let piv = (0..m)
            .filter(|&r| !used[r] && work[(r, j)].abs() >= 0.25 * colmax)
            .min_by_key(|&r| row_block_nnz(&p.equalities[r]))
            .expect("a candidate attains the column maximum");
        used[piv] = true;
        pivot_rows.push(piv);
        let pv = work[(piv, j)];
        for r in 0..m {
            if r != piv && work[(r, j)] != 0.0 {
                let f = work[(r, j)] / pv;
                for c in j..nf {
                    work[(r, c)] -= f * work[(piv, c)];
                }
            }
        }
    }
    let other_rows: Vec<usize> = (0..m).filter(|r| !used[*r]).collect();
    let pivot = DMatrix::from_fn(nf, nf, |i, j| af[(pivot_rows[i], j)]);
    let pivot_inv = pivot
        .clone()
        .try_inverse()
        .ok_or_else(|| SdpError::NumericalBreakdown("singular pivot block for free variables".into()))?;
    let other_free = DMatrix::from_fn(other_rows.len(), nf, |i, j| af[(other_rows[i], j)]);
    // Row multipliers: new_r = row_r − L_r · rows_I with L = A_f[R,:] P⁻¹.
    let mult = &other_free * &pivot_inv;
    let b_piv = DVector::from_fn(nf, |i, _| p.equalities[pivot_rows[i]].rhs);

    let combine = |base: &[BlockEntry], coeffs: &[(usize, f64)]| -> Vec<BlockEntry> {
        let mut acc: std::collections::BTreeMap<(usize, usize, usize), f64> = std::collections::BTreeMap::new();
        let mut scale = 0.0_f64;
        for e in base {
            *acc.entry((e.block, e.row, e.col)).or_insert(0.0) += e.value;
            scale = scale.max(e.value.abs());
        }
        for &(i, c) in coeffs {
            if c == 0.0 {
                continue;
            }
            for e in &p.equalities[pivot_rows[i]].lhs.blocks {
                *acc.entry((e.block, e.row, e.col)).or_insert(0.0) -= c * e.value;
                scale = scale.max((c * e.value).abs());
            }
        }
        acc.into_iter()
            .filter(|(_, v)| v.abs() > 1e-14 * scale)
            .map(|((block, row, col), value)| BlockEntry { block, row, col, value })
            .collect()
    };

    let mut equalities = Vec::with_capacity(other_rows.len());
    let mut kept_rows = Vec::with_capacity(other_rows.len());
    for (ri, &r) in other_rows.iter().enumerate() {
        let coeffs: Vec<(usize, f64)> = (0..nf).map(|i| (i, mult[(ri, i)])).collect();
        let blocks = combine(&p.equalities[r].lhs.blocks, &coeffs);
        let rhs = p.equalities[r].rhs - (0..nf).map(|i| mult[(ri, i)] * b_piv[i]).sum::<f64>();
        if blocks.is_empty() {
            if rhs.abs() > 1e-9 * (1.0 + p.equalities[r].rhs.abs()) {
                return Err(SdpError::Malformed(format!(
                    "equality {r} is inconsistent with the free-variable rows"
                )));
            }
            continue;
        }
        kept_rows.push(r);
        equalities.push(SdpEquality {
            lhs: LinearFunctional { free: vec![], blocks },
            rhs,
        });
    }
    // Objective: c_fᵀ P⁻¹ (b_I − 𝒜_I X) + ⟨C, X⟩.
    let mut cf = DVector::<f64>::zeros(nf);
    for &(i, a) in &p.objective.free {
        cf[i] += a;
    }
    let mu = pivot_inv.transpose() * &cf;
    let obj_coeffs: Vec<(usize, f64)> = (0..nf).map(|i| (i, mu[i])).collect();
    let objective = LinearFunctional {
        free: vec![],
        blocks: combine(&p.objective.blocks, &obj_coeffs),
    };
    let offset = mu.dot(&b_piv);
    let reduced = SdpProblem {
        block_dims: p.block_dims.clone(),
        free_vars: 0,
        equalities,
        objective,
    };
    let other_free = DMatrix::from_fn(kept_rows.len(), nf, |i, j| af[(kept_rows[i], j)]);
    Ok((
        reduced,
        Elimination {
            pivot_rows,
            other_rows: kept_rows,
            pivot_inv,
            other_free,
        },
        offset,
    ))
}

/// Residuals of a candidate primal-dual point on the original problem.
fn original_residuals(
    p: &SdpProblem,
    st: &Structure,
    xf: &DVector<f64>,
    xs: &[DMatrix<f64>],
    y: &DVector<f64>,
    ss: &[DMatrix<f64>],
) -> (f64, f64, f64, f64) {
    let ax = &st.a_free * xf + st.apply_blocks(xs);
    let pres = vec_max_abs(&(ax - &st.b));
    let rf = st.a_free.transpose() * y - &st.c_free;
    let aty = st.adjoint(y, &p.block_dims);
    let mut dres = vec_max_abs(&rf);
    for b in 0..p.block_dims.len() {
        dres = dres.max(max_abs(&(&st.c_blocks[b] - &aty[b] - &ss[b])));
    }
    let pobj = st.c_free.dot(xf) + (0..xs.len()).map(|b| inner(&st.c_blocks[b], &xs[b])).sum::<f64>();
    let dobj = st.b.dot(y);
    (pres, dres, pobj, dobj)
}

pub fn solve_sdp_with(problem: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    if problem.free_vars == 0 {
        return solve_homogeneous(problem, settings);
    }
    let (reduced, elim, offset) = eliminate_free(problem)?;
    let inner_sol = solve_homogeneous(&reduced, settings)?;
    let nf = problem.free_vars;
    let m = problem.equalities.len();
    let st = Structure::new(problem);

    // x_f = P⁻¹ (b_I − 𝒜_I(X)); for a dual ray the right-hand side is dropped.
    let ray_primal = inner_sol.status == SdpStatus::Unbounded;
    let ax_all = st.apply_blocks(&inner_sol.gram_blocks);
    let rhs_i = DVector::from_fn(nf, |i, _| {
        let r = elim.pivot_rows[i];
        let b = if ray_primal { 0.0 } else { st.b[r] };
        b - ax_all[r]
    });
    let xf = &elim.pivot_inv * rhs_i;

    let ray_dual = inner_sol.status == SdpStatus::Infeasible;
    let y_r = DVector::from_vec(inner_sol.dual.clone());
    let cf = if ray_dual {
        DVector::zeros(nf)
    } else {
        st.c_free.clone()
    };
    let y_i = elim.pivot_inv.transpose() * (cf - elim.other_free.transpose() * &y_r);
    let mut y = DVector::<f64>::zeros(m);
    for (k, &r) in elim.other_rows.iter().enumerate() {
        y[r] = y_r[k];
    }
    for (k, &r) in elim.pivot_rows.iter().enumerate() {
        y[r] = y_i[k];
    }

    let (pres, dres, pobj, dobj) =
        original_residuals(problem, &st, &xf, &inner_sol.gram_blocks, &y, &inner_sol.dual_blocks);
    let _ = offset;
    let (pres, dres) = match inner_sol.status {
        SdpStatus::Feasible | SdpStatus::MaxIter => (pres, dres),
        _ => (inner_sol.primal_residual, inner_sol.dual_residual),
    };
    Ok(SdpSolution {
        status: inner_sol.status,
        gram_blocks: inner_sol.gram_blocks,
        free_vars: xf.iter().copied().collect(),
        dual: y.iter().copied().collect(),
        dual_blocks: inner_sol.dual_blocks,
        primal_objective: pobj,
        dual_objective: dobj,
        primal_residual: pres,
        dual_residual: dres,
        kkt_residual: pres.max(dres),
        duality_gap: (pobj - dobj).abs(),
        iterations: inner_sol.iterations,
    })
}
