//! Compiles sum-of-squares constraints into semidefinite programs.
//!
//! A polynomial `p(x)` is SOS when `p = z(x)ᵀ Q z(x)` for some `Q ⪰ 0`.
//! Matching coefficients monomial by monomial gives linear equalities
//! between the decision variables and the entries of `Q`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{monomial_basis, Monomial, PolyError, Polynomial};
use crate::solvers::sdp::solve_sdp_with;
use crate::solvers::{
    BlockEntry, LinearFunctional, SdpEquality, SdpError, SdpProblem, SdpSettings, SdpSolution, SdpStatus,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("polynomial error: {0}")]
    Poly(#[from] PolyError),
    #[error("degree overflow: identity has degree {found} but the Gram basis spans only degree {span}")]
    DegreeOverflow { found: u32, span: u32 },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("solver did not certify feasibility (status {0:?})")]
    NotFeasible(SdpStatus),
    #[error("solver residual {0:e} exceeds tolerance")]
    ResidualTooLarge(f64),
    #[error("solver failure: {0}")]
    Solver(SdpError),
}

/// Gram basis `z(x)` for one PSD block.
#[derive(Debug, Clone, PartialEq)]
pub struct SosTemplate {
    pub basis: Vec<Monomial>,
    /// Index of the PSD block holding the Gram matrix.
    pub block: usize,
}

impl SosTemplate {
    /// All monomials of degree at most `half_degree`.
    pub fn full(nvars: usize, half_degree: u32, block: usize) -> Self {
        SosTemplate {
            basis: monomial_basis(nvars, half_degree),
            block,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn max_degree(&self) -> u32 {
        self.basis.iter().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Degree of `zᵀQz`.
    pub fn span_degree(&self) -> u32 {
        2 * self.max_degree()
    }

    /// The polynomial `z(x)ᵀ Q z(x)`.
    pub fn polynomial(&self, gram: &DMatrix<f64>) -> Polynomial {
        let nvars = self.basis.first().map_or(0, Monomial::nvars);
        let mut terms = Vec::with_capacity(self.dim() * self.dim());
        for a in 0..self.dim() {
            for b in a..self.dim() {
                let c = if a == b {
                    gram[(a, a)]
                } else {
                    gram[(a, b)] + gram[(b, a)]
                };
                terms.push((self.basis[a].mul(&self.basis[b]).exponents().to_vec(), c));
            }
        }
        Polynomial::from_terms(nvars, terms).expect("basis monomials share nvars")
    }
}

/// A polynomial whose coefficients are affine in the decision variables:
/// `constant + Σ x_f[i]·P_i + Σ (zᵀ Q_b z)·m_b`.
#[derive(Debug, Clone)]
pub struct AffinePolynomial {
    pub nvars: usize,
    pub constant: Polynomial,
    pub free: Vec<(usize, Polynomial)>,
    pub gram: Vec<(SosTemplate, Polynomial)>,
}

impl AffinePolynomial {
    pub fn new(nvars: usize) -> Self {
        AffinePolynomial {
            nvars,
            constant: Polynomial::zero(nvars),
            free: Vec::new(),
            gram: Vec::new(),
        }
    }

    pub fn degree(&self) -> u32 {
        let free = self.free.iter().map(|(_, p)| p.degree()).max().unwrap_or(0);
        let gram = self
            .gram
            .iter()
            .map(|(t, m)| t.span_degree() + m.degree())
            .max()
            .unwrap_or(0);
        self.constant.degree().max(free).max(gram)
    }

    /// Substitutes decision values and returns the resulting polynomial.
    pub fn evaluate(&self, free: &[f64], blocks: &[DMatrix<f64>]) -> Polynomial {
        let mut acc = self.constant.clone();
        for (i, p) in &self.free {
            acc = &acc + &p.scale(free[*i]);
        }
        for (t, m) in &self.gram {
            acc = &acc + &(&t.polynomial(&blocks[t.block]) * m);
        }
        acc
    }
}

#[derive(Default)]
struct Row {
    free: BTreeMap<usize, f64>,
    blocks: Vec<BlockEntry>,
    constant: f64,
}

/// Equalities expressing `lhs ≡ z(x)ᵀ Q z(x)` with `Q` the block of `sos`.
/// One equality per monomial in the joint support.
pub fn encode_sos_identity(lhs: &AffinePolynomial, sos: &SosTemplate) -> Result<Vec<SdpEquality>, SosError> {
    let found = lhs.degree();
    if found > sos.span_degree() {
        return Err(SosError::DegreeOverflow {
            found,
            span: sos.span_degree(),
        });
    }
    let mut rows: BTreeMap<Monomial, Row> = BTreeMap::new();
    for (m, c) in lhs.constant.terms() {
        rows.entry(m.clone()).or_default().constant += c;
    }
    for (i, p) in &lhs.free {
        for (m, c) in p.terms() {
            *rows.entry(m.clone()).or_default().free.entry(*i).or_insert(0.0) += c;
        }
    }
    let mut push_gram = |t: &SosTemplate, mult: &Polynomial, sign: f64| {
        for a in 0..t.dim() {
            for b in a..t.dim() {
                let ab = t.basis[a].mul(&t.basis[b]);
                for (m, c) in mult.terms() {
                    rows.entry(ab.mul(m)).or_default().blocks.push(BlockEntry {
                        block: t.block,
                        row: a,
                        col: b,
                        value: sign * c,
                    });
                }
            }
        }
    };
    for (t, mult) in &lhs.gram {
        push_gram(t, mult, 1.0);
    }
    push_gram(sos, &Polynomial::constant(lhs.nvars, 1.0), -1.0);
    Ok(rows
        .into_values()
        .map(|r| SdpEquality {
            lhs: LinearFunctional {
                free: r.free.into_iter().filter(|(_, c)| *c != 0.0).collect(),
                blocks: r.blocks,
            },
            rhs: -r.constant,
        })
        .collect())
}

/// The closed-loop map `x ↦ f(x, û(x))` on the part `{r_i ≤ 0}` of the
/// safe set where it applies.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopPiece {
    pub map: Vec<Polynomial>,
    pub region: Vec<Polynomial>,
}

impl LoopPiece {
    /// A map valid on the whole safe set.
    pub fn whole(map: Vec<Polynomial>) -> Self {
        LoopPiece {
            map,
            region: Vec::new(),
        }
    }
}

/// Data of the guidance-barrier synthesis program.
#[derive(Debug, Clone)]
pub struct GbfSynthesisSpec {
    /// Closed-loop pieces covering the safe set.
    pub pieces: Vec<LoopPiece>,
    /// Safe set `{safe ≤ 0}`.
    pub safe: Polynomial,
    /// Target set `{target ≤ 0}`.
    pub target: Polynomial,
    /// Enclosing set `{outer ≤ 0}` containing the safe set and its image.
    pub outer: Polynomial,
    pub lambda: f64,
    pub bound: f64,
    pub x0: Vec<f64>,
    pub deg_v: u32,
    /// Multiplier degree; `None` picks the minimal complete span per clause.
    pub deg_s: Option<u32>,
    pub eps_pos: f64,
    /// States are rescaled by `1/scale` inside the program.
    pub scale: f64,
}

impl GbfSynthesisSpec {
    pub fn nvars(&self) -> usize {
        self.x0.len()
    }

    pub fn validate(&self) -> Result<(), SosError> {
        let n = self.nvars();
        let bad = |m: &str| Err(SosError::InvalidSpec(m.to_string()));
        if n == 0 {
            return bad("empty state");
        }
        if !(self.lambda > 1.0) || !self.lambda.is_finite() {
            return bad("lambda must lie in (1, inf)");
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return bad("M must be positive");
        }
        if !(self.eps_pos > 0.0) {
            return bad("eps_pos must be positive");
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return bad("scale must be positive");
        }
        if self.deg_v == 0 || self.deg_v % 2 == 1 {
            return bad("deg_v must be even and positive");
        }
        if matches!(self.deg_s, Some(d) if d % 2 == 1) {
            return bad("deg_s must be even");
        }
        if self.pieces.is_empty() || self.pieces.iter().any(|p| p.map.len() != n) {
            return bad("each closed-loop piece must have one component per state");
        }
        let polys = self.pieces.iter().flat_map(|p| p.map.iter().chain(&p.region)).chain([
            &self.safe,
            &self.target,
            &self.outer,
        ]);
        if polys.clone().any(|p| p.nvars() != n) {
            return bad("all polynomials must share the state dimension");
        }
        // Spot check T ⊆ X on a grid over the scaling box.
        let steps = match n {
            1 => 401,
            2 => 61,
            3 => 21,
            _ => 7,
        };
        let mut idx = vec![0usize; n];
        let mut x = vec![0.0; n];
        loop {
            for i in 0..n {
                x[i] = self.scale * (-1.0 + 2.0 * idx[i] as f64 / (steps - 1) as f64);
            }
            if self.target.eval_unchecked(&x) <= 0.0 && self.safe.eval_unchecked(&x) > 0.0 {
                return Err(SosError::InvalidSpec(format!(
                    "target is not contained in the safe set at {x:?}"
                )));
            }
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < steps {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
        Ok(())
    }
}

/// Which set polynomial a multiplier is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetRole {
    Safe,
    Target,
    Outer,
    /// Region constraint `i` of the clause's closed-loop piece.
    Region(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clause {
    /// Decrease along closed-loop piece `k`.
    Decrease(usize),
    OutsideSafe,
    TargetBound,
}

#[derive(Debug, Clone)]
pub struct MultiplierBlock {
    pub clause: Clause,
    pub set: SetRole,
    pub template: SosTemplate,
    /// Positive factor the set polynomial was divided by.
    pub normalization: f64,
}

/// A compiled synthesis program together with the bookkeeping needed to
/// decode its solution.
#[derive(Debug, Clone)]
pub struct GbfProgram {
    pub sdp: SdpProblem,
    /// Monomials of `v` in scaled coordinates, one free variable each.
    pub v_basis: Vec<Monomial>,
    pub multipliers: Vec<MultiplierBlock>,
    /// Main Gram templates, one per clause.
    pub clause_templates: Vec<(Clause, SosTemplate)>,
    /// The clause identities in scaled coordinates, for residual checks.
    pub identities: Vec<(Clause, AffinePolynomial, SosTemplate)>,
    pub scale: f64,
}

impl GbfProgram {
    pub fn main_identity_degree(&self) -> u32 {
        self.clause_templates
            .iter()
            .filter(|(c, _)| matches!(c, Clause::Decrease(_)))
            .map(|(_, t)| t.span_degree())
            .max()
            .unwrap_or(0)
    }
}

fn even_up(d: u32) -> u32 {
    d + d % 2
}

fn normalized(p: &Polynomial) -> (Polynomial, f64) {
    let k = p.max_abs_coefficient();
    if k > 0.0 {
        (p.scale(1.0 / k), k)
    } else {
        (p.clone(), 1.0)
    }
}

/// `p(scale · y)` as a polynomial in `y`.
fn rescale_input(p: &Polynomial, scale: f64) -> Result<Polynomial, PolyError> {
    let n = p.nvars();
    let subs: Vec<Polynomial> = (0..n).map(|i| Polynomial::var(n, i).scale(scale)).collect();
    p.compose(&subs)
}

pub fn build_gbf_sdp(spec: &GbfSynthesisSpec) -> Result<GbfProgram, SosError> {
    spec.validate()?;
    let n = spec.nvars();
    let s = spec.scale;

    // Problem data in scaled coordinates y = x / s.
    let (w, kw) = normalized(&rescale_input(&spec.safe, s)?);
    let (g, kg) = normalized(&rescale_input(&spec.target, s)?);
    let (w0, kw0) = normalized(&rescale_input(&spec.outer, s)?);
    let y0: Vec<f64> = spec.x0.iter().map(|v| v / s).collect();

    let v_basis = monomial_basis(n, spec.deg_v);
    let nv = v_basis.len();
    let v_plain: Vec<Polynomial> = v_basis.iter().map(|m| Polynomial::monomial(m.clone(), 1.0)).collect();

    let mut block_dims: Vec<usize> = Vec::new();
    let new_template = |half: u32, dims: &mut Vec<usize>| {
        let t = SosTemplate::full(n, half, dims.len());
        dims.push(t.dim());
        t
    };
    let mult_degree = |identity: u32, set_deg: u32| -> u32 {
        spec.deg_s.unwrap_or_else(|| even_up(identity.saturating_sub(set_deg)))
    };

    let mut equalities = Vec::new();
    let mut multipliers = Vec::new();
    let mut clause_templates = Vec::new();
    let mut identities = Vec::new();

    // Decrease on each piece: v∘f − λv + s·w + Σ s_i·r_i − s·g ∈ SOS.
    for (k, piece) in spec.pieces.iter().enumerate() {
        let f: Vec<Polynomial> = piece
            .map
            .iter()
            .map(|fi| rescale_input(fi, s).map(|p| p.scale(1.0 / s)))
            .collect::<Result<_, _>>()?;
        let region: Vec<(Polynomial, f64)> = piece
            .region
            .iter()
            .map(|r| rescale_input(r, s).map(|p| normalized(&p)))
            .collect::<Result<_, _>>()?;
        let v_of_f: Vec<Polynomial> = v_basis
            .iter()
            .map(|m| Polynomial::monomial(m.clone(), 1.0).compose(&f))
            .collect::<Result<_, _>>()?;
        let base = even_up(v_of_f.iter().map(Polynomial::degree).max().unwrap_or(0).max(spec.deg_v));
        let mut lhs = AffinePolynomial::new(n);
        for i in 0..nv {
            lhs.free.push((i, &v_of_f[i] - &v_plain[i].scale(spec.lambda)));
        }
        let mut sets: Vec<(SetRole, &Polynomial, f64, f64)> = vec![(SetRole::Safe, &w, kw, 1.0)];
        for (i, (r, kr)) in region.iter().enumerate() {
            sets.push((SetRole::Region(i), r, *kr, 1.0));
        }
        sets.push((SetRole::Target, &g, kg, -1.0));
        let mut top = base;
        for (role, q, norm, sign) in sets {
            let ds = mult_degree(base, q.degree());
            let t = new_template(ds / 2, &mut block_dims);
            top = top.max(t.span_degree() + q.degree());
            lhs.gram.push((t.clone(), q.scale(sign)));
            multipliers.push(MultiplierBlock {
                clause: Clause::Decrease(k),
                set: role,
                template: t,
                normalization: norm,
            });
        }
        let main = new_template(even_up(top) / 2, &mut block_dims);
        equalities.extend(encode_sos_identity(&lhs, &main)?);
        clause_templates.push((Clause::Decrease(k), main.clone()));
        identities.push((Clause::Decrease(k), lhs, main));
    }

    // Non-positivity outside a constraint: −v + s·w0 − s'·q ∈ SOS.
    let mut outside =
        |clause: Clause, q: &Polynomial, role: SetRole, kq: f64, block_dims: &mut Vec<usize>| -> Result<(), SosError> {
            let base = even_up(spec.deg_v.max(w0.degree()).max(q.degree()));
            let mut lhs = AffinePolynomial::new(n);
            for i in 0..nv {
                lhs.free.push((i, -&v_plain[i]));
            }
            let mut top = base;
            for (r, p, k, sign) in [(SetRole::Outer, &w0, kw0, 1.0), (role, q, kq, -1.0)] {
                let ds = mult_degree(base, p.degree());
                let t = new_template(ds / 2, block_dims);
                top = top.max(t.span_degree() + p.degree());
                lhs.gram.push((t.clone(), p.scale(sign)));
                multipliers.push(MultiplierBlock {
                    clause: clause.clone(),
                    set: r,
                    template: t,
                    normalization: k,
                });
            }
            let main = new_template(even_up(top) / 2, block_dims);
            equalities.extend(encode_sos_identity(&lhs, &main)?);
            clause_templates.push((clause.clone(), main.clone()));
            identities.push((clause, lhs, main));
            Ok(())
        };
    outside(Clause::OutsideSafe, &w, SetRole::Safe, kw, &mut block_dims)?;

    // Target bound: M − v + s·g ∈ SOS.
    {
        let base = even_up(spec.deg_v.max(g.degree()));
        let mut lhs = AffinePolynomial::new(n);
        lhs.constant = Polynomial::constant(n, spec.bound);
        for i in 0..nv {
            lhs.free.push((i, -&v_plain[i]));
        }
        let ds = mult_degree(base, g.degree());
        let t = new_template(ds / 2, &mut block_dims);
        let top = base.max(t.span_degree() + g.degree());
        lhs.gram.push((t.clone(), g.clone()));
        multipliers.push(MultiplierBlock {
            clause: Clause::TargetBound,
            set: SetRole::Target,
            template: t,
            normalization: kg,
        });
        let main = new_template(even_up(top) / 2, &mut block_dims);
        equalities.extend(encode_sos_identity(&lhs, &main)?);
        clause_templates.push((Clause::TargetBound, main.clone()));
        identities.push((Clause::TargetBound, lhs, main));
    }

    // v(x0) − slack = eps_pos with slack ≥ 0 in a 1×1 block; maximise v(x0).
    let slack_block = block_dims.len();
    block_dims.push(1);
    let v_at_x0: Vec<(usize, f64)> = v_basis.iter().enumerate().map(|(i, m)| (i, m.eval(&y0))).collect();
    equalities.push(SdpEquality {
        lhs: LinearFunctional {
            free: v_at_x0.clone(),
            blocks: vec![BlockEntry {
                block: slack_block,
                row: 0,
                col: 0,
                value: -1.0,
            }],
        },
        rhs: spec.eps_pos,
    });
    let objective = LinearFunctional {
        free: v_at_x0.iter().map(|&(i, c)| (i, -c)).collect(),
        blocks: vec![],
    };

    let sdp = SdpProblem {
        block_dims,
        free_vars: nv,
        equalities,
        objective,
    };
    Ok(GbfProgram {
        sdp,
        v_basis,
        multipliers,
        clause_templates,
        identities,
        scale: s,
    })
}

/// Fractions of the maximal `v(x0)` tried when re-centring.
const RECENTRE_FRACTIONS: [f64; 3] = [0.5, 0.1, 0.01];

/// Outcome of [`solve_gbf`].
#[derive(Debug, Clone)]
pub struct GbfSolve {
    pub program: GbfProgram,
    pub solution: SdpSolution,
    /// Estimated maximum of `v(x0)` over the feasible certificates.
    pub v_max: f64,
    /// Lower bound on `v(x0)` imposed in the re-centred solve.
    pub v_floor: f64,
}

/// Builds and solves the synthesis program in two phases.
///
/// The first phase maximises `v(x0)`. Its optimum sits on a singular face
/// of the PSD cone where the solver cannot reach tight residuals, so the
/// second phase drops the objective and asks for `v(x0)` at a fraction of
/// that maximum, which lands in the interior with small residuals.
pub fn solve_gbf(spec: &GbfSynthesisSpec, settings: &SdpSettings) -> Result<GbfSolve, SosError> {
    let mut program = build_gbf_sdp(spec)?;
    let phase1 = SdpSettings {
        tol: settings.tol.max(1e-6),
        ..*settings
    };
    let first = solve_sdp_with(&program.sdp, &phase1).map_err(SosError::Solver)?;
    match first.status {
        SdpStatus::Infeasible | SdpStatus::Unbounded => return Err(SosError::NotFeasible(first.status)),
        SdpStatus::Feasible | SdpStatus::MaxIter => {}
    }
    let v_max = -first.primal_objective;
    if !(v_max > spec.eps_pos) {
        return Err(SosError::NotFeasible(first.status));
    }
    let last = program.sdp.equalities.len() - 1;
    program.sdp.objective = LinearFunctional::default();
    let mut status = first.status;
    // The stopping test is relative to the data scale; ask for enough
    // digits that the absolute identity residuals also clear 1e-7.
    let phase2 = SdpSettings {
        tol: settings.tol.min(1e-10),
        ..*settings
    };
    for frac in RECENTRE_FRACTIONS {
        let floor = (frac * v_max).max(spec.eps_pos);
        program.sdp.equalities[last].rhs = floor;
        let sol = solve_sdp_with(&program.sdp, &phase2).map_err(SosError::Solver)?;
        status = sol.status;
        // An unconverged solve is usable once its best iterate clears the
        // absolute residual target.
        if matches!(sol.status, SdpStatus::Feasible | SdpStatus::MaxIter) && sol.kkt_residual <= 1e-7 {
            return Ok(GbfSolve {
                program,
                solution: sol,
                v_max,
                v_floor: floor,
            });
        }
        if sol.status == SdpStatus::Infeasible {
            break;
        }
    }
    Err(SosError::NotFeasible(status))
}

/// A multiplier polynomial in original coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierRecord {
    pub clause: Clause,
    pub set: SetRole,
    pub poly: Polynomial,
}

/// Serialized certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub lambda: f64,
    #[serde(rename = "M")]
    pub bound: f64,
    pub v: Polynomial,
    pub multipliers: Vec<MultiplierRecord>,
    pub x0: Vec<f64>,
}

impl Certificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Largest coefficient mismatch across all clause identities at the solver point.
pub fn identity_residual(program: &GbfProgram, sol: &SdpSolution) -> f64 {
    program
        .identities
        .iter()
        .map(|(_, lhs, main)| {
            let p = lhs.evaluate(&sol.free_vars, &sol.gram_blocks);
            let q = main.polynomial(&sol.gram_blocks[main.block]);
            (&p - &q).max_abs_coefficient()
        })
        .fold(0.0, f64::max)
}

/// Decodes a feasible solver point into a certificate in original coordinates.
pub fn extract_certificate(
    spec: &GbfSynthesisSpec,
    program: &GbfProgram,
    sol: &SdpSolution,
) -> Result<Certificate, SosError> {
    // Unconverged iterates are interior points; the residual tests decide.
    if !matches!(sol.status, SdpStatus::Feasible | SdpStatus::MaxIter) {
        return Err(SosError::NotFeasible(sol.status));
    }
    if sol.kkt_residual > 1e-7 {
        return Err(SosError::ResidualTooLarge(sol.kkt_residual));
    }
    let res = identity_residual(program, sol);
    if res > 1e-7 {
        return Err(SosError::ResidualTooLarge(res));
    }
    let n = spec.nvars();
    let unscale: Vec<Polynomial> = (0..n)
        .map(|i| Polynomial::var(n, i).scale(1.0 / program.scale))
        .collect();
    let v_scaled = Polynomial::from_basis(n, &program.v_basis, &sol.free_vars);
    let v = v_scaled.compose(&unscale)?;
    let multipliers = program
        .multipliers
        .iter()
        .map(|mb| {
            let p = mb.template.polynomial(&sol.gram_blocks[mb.template.block]);
            Ok(MultiplierRecord {
                clause: mb.clause.clone(),
                set: mb.set,
                poly: p.compose(&unscale)?.scale(1.0 / mb.normalization),
            })
        })
        .collect::<Result<Vec<_>, PolyError>>()?;
    let v0 = v.eval(&spec.x0)?;
    if v0 < spec.eps_pos * (1.0 - 1e-6) {
        return Err(SosError::InvalidSpec(format!(
            "certificate value at x0 is {v0:e}, below eps_pos"
        )));
    }
    Ok(Certificate {
        lambda: spec.lambda,
        bound: spec.bound,
        v,
        multipliers,
        x0: spec.x0.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::solve_sdp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x1() -> Polynomial {
        Polynomial::var(1, 0)
    }

    fn sos_feasibility(p: &Polynomial, half: u32) -> (SdpProblem, SosTemplate) {
        let t = SosTemplate::full(p.nvars(), half, 0);
        let mut lhs = AffinePolynomial::new(p.nvars());
        lhs.constant = p.clone();
        let eqs = encode_sos_identity(&lhs, &t).unwrap();
        (
            SdpProblem {
                block_dims: vec![t.dim()],
                free_vars: 0,
                equalities: eqs,
                objective: LinearFunctional::default(),
            },
            t,
        )
    }

    #[test]
    fn perfect_square_gram() {
        let x = x1();
        let p = &(&x * &x) + &(&x.scale(2.0) + &Polynomial::constant(1, 1.0));
        let (sdp, t) = sos_feasibility(&p, 1);
        // The rank-one Gram [[1,1],[1,1]] satisfies every equality.
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        for eq in &sdp.equalities {
            assert!((eq.lhs.eval(&[], std::slice::from_ref(&q)) - eq.rhs).abs() < 1e-12);
        }
        let sol = solve_sdp(&sdp, 1e-8, 200).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        let back = t.polynomial(&sol.gram_blocks[0]);
        assert!((&back - &p).max_abs_coefficient() < 1e-7);
    }

    #[test]
    fn negative_constant_is_infeasible() {
        let x = x1();
        let p = &(&x * &x) - &Polynomial::constant(1, 1.0);
        let (sdp, _) = sos_feasibility(&p, 1);
        // The constant row pins Q_00 = -1.
        let row = sdp
            .equalities
            .iter()
            .find(|e| e.lhs.blocks.iter().all(|b| b.row == 0 && b.col == 0))
            .unwrap();
        assert_eq!(row.rhs, 1.0);
        let sol = solve_sdp(&sdp, 1e-8, 200).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn random_psd_gram_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = SosTemplate::full(2, 1, 0);
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let q = &b * b.transpose();
        let p = t.polynomial(&q);
        for _ in 0..1000 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            assert!(p.eval(&x).unwrap() >= -1e-9);
        }
        // Encoding the reconstructed polynomial admits the same Gram exactly.
        let mut lhs = AffinePolynomial::new(2);
        lhs.constant = p.clone();
        for eq in encode_sos_identity(&lhs, &t).unwrap() {
            assert!((eq.lhs.eval(&[], std::slice::from_ref(&q)) - eq.rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_overflow_reported() {
        let x = x1();
        let mut lhs = AffinePolynomial::new(1);
        lhs.constant = x.powi(4);
        let t = SosTemplate::full(1, 1, 0);
        assert_eq!(
            encode_sos_identity(&lhs, &t),
            Err(SosError::DegreeOverflow { found: 4, span: 2 })
        );
    }

    fn double_integrator_spec(deg_v: u32) -> GbfSynthesisSpec {
        let n = 2;
        let p = Polynomial::var(n, 0);
        let v = Polynomial::var(n, 1);
        let u = &p.scale(-0.04) - &v.scale(0.1);
        let closed = vec![&p + &v.scale(0.1), &v + &u];
        let c = |k: f64| Polynomial::constant(n, k);
        let sq = &(&p * &p) + &(&v * &v);
        GbfSynthesisSpec {
            pieces: vec![LoopPiece::whole(closed)],
            safe: &sq.scale(1.0 / 64.0) - &c(1.0),
            target: &sq - &c(0.25),
            outer: &sq.scale(1.0 / 64.0) - &c(2.0),
            lambda: 1.001,
            bound: 1.0,
            x0: vec![4.0, -6.0],
            deg_v,
            deg_s: None,
            eps_pos: 1e-3,
            scale: 128f64.sqrt(),
        }
    }

    #[test]
    fn degree_bookkeeping_linear_loop() {
        let spec = double_integrator_spec(2);
        let prog = build_gbf_sdp(&spec).unwrap();
        // Linear closed loop keeps v∘f at degree 2, and multipliers of the
        // quadratic sets are constants, so the main identity has degree 2.
        // An independent count: identity degree = max(deg v · deg f, deg s + deg w).
        assert_eq!(prog.main_identity_degree(), 2);
        let spec4 = double_integrator_spec(4);
        let prog4 = build_gbf_sdp(&spec4).unwrap();
        assert_eq!(prog4.main_identity_degree(), 4);
        let (_, main) = &prog4.clause_templates[0];
        assert_eq!(main.dim(), 6); // monomials of degree ≤ 2 in 2 variables
        assert!(prog4.multipliers.iter().all(|m| m.template.dim() == 3));
        assert_eq!(prog4.sdp.free_vars, 15);
    }

    #[test]
    fn lambda_one_rejected() {
        let mut spec = double_integrator_spec(2);
        spec.lambda = 1.0;
        assert!(matches!(build_gbf_sdp(&spec), Err(SosError::InvalidSpec(_))));
    }

    #[test]
    fn target_outside_safe_rejected() {
        let mut spec = double_integrator_spec(2);
        let n = 2;
        let p = Polynomial::var(n, 0);
        spec.target = &(&(&p - &Polynomial::constant(n, 10.0)) * &(&p - &Polynomial::constant(n, 10.0)))
            - &Polynomial::constant(n, 1.0);
        assert!(matches!(spec.validate(), Err(SosError::InvalidSpec(_))));
    }

    #[test]
    fn feasible_point_satisfies_equalities() {
        let spec = double_integrator_spec(4);
        let solved = solve_gbf(&spec, &SdpSettings::default()).unwrap();
        let (prog, sol) = (&solved.program, &solved.solution);
        assert_eq!(sol.status, SdpStatus::Feasible);
        assert!(solved.v_floor <= solved.v_max);
        for eq in &prog.sdp.equalities {
            assert!((eq.lhs.eval(&sol.free_vars, &sol.gram_blocks) - eq.rhs).abs() <= 1e-7);
        }
        let cert = extract_certificate(&spec, prog, sol).unwrap();
        assert!(cert.v.eval(&[4.0, -6.0]).unwrap() > 0.0);
        let back = Certificate::from_json(&cert.to_json()).unwrap();
        assert_eq!(back, cert);
    }
}
