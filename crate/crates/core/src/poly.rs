//! Sparse multivariate polynomials over `f64`.
//!
//! Every object in the toolkit that depends on the state (dynamics, set
//! descriptions, barrier certificates, cost templates) is a [`Polynomial`].
//! Terms are kept in a `BTreeMap` keyed by [`Monomial`], whose ordering is
//! graded-lexicographic, so coefficient enumeration is deterministic.

use std::cmp::Ordering;
use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Coefficients with absolute value below this are dropped on canonicalization.
pub const CANONICAL_EPS: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected} variables, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("polynomial must have at least one variable")]
    NoVariables,
}

/// Exponent vector of a monomial `x_1^{e_1} ... x_n^{e_n}`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    /// The monomial `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Monomial(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    /// Product of two monomials (exponent sum).
    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 1.0;
        for (&xi, &e) in x.iter().zip(&self.0) {
            if e != 0 {
                acc *= xi.powi(e as i32);
            }
        }
        acc
    }
}

impl Ord for Monomial {
    /// Graded order: total degree first, then lexicographic with larger
    /// leading exponents first (so `x1` precedes `x2`, `x1^2` precedes `x1 x2`).
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree().cmp(&other.degree()).then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_constant() {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// All monomials in `nvars` variables with total degree at most `maxdeg`,
/// in graded-lexicographic order. The count is `C(nvars + maxdeg, maxdeg)`.
pub fn monomial_basis(nvars: usize, maxdeg: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for d in 0..=maxdeg {
        let mut buf = vec![0u32; nvars];
        exponents_of_degree(nvars, d, 0, &mut buf, &mut out);
    }
    out
}

fn exponents_of_degree(nvars: usize, remaining: u32, pos: usize, buf: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    if nvars == 0 {
        if remaining == 0 {
            out.push(Monomial(Vec::new()));
        }
        return;
    }
    if pos == nvars - 1 {
        buf[pos] = remaining;
        out.push(Monomial(buf.clone()));
        return;
    }
    for e in (0..=remaining).rev() {
        buf[pos] = e;
        exponents_of_degree(nvars, remaining - e, pos + 1, buf, out);
    }
    buf[pos] = 0;
}

/// A sparse polynomial in `nvars` real variables.
#[derive(Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    /// The coordinate polynomial `x_i` (zero-based).
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::var(nvars, i), 1.0);
        p
    }

    pub fn monomial(m: Monomial, coef: f64) -> Self {
        let mut p = Self::zero(m.nvars());
        p.add_term(m, coef);
        p
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs; repeated
    /// monomials are summed.
    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut p = Self::zero(nvars);
        for (exp, c) in terms {
            if exp.len() != nvars {
                return Err(PolyError::DimensionMismatch {
                    expected: nvars,
                    found: exp.len(),
                });
            }
            p.add_term(Monomial(exp), c);
        }
        Ok(p)
    }

    /// Linear combination `Σ coefs[i] · basis[i]`.
    pub fn from_basis(nvars: usize, basis: &[Monomial], coefs: &[f64]) -> Self {
        let mut p = Self::zero(nvars);
        for (m, &c) in basis.iter().zip(coefs) {
            p.add_term(m.clone(), c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.nvars(), self.nvars);
        match self.terms.entry(m) {
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if e.get().abs() < CANONICAL_EPS {
                    e.remove();
                }
            }
            Entry::Vacant(e) => {
                if c.abs() >= CANONICAL_EPS {
                    e.insert(c);
                }
            }
        }
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= CANONICAL_EPS);
    }

    /// Drops every coefficient below [`CANONICAL_EPS`]. Idempotent.
    pub fn canonicalize(&mut self) {
        self.prune();
    }

    fn check_same(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.nvars != other.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                found: other.nvars,
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, PolyError> {
        if x.len() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                found: x.len(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation without the length check; `x` must have `nvars` entries.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, &c)| c * m.eval(x)).sum()
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.prune();
        Ok(out)
    }

    pub fn try_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.try_add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, &c)| (m.clone(), c * s)).collect(),
        };
        out.prune();
        out
    }

    pub fn try_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same(other)?;
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &other.terms {
                *acc.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        let mut out = Polynomial {
            nvars: self.nvars,
            terms: acc,
        };
        out.prune();
        Ok(out)
    }

    pub fn powi(&self, k: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Substitutes `subs[i]` for `x_i`. All substitutions must share one
    /// variable count, which becomes the result's `nvars`.
    pub fn compose(&self, subs: &[Polynomial]) -> Result<Polynomial, PolyError> {
        if subs.len() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                found: subs.len(),
            });
        }
        let target = match subs.first() {
            Some(s) => s.nvars,
            None => return Err(PolyError::NoVariables),
        };
        for s in subs {
            if s.nvars != target {
                return Err(PolyError::DimensionMismatch {
                    expected: target,
                    found: s.nvars,
                });
            }
        }
        // Cache powers of each substitution.
        let maxdeg: Vec<u32> = (0..self.nvars)
            .map(|i| self.terms.keys().map(|m| m.0[i]).max().unwrap_or(0))
            .collect();
        let powers: Vec<Vec<Polynomial>> = subs
            .iter()
            .zip(&maxdeg)
            .map(|(s, &d)| {
                let mut v = Vec::with_capacity(d as usize + 1);
                v.push(Polynomial::constant(target, 1.0));
                for k in 1..=d as usize {
                    let next = &v[k - 1] * s;
                    v.push(next);
                }
                v
            })
            .collect();
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, &c) in &self.terms {
            let mut term = Polynomial::constant(target, c);
            for (i, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    term = &term * &powers[i][e as usize];
                }
            }
            for (tm, tc) in term.terms {
                *acc.entry(tm).or_insert(0.0) += tc;
            }
        }
        let mut out = Polynomial {
            nvars: target,
            terms: acc,
        };
        out.prune();
        Ok(out)
    }

    /// Partial derivative with respect to `x_i`.
    pub fn derivative(&self, i: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, &c) in &self.terms {
            let e = m.0[i];
            if e == 0 {
                continue;
            }
            let mut exp = m.0.clone();
            exp[i] -= 1;
            out.add_term(Monomial(exp), c * e as f64);
        }
        out
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.nvars).map(|i| self.derivative(i)).collect()
    }

    /// Re-embeds the polynomial into a larger variable space: variable `i`
    /// maps to variable `offset + i` of a `new_nvars`-variable ring.
    pub fn lift(&self, new_nvars: usize, offset: usize) -> Polynomial {
        assert!(offset + self.nvars <= new_nvars);
        let mut out = Polynomial::zero(new_nvars);
        for (m, &c) in &self.terms {
            let mut exp = vec![0; new_nvars];
            exp[offset..offset + self.nvars].copy_from_slice(&m.0);
            out.add_term(Monomial(exp), c);
        }
        out
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}*{m:?}")?;
        }
        Ok(())
    }
}

// Operator sugar panics on dimension mismatch; the `try_*` forms return errors.
impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.try_add(rhs).expect("polynomial add")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.try_sub(rhs).expect("polynomial sub")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.try_mul(rhs).expect("polynomial mul")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    exp: Vec<u32>,
    coef: f64,
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    nvars: usize,
    terms: Vec<TermRepr>,
}

impl Serialize for Polynomial {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PolyRepr {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|(m, &c)| TermRepr {
                    exp: m.0.clone(),
                    coef: c,
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Polynomial {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PolyRepr::deserialize(deserializer)?;
        Polynomial::from_terms(repr.nvars, repr.terms.into_iter().map(|t| (t.exp, t.coef)))
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x(n: usize, i: usize) -> Polynomial {
        Polynomial::var(n, i)
    }

    fn random_poly(rng: &mut ChaCha8Rng, nvars: usize, deg: u32) -> Polynomial {
        let basis = monomial_basis(nvars, deg);
        let coefs: Vec<f64> = basis.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        Polynomial::from_basis(nvars, &basis, &coefs)
    }

    #[test]
    fn eval_simple() {
        let p = &(&x(2, 0) * &x(2, 0)) + &x(2, 1).scale(2.0);
        assert_eq!(p.eval(&[3.0, 1.0]).unwrap(), 11.0);
        assert_eq!(Polynomial::zero(3).eval(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(p.eval(&[1.0]), Err(PolyError::DimensionMismatch { .. })));
    }

    #[test]
    fn safe_set_boundary() {
        // p^2/64 + v^2/64 - 1
        let w = Polynomial::from_terms(
            2,
            [(vec![2, 0], 1.0 / 64.0), (vec![0, 2], 1.0 / 64.0), (vec![0, 0], -1.0)],
        )
        .unwrap();
        assert!(w.eval(&[8.0, 0.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn difference_of_squares() {
        let one = Polynomial::constant(1, 1.0);
        let a = &x(1, 0) + &one;
        let b = &x(1, 0) - &one;
        let p = &a * &b;
        let expected = Polynomial::from_terms(1, [(vec![2], 1.0), (vec![0], -1.0)]).unwrap();
        assert_eq!(p, expected);
        assert!((&p + &p.scale(-1.0)).is_zero());
    }

    #[test]
    fn mul_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_poly(&mut rng, 3, 3);
        let q = random_poly(&mut rng, 3, 3);
        let pq = &p * &q;
        for _ in 0..100 {
            let pt: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lhs = pq.eval(&pt).unwrap();
            let rhs = p.eval(&pt).unwrap() * q.eval(&pt).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn compose_examples() {
        let sub = &x(2, 0) - &x(2, 1).scale(0.1);
        let p = x(2, 0);
        assert_eq!(p.compose(&[sub.clone(), x(2, 1)]).unwrap(), sub);

        let sq = &x(1, 0) * &x(1, 0);
        let shifted = &x(1, 0) + &Polynomial::constant(1, 1.0);
        let r = sq.compose(&[shifted]).unwrap();
        let expected = Polynomial::from_terms(1, [(vec![2], 1.0), (vec![1], 2.0), (vec![0], 1.0)]).unwrap();
        assert_eq!(r, expected);

        assert!(p.compose(&[x(2, 0)]).is_err());
        assert!(p.compose(&[x(2, 0), x(3, 0)]).is_err());
    }

    #[test]
    fn compose_vanderpol_closed_loop() {
        // v∘f for the reversed-time Van der Pol map with zero input.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dt = 0.05;
        let x1 = x(2, 0);
        let x2 = x(2, 1);
        let f1 = &x1 - &x2.scale(dt);
        let one = Polynomial::constant(2, 1.0);
        let inner = &(&(&one - &(&x1 * &x1)) * &x2) - &x1;
        let f2 = &x2 - &inner.scale(dt);
        let v = random_poly(&mut rng, 2, 4);
        let vf = v.compose(&[f1.clone(), f2.clone()]).unwrap();
        for _ in 0..200 {
            let pt = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let img = [f1.eval(&pt).unwrap(), f2.eval(&pt).unwrap()];
            let direct = v.eval(&img).unwrap();
            assert!((vf.eval(&pt).unwrap() - direct).abs() <= 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn basis_counts_and_order() {
        let b = monomial_basis(2, 2);
        let exps: Vec<Vec<u32>> = b.iter().map(|m| m.exponents().to_vec()).collect();
        assert_eq!(
            exps,
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        assert_eq!(monomial_basis(3, 2).len(), 10);
        assert_eq!(monomial_basis(1, 0).len(), 1);
        assert_eq!(monomial_basis(3, 6).len(), 84);
        let mut sorted = monomial_basis(3, 4);
        let orig = sorted.clone();
        sorted.sort();
        assert_eq!(sorted, orig);
    }

    #[test]
    fn derivative_and_lift() {
        let p = Polynomial::from_terms(2, [(vec![2, 1], 3.0), (vec![0, 1], 1.0)]).unwrap();
        let dp = p.derivative(0);
        assert_eq!(dp, Polynomial::from_terms(2, [(vec![1, 1], 6.0)]).unwrap());
        let lifted = p.lift(3, 1);
        assert_eq!(lifted.eval(&[9.0, 2.0, 1.0]).unwrap(), p.eval(&[2.0, 1.0]).unwrap());
    }

    #[test]
    fn json_schema() {
        let p = Polynomial::from_terms(2, [(vec![2, 0], 1.5), (vec![0, 0], -1.0)]).unwrap();
        let s = serde_json::to_value(&p).unwrap();
        assert_eq!(s["nvars"], 2);
        assert_eq!(s["terms"][0]["exp"], serde_json::json!([0, 0]));
        assert_eq!(s["terms"][0]["coef"], -1.0);
        let back: Polynomial = serde_json::from_value(s).unwrap();
        assert_eq!(back, p);
        let bad = serde_json::json!({"nvars": 2, "terms": [{"exp": [1], "coef": 1.0}]});
        assert!(serde_json::from_value::<Polynomial>(bad).is_err());
    }

    proptest! {
        #[test]
        fn ring_laws_pointwise(seed in 0u64..10_000, px in -1.5f64..1.5, py in -1.5f64..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_poly(&mut rng, 2, 3);
            let q = random_poly(&mut rng, 2, 2);
            let pt = [px, py];
            let prod = (&p * &q).eval(&pt).unwrap();
            let direct = p.eval(&pt).unwrap() * q.eval(&pt).unwrap();
            prop_assert!((prod - direct).abs() <= 1e-10 * direct.abs().max(1.0));
            let sum = (&p + &q).eval(&pt).unwrap();
            prop_assert!((sum - p.eval(&pt).unwrap() - q.eval(&pt).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn identity_substitution_is_exact(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_poly(&mut rng, 3, 3);
            let ids: Vec<Polynomial> = (0..3).map(|i| x(3, i)).collect();
            prop_assert_eq!(p.compose(&ids).unwrap(), p.clone());
            let mut twice = p.clone();
            twice.canonicalize();
            prop_assert_eq!(twice, p);
        }
    }
}
