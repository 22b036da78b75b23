//! Dense two-phase tableau simplex with Bland's rule. Slow but simple; used
//! to cross-check the interior-point LP path.

use super::lp::{LpError, LpProblem};

const EPS: f64 = 1e-11;

struct Tableau {
    /// `m` constraint rows followed by the objective row; last column is the rhs.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.t[r][self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i != r {
                let f = row[c];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        self.basis[r] = c;
    }

    /// Runs simplex on the objective row over columns `0..allowed`.
    fn optimize(&mut self, allowed: usize) -> Result<(), LpError> {
        let m = self.basis.len();
        for _ in 0..100_000 {
            let obj = &self.t[m];
            let Some(c) = (0..allowed).find(|&j| obj[j] < -EPS) else {
                return Ok(());
            };
            let mut best: Option<(f64, usize, usize)> = None;
            for r in 0..m {
                let a = self.t[r][c];
                if a > EPS {
                    let ratio = self.rhs(r) / a;
                    let better = match best {
                        None => true,
                        Some((br, _, bb)) => ratio < br - EPS || (ratio <= br + EPS && self.basis[r] < bb),
                    };
                    if better {
                        best = Some((ratio, r, self.basis[r]));
                    }
                }
            }
            let Some((_, r, _)) = best else {
                return Err(LpError::Unbounded);
            };
            self.pivot(r, c);
        }
        Err(LpError::Numerical("simplex iteration limit".into()))
    }
}

/// Minimizes the LP; returns the optimal point and value.
pub fn simplex(p: &LpProblem) -> Result<(Vec<f64>, f64), LpError> {
    p.validate()?;
    let n = p.num_vars();
    // Rows g x ≤ h with bounds folded in.
    let mut g = p.a.clone();
    let mut h = p.b.clone();
    for j in 0..n {
        let mut e = vec![0.0; n];
        if p.upper[j].is_finite() {
            e[j] = 1.0;
            g.push(e.clone());
            h.push(p.upper[j]);
        }
        if p.lower[j].is_finite() {
            e[j] = -1.0;
            g.push(e);
            h.push(-p.lower[j]);
        }
    }
    let m = g.len();
    // Columns: x⁺ (n), x⁻ (n), slacks (m), artificials (m).
    let cols = 2 * n + 2 * m;
    let mut t = vec![vec![0.0; cols + 1]; m + 1];
    for i in 0..m {
        let sign = if h[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = sign * g[i][j];
            t[i][n + j] = -sign * g[i][j];
        }
        t[i][2 * n + i] = sign;
        t[i][2 * n + m + i] = 1.0;
        t[i][cols] = sign * h[i];
    }
    // Phase 1 objective: sum of artificials, expressed in non-basic columns.
    for i in 0..m {
        for j in 0..=cols {
            if !(2 * n + m..2 * n + 2 * m).contains(&j) {
                t[m][j] -= t[i][j];
            }
        }
    }
    let mut tab = Tableau {
        t,
        basis: (0..m).map(|i| 2 * n + m + i).collect(),
        cols,
    };
    tab.optimize(2 * n + m)?;
    if -tab.t[m][cols] > 1e-9 {
        return Err(LpError::Infeasible);
    }
    // Drive remaining artificials out of the basis.
    for r in 0..m {
        if tab.basis[r] >= 2 * n + m {
            if let Some(c) = (0..2 * n + m).find(|&c| tab.t[r][c].abs() > 1e-9) {
                tab.pivot(r, c);
            }
        }
    }
    // Phase 2 objective row.
    let mut obj = vec![0.0; cols + 1];
    for j in 0..n {
        obj[j] = p.objective[j];
        obj[n + j] = -p.objective[j];
    }
    for r in 0..m {
        let b = tab.basis[r];
        let f = obj[b];
        if f != 0.0 {
            for j in 0..=cols {
                obj[j] -= f * tab.t[r][j];
            }
        }
    }
    tab.t[m] = obj;
    tab.optimize(2 * n + m)?;
    let mut x = vec![0.0; n];
    for r in 0..m {
        let b = tab.basis[r];
        if b < n {
            x[b] += tab.rhs(r);
        } else if b < 2 * n {
            x[b - n] -= tab.rhs(r);
        }
    }
    let value = p.evaluate(&x);
    Ok((x, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_instance() {
        // max 3x + 5y s.t. x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18, x, y ≥ 0 → (2, 6), 36.
        let mut p = LpProblem::new(vec![-3.0, -5.0]);
        p.push_row(vec![1.0, 0.0], 4.0);
        p.push_row(vec![0.0, 2.0], 12.0);
        p.push_row(vec![3.0, 2.0], 18.0);
        p.lower = vec![0.0, 0.0];
        let (x, v) = simplex(&p).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-9 && (x[1] - 6.0).abs() < 1e-9);
        assert!((v + 36.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut p = LpProblem::new(vec![1.0]);
        p.push_row(vec![1.0], -1.0);
        p.push_row(vec![-1.0], -1.0);
        assert_eq!(simplex(&p).unwrap_err(), LpError::Infeasible);
        let mut q = LpProblem::new(vec![-1.0]);
        q.push_row(vec![-1.0], 0.0);
        assert_eq!(simplex(&q).unwrap_err(), LpError::Unbounded);
    }
}
