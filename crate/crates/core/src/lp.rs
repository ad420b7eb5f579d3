//! Dense bounded-variable primal simplex for small linear programs.
//!
//! Minimises `c·x` subject to rows `a·x {=, >=, <=} b` and `lo <= x <= hi`
//! with finite lower bounds. Entering and leaving choices follow Bland's rule,
//! so the method terminates on degenerate problems. An optional secondary cost
//! breaks ties among optimal vertices: once the primary optimum is reached,
//! every nonbasic column with a nonzero reduced cost is frozen and the
//! secondary cost is minimised over the remaining optimal face.

use thiserror::Error;

const PIVOT_EPS: f64 = 1e-11;
const COST_EPS: f64 = 1e-10;
const FEAS_EPS: f64 = 1e-9;

fn cost_tolerance(cost: &[f64]) -> f64 {
    COST_EPS * cost.iter().fold(1.0_f64, |m, c| m.max(c.abs()))
}
const RATIO_TIE: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Eq,
    Ge,
    Le,
}

#[derive(Clone, Debug)]
pub struct Row {
    pub coeffs: Vec<f64>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    pub costs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible (phase-one residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("malformed linear program: {0}")]
    Malformed(String),
    #[error("pivot limit reached")]
    IterationLimit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Status {
    Basic(usize),
    AtLower,
    AtUpper,
}

struct Tableau {
    /// `B⁻¹A`, one row per constraint, `ncols` entries each.
    rows: Vec<Vec<f64>>,
    ncols: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    status: Vec<Status>,
    basis: Vec<usize>,
    pivots: usize,
}

impl Tableau {
    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (i, row) in self.rows.iter().enumerate() {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (dj, a) in d.iter_mut().zip(row) {
                    *dj -= cb * a;
                }
            }
        }
        d
    }

    /// Runs primal simplex iterations for `cost` until optimal.
    fn optimise(&mut self, cost: &[f64]) -> Result<(), LpError> {
        let limit = 50 * (self.ncols + self.rows.len()).pow(2) + 1000;
        let eps = cost_tolerance(cost);
        loop {
            if self.pivots > limit {
                return Err(LpError::IterationLimit);
            }
            let d = self.reduced_costs(cost);
            // Bland: lowest-index improving column.
            let entering = (0..self.ncols).find(|&j| {
                if self.upper[j] - self.lower[j] <= 0.0 {
                    return false;
                }
                match self.status[j] {
                    Status::AtLower => d[j] < -eps,
                    Status::AtUpper => d[j] > eps,
                    Status::Basic(_) => false,
                }
            });
            let Some(j) = entering else {
                return Ok(());
            };
            let dir = if self.status[j] == Status::AtLower { 1.0 } else { -1.0 };

            let mut step = self.upper[j] - self.lower[j];
            let mut leaving: Option<(usize, bool)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                let a = row[j];
                if a.abs() <= PIVOT_EPS {
                    continue;
                }
                let b = self.basis[i];
                let rate = -dir * a;
                let (limit, to_upper) = if rate < 0.0 {
                    ((self.x[b] - self.lower[b]) / -rate, false)
                } else if self.upper[b].is_finite() {
                    ((self.upper[b] - self.x[b]) / rate, true)
                } else {
                    continue;
                };
                let limit = limit.max(0.0);
                let better = if limit < step - RATIO_TIE {
                    true
                } else if limit <= step + RATIO_TIE {
                    // Ties go to the lowest-index basic variable.
                    leaving.is_none_or(|(r, _)| b < self.basis[r])
                } else {
                    false
                };
                if better {
                    step = limit;
                    leaving = Some((i, to_upper));
                }
            }
            if !step.is_finite() {
                return Err(LpError::Unbounded);
            }
            for (i, row) in self.rows.iter().enumerate() {
                let b = self.basis[i];
                self.x[b] -= dir * row[j] * step;
            }
            self.x[j] += dir * step;
            self.pivots += 1;

            match leaving {
                None => {
                    // Bound flip.
                    self.status[j] = if dir > 0.0 { Status::AtUpper } else { Status::AtLower };
                    self.x[j] = if dir > 0.0 { self.upper[j] } else { self.lower[j] };
                }
                Some((r, to_upper)) => {
                    let out = self.basis[r];
                    self.x[out] = if to_upper { self.upper[out] } else { self.lower[out] };
                    self.status[out] = if to_upper { Status::AtUpper } else { Status::AtLower };
                    self.pivot(r, j);
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let p = self.rows[r][j];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[j];
            if f != 0.0 {
                for (v, pr) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                row[j] = 0.0;
            }
        }
        self.basis[r] = j;
        self.status[j] = Status::Basic(r);
    }
}

impl LinearProgram {
    pub fn num_vars(&self) -> usize {
        self.costs.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.costs.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.costs.len();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Malformed("bound vectors differ in length from costs".into()));
        }
        for j in 0..n {
            if !self.lower[j].is_finite() {
                return Err(LpError::Malformed(format!("variable {j} has no finite lower bound")));
            }
            if self.upper[j] < self.lower[j] {
                return Err(LpError::Infeasible {
                    residual: self.lower[j] - self.upper[j],
                });
            }
        }
        if let Some(r) = self.rows.iter().position(|r| r.coeffs.len() != n) {
            return Err(LpError::Malformed(format!("row {r} has the wrong width")));
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        self.solve_lexicographic(None)
    }

    /// Solves for the primary cost, then minimises `secondary` over the optimal face.
    pub fn solve_lexicographic(&self, secondary: Option<&[f64]>) -> Result<LpSolution, LpError> {
        self.check()?;
        let n = self.num_vars();
        let m = self.rows.len();
        let slack_cols: Vec<Option<usize>> = {
            let mut next = n;
            self.rows
                .iter()
                .map(|r| match r.sense {
                    Sense::Eq => None,
                    _ => {
                        next += 1;
                        Some(next - 1)
                    }
                })
                .collect()
        };
        let n_slack = slack_cols.iter().flatten().count();
        let art0 = n + n_slack;
        let ncols = art0 + m;

        let mut lower = vec![0.0; ncols];
        let mut upper = vec![f64::INFINITY; ncols];
        lower[..n].copy_from_slice(&self.lower);
        upper[..n].copy_from_slice(&self.upper);

        let mut x = vec![0.0; ncols];
        x[..n].copy_from_slice(&self.lower);
        let mut status = vec![Status::AtLower; ncols];

        let mut rows = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        for (i, row) in self.rows.iter().enumerate() {
            let mut t = vec![0.0; ncols];
            t[..n].copy_from_slice(&row.coeffs);
            if let Some(s) = slack_cols[i] {
                t[s] = if row.sense == Sense::Ge { -1.0 } else { 1.0 };
            }
            let resid = row.rhs - row.coeffs.iter().zip(&self.lower).map(|(a, l)| a * l).sum::<f64>();
            let sign = if resid < 0.0 { -1.0 } else { 1.0 };
            // Scale the row so the artificial column is +1.
            for v in t.iter_mut() {
                *v *= sign;
            }
            t[art0 + i] = 1.0;
            x[art0 + i] = resid.abs();
            status[art0 + i] = Status::Basic(i);
            basis.push(art0 + i);
            rows.push(t);
        }

        let mut tab = Tableau {
            rows,
            ncols,
            lower,
            upper,
            x,
            status,
            basis,
            pivots: 0,
        };

        let mut phase1 = vec![0.0; ncols];
        for c in phase1.iter_mut().skip(art0) {
            *c = 1.0;
        }
        tab.optimise(&phase1)?;
        let residual: f64 = tab.x[art0..].iter().sum();
        let scale = 1.0 + self.rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
        if residual > FEAS_EPS * scale {
            return Err(LpError::Infeasible { residual });
        }
        // Pin artificials at zero and pivot out any that remain basic.
        for a in art0..ncols {
            tab.upper[a] = 0.0;
            tab.x[a] = 0.0;
        }
        for r in 0..m {
            if tab.basis[r] >= art0 {
                if let Some(j) = (0..art0).find(|&j| !matches!(tab.status[j], Status::Basic(_)) && tab.rows[r][j].abs() > 1e-9) {
                    tab.pivot(r, j);
                }
            }
        }

        let mut cost = vec![0.0; ncols];
        cost[..n].copy_from_slice(&self.costs);
        tab.optimise(&cost)?;

        if let Some(sec) = secondary {
            if sec.len() != n {
                return Err(LpError::Malformed("secondary cost has the wrong width".into()));
            }
            let d = tab.reduced_costs(&cost);
            let eps = cost_tolerance(&cost);
            for j in 0..ncols {
                if !matches!(tab.status[j], Status::Basic(_)) && d[j].abs() > eps {
                    tab.lower[j] = tab.x[j];
                    tab.upper[j] = tab.x[j];
                }
            }
            let mut sec_cost = vec![0.0; ncols];
            sec_cost[..n].copy_from_slice(sec);
            tab.optimise(&sec_cost)?;
        }

        let mut xs = tab.x[..n].to_vec();
        for (j, v) in xs.iter_mut().enumerate() {
            // Snap rounding noise onto bounds.
            if (*v - self.lower[j]).abs() < 1e-12 {
                *v = self.lower[j];
            } else if (*v - self.upper[j]).abs() < 1e-12 {
                *v = self.upper[j];
            }
        }
        Ok(LpSolution {
            objective: self.objective(&xs),
            x: xs,
            pivots: tab.pivots,
        })
    }
}
