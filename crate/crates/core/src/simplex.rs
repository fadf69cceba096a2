//! Dense bounded-variable primal simplex.
//!
//! Solves `min c.x` subject to `lo_i <= a_i.x <= hi_i` and `l_j <= x_j <= u_j`.
//! Every row gets a slack `s_i = a_i.x` carrying the row bounds, so the working
//! problem is `[A  -I] (x, s) = 0` over boxed variables. Phase one minimises
//! the sum of artificials, phase two the real objective. Nonbasic variables
//! sit at one of their bounds; the ratio test allows bound flips.
//!
//! Sized for the decoy programs (a few hundred columns, under two hundred
//! rows), where a full tableau is cheap. Basic values are recomputed from an
//! LU solve of the final basis so reported residuals do not carry pivot
//! round-off.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Largest violation of a row or column bound at the returned point.
    pub max_residual: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("infeasible: phase-one residual {residual:.3e}, unsatisfied rows {rows:?}")]
    Infeasible { residual: f64, rows: Vec<usize> },
    #[error("objective unbounded")]
    Unbounded,
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
    #[error("malformed program: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub pivot_tol: f64,
    pub max_iterations: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            primal_tol: 1e-10,
            dual_tol: 1e-11,
            pivot_tol: 1e-11,
            max_iterations: 50_000,
        }
    }
}

impl LinearProgram {
    pub fn new(n: usize) -> Self {
        LinearProgram {
            cost: vec![0.0; n],
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
            rows: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, lo: f64, hi: f64) {
        self.rows.push(Row { coeffs, lo, hi });
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Malformed("bound vectors differ in length from cost".into()));
        }
        for (j, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(LpError::Malformed(format!("column {j} has bounds [{l}, {u}]")));
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.coeffs.len() != n {
                return Err(LpError::Malformed(format!("row {i} has {} coefficients", r.coeffs.len())));
            }
            if r.lo.is_nan() || r.hi.is_nan() || r.lo > r.hi {
                return Err(LpError::Malformed(format!("row {i} has bounds [{}, {}]", r.lo, r.hi)));
            }
            if r.coeffs.iter().any(|c| !c.is_finite()) {
                return Err(LpError::Malformed(format!("row {i} has a non-finite coefficient")));
            }
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        self.solve_with(&SimplexOptions::default())
    }

    pub fn solve_with(&self, opts: &SimplexOptions) -> Result<LpSolution, LpError> {
        self.check()?;
        let mut t = Tableau::build(self);
        t.phase_one(opts)?;
        t.phase_two(self, opts)?;
        t.polish();
        let x = t.x[..self.num_vars()].to_vec();
        let objective = x.iter().zip(&self.cost).map(|(a, b)| a * b).sum();
        let max_residual = self.residual(&x);
        Ok(LpSolution {
            x,
            objective,
            iterations: t.iterations,
            max_residual,
        })
    }

    /// Largest bound violation of `x` over rows and columns.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        for r in &self.rows {
            let ax: f64 = r.coeffs.iter().zip(x).map(|(a, b)| a * b).sum();
            worst = worst.max(r.lo - ax).max(ax - r.hi);
        }
        worst.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Basic(usize),
    AtLower,
    AtUpper,
    /// Free nonbasic variable resting at zero.
    Free,
}

struct Tableau {
    m: usize,
    /// Structural + slack columns; artificials follow.
    n_real: usize,
    ncols: usize,
    /// Row-major `m x ncols`, equal to `B^{-1} [A -I  D]`.
    t: Vec<f64>,
    /// Original working matrix, kept for the final LU polish.
    a0: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    status: Vec<Status>,
    basis: Vec<usize>,
    iterations: usize,
    degenerate_streak: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars();
        let m = lp.rows.len();
        let n_real = n + m;
        let ncols = n_real + m;
        let mut lower = Vec::with_capacity(ncols);
        let mut upper = Vec::with_capacity(ncols);
        lower.extend_from_slice(&lp.lower);
        upper.extend_from_slice(&lp.upper);
        for r in &lp.rows {
            lower.push(r.lo);
            upper.push(r.hi);
        }
        let mut x = vec![0.0; ncols];
        let mut status = vec![Status::AtLower; ncols];
        for j in 0..n_real {
            let (l, u) = (lower[j], upper[j]);
            if l.is_finite() {
                x[j] = l;
                status[j] = Status::AtLower;
            } else if u.is_finite() {
                x[j] = u;
                status[j] = Status::AtUpper;
            } else {
                x[j] = 0.0;
                status[j] = Status::Free;
            }
        }
        let mut a0 = vec![0.0; m * ncols];
        for (i, r) in lp.rows.iter().enumerate() {
            a0[i * ncols..i * ncols + n].copy_from_slice(&r.coeffs);
            a0[i * ncols + n + i] = -1.0;
        }
        // Artificial signs make the starting basic values non-negative.
        let mut basis = Vec::with_capacity(m);
        for i in 0..m {
            let row = &a0[i * ncols..i * ncols + n_real];
            let resid: f64 = -row.iter().zip(&x[..n_real]).map(|(a, b)| a * b).sum::<f64>();
            let sign = if resid >= 0.0 { 1.0 } else { -1.0 };
            let j = n_real + i;
            a0[i * ncols + j] = sign;
            x[j] = resid.abs();
            lower.push(0.0);
            upper.push(f64::INFINITY);
            status[j] = Status::Basic(i);
            basis.push(j);
        }
        // B = diag(sign), so B^{-1} scales each row by its sign.
        let mut t = a0.clone();
        for i in 0..m {
            let s = a0[i * ncols + n_real + i];
            for v in &mut t[i * ncols..(i + 1) * ncols] {
                *v *= s;
            }
        }
        Tableau {
            m,
            n_real,
            ncols,
            t,
            a0,
            lower,
            upper,
            x,
            status,
            basis,
            iterations: 0,
            degenerate_streak: 0,
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.ncols + j]
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * self.ncols..(i + 1) * self.ncols];
                for (dj, &a) in d.iter_mut().zip(row) {
                    *dj -= cb * a;
                }
            }
        }
        d
    }

    fn choose_entering(&self, d: &[f64], allowed: usize, tol: f64) -> Option<(usize, f64)> {
        let bland = self.degenerate_streak > 50;
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = 0.0;
        for j in 0..allowed {
            let dir = match self.status[j] {
                Status::Basic(_) => continue,
                Status::AtLower if d[j] < -tol => 1.0,
                Status::AtUpper if d[j] > tol => -1.0,
                Status::Free if d[j].abs() > tol => -d[j].signum(),
                _ => continue,
            };
            if self.lower[j] == self.upper[j] {
                continue;
            }
            if bland {
                return Some((j, dir));
            }
            let score = d[j].abs();
            if score > best_score {
                best_score = score;
                best = Some((j, dir));
            }
        }
        best
    }

    /// One simplex iteration. Returns false at optimality.
    fn iterate(&mut self, cost: &[f64], allowed: usize, opts: &SimplexOptions) -> Result<bool, LpError> {
        let d = self.reduced_costs(cost);
        let Some((j, dir)) = self.choose_entering(&d, allowed, opts.dual_tol) else {
            return Ok(false);
        };
        // Ratio test: basic x_B[i] moves by -dir * alpha_i * step.
        let mut step = self.upper[j] - self.lower[j];
        let mut leave: Option<(usize, bool)> = None;
        let mut best_alpha = 0.0;
        for i in 0..self.m {
            let alpha = self.at(i, j);
            if alpha.abs() <= opts.pivot_tol {
                continue;
            }
            let k = self.basis[i];
            let rate = -dir * alpha;
            let (limit, to_upper) = if rate > 0.0 {
                ((self.upper[k] - self.x[k]) / rate, true)
            } else {
                ((self.lower[k] - self.x[k]) / rate, false)
            };
            if !limit.is_finite() {
                continue;
            }
            let limit = limit.max(0.0);
            let tol = 1e-12 * (1.0 + limit);
            // Among near-ties prefer the largest pivot element.
            if limit < step - tol || (limit <= step + tol && alpha.abs() > best_alpha) {
                step = step.min(limit);
                leave = Some((i, to_upper));
                best_alpha = alpha.abs();
            }
        }
        if !step.is_finite() {
            return Err(LpError::Unbounded);
        }
        self.iterations += 1;
        if step <= opts.primal_tol {
            self.degenerate_streak += 1;
        } else {
            self.degenerate_streak = 0;
        }
        for i in 0..self.m {
            let k = self.basis[i];
            self.x[k] -= dir * self.at(i, j) * step;
        }
        self.x[j] += dir * step;
        match leave {
            None => {
                self.status[j] = if dir > 0.0 { Status::AtUpper } else { Status::AtLower };
                self.x[j] = if dir > 0.0 { self.upper[j] } else { self.lower[j] };
            }
            Some((r, to_upper)) => {
                let k = self.basis[r];
                self.x[k] = if to_upper { self.upper[k] } else { self.lower[k] };
                self.status[k] = if to_upper { Status::AtUpper } else { Status::AtLower };
                self.pivot(r, j);
            }
        }
        Ok(true)
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let nc = self.ncols;
        let p = self.at(r, j);
        for v in &mut self.t[r * nc..(r + 1) * nc] {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.t[r * nc..(r + 1) * nc].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * nc + j];
            if f != 0.0 {
                let row = &mut self.t[i * nc..(i + 1) * nc];
                for (v, &pr) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pr;
                }
                row[j] = 0.0;
            }
        }
        self.basis[r] = j;
        self.status[j] = Status::Basic(r);
    }

    fn phase_one(&mut self, opts: &SimplexOptions) -> Result<(), LpError> {
        let mut cost = vec![0.0; self.ncols];
        for c in &mut cost[self.n_real..] {
            *c = 1.0;
        }
        while self.iterate(&cost, self.ncols, opts)? {
            if self.iterations > opts.max_iterations {
                return Err(LpError::IterationLimit(opts.max_iterations));
            }
        }
        let residual: f64 = self.x[self.n_real..].iter().sum();
        let scale = 1.0 + self.x[..self.n_real].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if residual > opts.primal_tol * scale * self.m.max(1) as f64 {
            let rows = (0..self.m)
                .filter(|&i| self.x[self.n_real + i] > opts.primal_tol)
                .collect();
            return Err(LpError::Infeasible { residual, rows });
        }
        // Drive zero-valued artificials out of the basis where possible.
        for r in 0..self.m {
            let k = self.basis[r];
            if k < self.n_real {
                continue;
            }
            let mut best = None;
            let mut best_a = opts.pivot_tol * 1e3;
            for j in 0..self.n_real {
                if matches!(self.status[j], Status::Basic(_)) {
                    continue;
                }
                let a = self.at(r, j).abs();
                if a > best_a {
                    best_a = a;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                self.x[k] = 0.0;
                self.status[k] = Status::AtLower;
                self.pivot(r, j);
            }
        }
        for j in self.n_real..self.ncols {
            self.upper[j] = 0.0;
            if !matches!(self.status[j], Status::Basic(_)) {
                self.x[j] = 0.0;
            }
        }
        Ok(())
    }

    fn phase_two(&mut self, lp: &LinearProgram, opts: &SimplexOptions) -> Result<(), LpError> {
        let mut cost = vec![0.0; self.ncols];
        cost[..lp.num_vars()].copy_from_slice(&lp.cost);
        self.degenerate_streak = 0;
        while self.iterate(&cost, self.n_real, opts)? {
            if self.iterations > opts.max_iterations {
                return Err(LpError::IterationLimit(opts.max_iterations));
            }
        }
        Ok(())
    }

    /// Recompute basic values by solving `B x_B = -N x_N` on the original matrix.
    fn polish(&mut self) {
        let m = self.m;
        if m == 0 {
            return;
        }
        let nc = self.ncols;
        let b = DMatrix::from_fn(m, m, |i, k| self.a0[i * nc + self.basis[k]]);
        let mut rhs = DVector::zeros(m);
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..nc {
                if !matches!(self.status[j], Status::Basic(_)) {
                    s -= self.a0[i * nc + j] * self.x[j];
                }
            }
            rhs[i] = s;
        }
        if let Some(sol) = b.lu().solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                for (k, &j) in self.basis.iter().enumerate() {
                    // Keep polished values only inside the (tolerance-widened) bounds.
                    let v = sol[k];
                    let (l, u) = (self.lower[j], self.upper[j]);
                    let slack = 1e-9 * (1.0 + v.abs());
                    if v >= l - slack && v <= u + slack {
                        self.x[j] = v;
                    }
                }
            }
        }
    }
}
