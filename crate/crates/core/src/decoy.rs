//! Three-intensity decoy-state bounds and the asymptotic secret key rate.
//!
//! The observed gain of every intensity pair is a Poisson mixture of
//! photon-number-pair yields,
//!
//! ```text
//! Q(a, b) = sum_{n,m} P_a(n) P_b(m) Y_nm,        E(a, b) Q(a, b) = sum P_a(n) P_b(m) B_nm
//! ```
//!
//! with `0 <= B_nm <= Y_nm <= 1`. Truncating at `n, m <= N_cut` leaves a
//! residual Poisson mass `tail`, which widens each equality into the interval
//! `[Q - tail, Q + tail]`. Linear programs over these intervals give a
//! strictly valid lower bound on `Y11` and upper bound on `B11`.
//!
//! Observed gains span many decades, so every row is divided by its
//! right-hand side and every column is rescaled by the largest value it can
//! take given the gain rows alone (all coefficients are non-negative, so
//! `Y_nm <= (Q + tail) / w_nm` for every cell). Without this the programs
//! are numerically degenerate at the small end of the range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{binary_entropy, poisson_pn, Basis, ByIntensity, GainTable, Intensity};
use crate::simplex::{LinearProgram, LpError};

/// Error-correction inefficiency used when none is configured.
pub const DEFAULT_EC_EFFICIENCY: f64 = 1.12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoyError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{basis}-basis gain data inconsistent with any yield assignment; violated: {}; smallest consistent relative slack {min_rel_slack:?}", fmt_refs(violated))]
    Infeasible {
        basis: Basis,
        violated: Vec<ConstraintRef>,
        min_rel_slack: Option<f64>,
    },
    #[error("linear program failed: {0}")]
    Lp(#[from] LpError),
}

fn fmt_refs(v: &[ConstraintRef]) -> String {
    if v.is_empty() {
        return "(none isolated)".into();
    }
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    Gain,
    ErrorGain,
    ErrorBelowYield,
}

/// Identifies one constraint of the decoy program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintRef {
    pub kind: ConstraintKind,
    pub ia: Intensity,
    pub ib: Intensity,
}

impl std::fmt::Display for ConstraintRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = match self.kind {
            ConstraintKind::Gain => "Q",
            ConstraintKind::ErrorGain => "EQ",
            ConstraintKind::ErrorBelowYield => "B<=Y",
        };
        write!(f, "{k}[{}{}]", self.ia, self.ib)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    MinY11,
    MaxB11,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyOptions {
    /// Photon-number cutoff; `None` picks the smallest value >= 10 meeting `eps_tail`.
    pub n_cut: Option<u32>,
    pub eps_tail: f64,
    /// Extra relative width `eps * value` added to each constraint interval.
    pub rel_slack: f64,
    pub f: f64,
}

impl Default for DecoyOptions {
    fn default() -> Self {
        DecoyOptions {
            n_cut: None,
            eps_tail: 1e-10,
            rel_slack: 0.0,
            f: DEFAULT_EC_EFFICIENCY,
        }
    }
}

/// Truncated photon-number-pair yields, row-major over `(n, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldModel {
    pub n_cut: u32,
    pub y: Vec<f64>,
    /// Residual Poisson mass beyond the cutoff for the intensities in use.
    pub tail_mass: f64,
}

impl YieldModel {
    pub fn get(&self, n: u32, m: u32) -> f64 {
        self.y[(n * (self.n_cut + 1) + m) as usize]
    }

    /// Truncated gain `sum P_a(n) P_b(m) Y_nm`.
    pub fn gain(&self, mu_a: f64, mu_b: f64) -> f64 {
        let w = pair_weights(mu_a, mu_b, self.n_cut);
        w.iter().zip(&self.y).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyResult {
    pub s11_z_lower: f64,
    pub e11_x_upper: f64,
    pub y11_z_lower: f64,
    pub y11_x_lower: f64,
    pub b11_x_upper: f64,
    pub r: f64,
    pub r_clamped: f64,
    /// Set when the X-basis single-photon yield bound is zero.
    pub degenerate: bool,
}

/// Smallest cutoff >= 10 whose Poisson tail is below `eps_tail` for `mu_max`.
pub fn choose_n_cut(mu_max: f64, eps_tail: f64) -> u32 {
    let mut n = 10;
    loop {
        let tail = 1.0 - (0..=n).map(|k| poisson_pn(mu_max, k)).sum::<f64>();
        if tail < eps_tail || n >= 60 {
            return n;
        }
        n += 1;
    }
}

fn pair_weights(mu_a: f64, mu_b: f64, n_cut: u32) -> Vec<f64> {
    let pa: Vec<f64> = (0..=n_cut).map(|n| poisson_pn(mu_a, n)).collect();
    let pb: Vec<f64> = (0..=n_cut).map(|n| poisson_pn(mu_b, n)).collect();
    let mut w = Vec::with_capacity(pa.len() * pb.len());
    for a in &pa {
        for b in &pb {
            w.push(a * b);
        }
    }
    w
}

fn check_mu(side: &str, mu: &ByIntensity<f64>) -> Result<(), DecoyError> {
    let (s, d, v) = (mu[Intensity::Signal], mu[Intensity::Decoy], mu[Intensity::Vacuum]);
    if !(s > d && d > v && v >= 0.0) || !s.is_finite() {
        return Err(DecoyError::Precondition(format!(
            "{side} intensities must satisfy signal > decoy > vacuum >= 0, got {s}, {d}, {v}"
        )));
    }
    Ok(())
}

/// A scaled decoy program together with the column scales needed to map
/// the solution back to yields.
#[derive(Debug, Clone)]
pub struct DecoyProgram {
    pub lp: LinearProgram,
    /// `Y_nm = y_scale[k] * z_k`.
    pub y_scale: Vec<f64>,
    /// `B_nm = b_scale[k] * z_{nv + k}`; empty without error variables.
    pub b_scale: Vec<f64>,
    pub rows: Vec<ConstraintRef>,
    pub n_cut: u32,
    /// Index of the slack variable when built for the minimal-slack diagnostic.
    pub slack_var: Option<usize>,
}

impl DecoyProgram {
    pub fn idx11(&self) -> usize {
        (self.n_cut + 2) as usize
    }

    pub fn num_yields(&self) -> usize {
        ((self.n_cut + 1) * (self.n_cut + 1)) as usize
    }
}

struct Target {
    kind: ConstraintKind,
    ia: Intensity,
    ib: Intensity,
    w: Vec<f64>,
    val: f64,
    tail: f64,
}

/// Build the decoy program for one basis.
///
/// With `with_errors` the error yields `B_nm` are added along with the `E*Q`
/// rows and `B_nm <= Y_nm`. With `slack_cap = Some(c)` a variable
/// `eps in [0, c]` scales the interval widths instead of `rel_slack`.
pub fn build_program(
    gains: &GainTable,
    mu_a: &ByIntensity<f64>,
    mu_b: &ByIntensity<f64>,
    basis: Basis,
    with_errors: bool,
    opts: &DecoyOptions,
    slack_cap: Option<f64>,
) -> Result<DecoyProgram, DecoyError> {
    check_mu("alice", mu_a)?;
    check_mu("bob", mu_b)?;
    let mu_max = mu_a[Intensity::Signal].max(mu_b[Intensity::Signal]);
    let n_cut = opts.n_cut.unwrap_or_else(|| choose_n_cut(mu_max, opts.eps_tail));
    let nv = ((n_cut + 1) * (n_cut + 1)) as usize;

    let mut targets = Vec::new();
    for ia in Intensity::ALL {
        for ib in Intensity::ALL {
            let w = pair_weights(mu_a[ia], mu_b[ib], n_cut);
            let tail = (1.0 - w.iter().sum::<f64>()).max(0.0);
            let c = gains.get(basis, ia, ib);
            targets.push(Target {
                kind: ConstraintKind::Gain,
                ia,
                ib,
                w: w.clone(),
                val: c.q,
                tail,
            });
            if with_errors {
                targets.push(Target {
                    kind: ConstraintKind::ErrorGain,
                    ia,
                    ib,
                    w,
                    val: c.e * c.q,
                    tail,
                });
            }
        }
    }

    let eps_for_caps = slack_cap.unwrap_or(opts.rel_slack);
    let cap = |kind: ConstraintKind, start: Vec<f64>| {
        let mut u = start;
        for t in targets.iter().filter(|t| t.kind == kind) {
            let hi = t.val * (1.0 + eps_for_caps) + t.tail;
            for (uk, &wk) in u.iter_mut().zip(&t.w) {
                if wk > 0.0 {
                    *uk = uk.min(hi / wk);
                }
            }
        }
        u
    };
    let y_scale = cap(ConstraintKind::Gain, vec![1.0; nv]);
    let b_scale = if with_errors {
        cap(ConstraintKind::ErrorGain, y_scale.clone())
    } else {
        Vec::new()
    };

    let nvar = nv * if with_errors { 2 } else { 1 } + usize::from(slack_cap.is_some());
    let mut lp = LinearProgram::new(nvar);
    for j in 0..nv * if with_errors { 2 } else { 1 } {
        lp.upper[j] = 1.0;
    }
    let slack_var = slack_cap.map(|c| {
        lp.upper[nvar - 1] = c;
        nvar - 1
    });
    let mut rows = Vec::new();
    for t in &targets {
        let denom = t.val + t.tail;
        let scale = if denom > 0.0 { 1.0 / denom } else { 1.0 };
        let (offset, colscale) = match t.kind {
            ConstraintKind::Gain => (0, &y_scale),
            _ => (nv, &b_scale),
        };
        let mut coeffs = vec![0.0; nvar];
        for k in 0..nv {
            coeffs[offset + k] = t.w[k] * colscale[k] * scale;
        }
        let lo = (t.val - t.tail) * scale;
        let hi = (t.val + t.tail) * scale;
        let rel = t.val * scale;
        let r = ConstraintRef {
            kind: t.kind,
            ia: t.ia,
            ib: t.ib,
        };
        match slack_var {
            None => {
                let e = opts.rel_slack * rel;
                lp.add_row(coeffs, lo - e, hi + e);
                rows.push(r);
            }
            Some(s) => {
                // a.z - rel*eps <= hi  and  a.z + rel*eps >= lo
                let mut upper_row = coeffs.clone();
                upper_row[s] = -rel;
                lp.add_row(upper_row, f64::NEG_INFINITY, hi);
                rows.push(r);
                coeffs[s] = rel;
                lp.add_row(coeffs, lo, f64::INFINITY);
                rows.push(r);
            }
        }
    }
    if with_errors {
        for k in 0..nv {
            let mut coeffs = vec![0.0; nvar];
            coeffs[nv + k] = b_scale[k];
            coeffs[k] = -y_scale[k];
            lp.add_row(coeffs, f64::NEG_INFINITY, 0.0);
            rows.push(ConstraintRef {
                kind: ConstraintKind::ErrorBelowYield,
                ia: Intensity::Signal,
                ib: Intensity::Signal,
            });
        }
    }
    Ok(DecoyProgram {
        lp,
        y_scale,
        b_scale,
        rows,
        n_cut,
        slack_var,
    })
}

fn infeasible(
    gains: &GainTable,
    mu_a: &ByIntensity<f64>,
    mu_b: &ByIntensity<f64>,
    basis: Basis,
    with_errors: bool,
    opts: &DecoyOptions,
    prog: &DecoyProgram,
    rows: &[usize],
) -> DecoyError {
    let mut violated: Vec<ConstraintRef> = rows.iter().filter_map(|&i| prog.rows.get(i).copied()).collect();
    violated.dedup();
    DecoyError::Infeasible {
        basis,
        violated,
        min_rel_slack: min_consistent_slack(gains, mu_a, mu_b, basis, with_errors, opts).ok(),
    }
}

/// Optimal decoy bound for one basis: the minimum of `Y11` or the maximum of `B11`.
pub fn yield_bounds(
    gains: &GainTable,
    mu_a: &ByIntensity<f64>,
    mu_b: &ByIntensity<f64>,
    basis: Basis,
    objective: Objective,
    opts: &DecoyOptions,
) -> Result<f64, DecoyError> {
    let with_errors = objective == Objective::MaxB11;
    let mut prog = build_program(gains, mu_a, mu_b, basis, with_errors, opts, None)?;
    let k = prog.idx11();
    let nv = prog.num_yields();
    match objective {
        Objective::MinY11 => prog.lp.cost[k] = 1.0,
        Objective::MaxB11 => prog.lp.cost[nv + k] = -1.0,
    }
    match prog.lp.solve() {
        Ok(sol) => Ok(match objective {
            Objective::MinY11 => (prog.y_scale[k] * sol.x[k]).max(0.0),
            Objective::MaxB11 => (prog.b_scale[k] * sol.x[nv + k]).max(0.0),
        }),
        Err(LpError::Infeasible { rows, .. }) => {
            Err(infeasible(gains, mu_a, mu_b, basis, with_errors, opts, &prog, &rows))
        }
        Err(e) => Err(e.into()),
    }
}

/// Smallest relative widening `eps` of every constraint interval that makes
/// the gain data of one basis consistent. Zero for self-consistent data.
pub fn min_consistent_slack(
    gains: &GainTable,
    mu_a: &ByIntensity<f64>,
    mu_b: &ByIntensity<f64>,
    basis: Basis,
    with_errors: bool,
    opts: &DecoyOptions,
) -> Result<f64, DecoyError> {
    let mut prog = build_program(gains, mu_a, mu_b, basis, with_errors, opts, Some(10.0))?;
    let s = prog.slack_var.expect("slack variable");
    prog.lp.cost[s] = 1.0;
    let sol = prog.lp.solve()?;
    Ok(sol.x[s])
}

pub fn s11_from_yield(y11_lower: f64, mu_s_a: f64, mu_s_b: f64) -> f64 {
    poisson_pn(mu_s_a, 1) * poisson_pn(mu_s_b, 1) * y11_lower
}

/// Key rate per pulse pair `s11 [1 - H(e11)] - Q f H(E)` and its clamp at zero.
pub fn secret_key_rate(s11_z: f64, e11_x: f64, q_ss_z: f64, e_ss_z: f64, f: f64) -> Result<(f64, f64), DecoyError> {
    let unit = |name: &str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(DecoyError::Precondition(format!("{name} = {v} outside [0, 1]")))
        }
    };
    unit("s11", s11_z)?;
    unit("e11", e11_x)?;
    unit("Q_ss", q_ss_z)?;
    unit("E_ss", e_ss_z)?;
    if !(f >= 1.0) {
        return Err(DecoyError::Precondition(format!("f = {f} must be >= 1")));
    }
    let h = |p: f64| binary_entropy(p).expect("range checked");
    let r = s11_z * (1.0 - h(e11_x)) - q_ss_z * f * h(e_ss_z);
    Ok((r, r.max(0.0)))
}

/// Run the three decoy programs and evaluate the key rate.
pub fn analyze(
    gains: &GainTable,
    alice_mu: &ByIntensity<f64>,
    bob_mu: &ByIntensity<f64>,
    opts: &DecoyOptions,
) -> Result<DecoyResult, DecoyError> {
    let (y11_z, (y11_x, b11_x)) = rayon::join(
        || yield_bounds(gains, alice_mu, bob_mu, Basis::Z, Objective::MinY11, opts),
        || {
            rayon::join(
                || yield_bounds(gains, alice_mu, bob_mu, Basis::X, Objective::MinY11, opts),
                || yield_bounds(gains, alice_mu, bob_mu, Basis::X, Objective::MaxB11, opts),
            )
        },
    );
    let (y11_z, y11_x, b11_x) = (y11_z?, y11_x?, b11_x?);
    let y11_z = y11_z.min(1.0);
    let degenerate = y11_x <= 0.0;
    let e11 = if degenerate { 0.5 } else { (b11_x / y11_x).min(0.5) };
    let s11 = s11_from_yield(y11_z, alice_mu[Intensity::Signal], bob_mu[Intensity::Signal]);
    let ss = gains.get(Basis::Z, Intensity::Signal, Intensity::Signal);
    let (r, r_clamped) = secret_key_rate(s11, e11, ss.q, ss.e, opts.f)?;
    Ok(DecoyResult {
        s11_z_lower: s11,
        e11_x_upper: e11,
        y11_z_lower: y11_z,
        y11_x_lower: y11_x,
        b11_x_upper: b11_x,
        r,
        r_clamped,
        degenerate,
    })
}
