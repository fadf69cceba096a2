//! Least-squares fit of scenario parameters to measured gain tables, and of
//! the Raman slope to key rates measured at several launch powers.
//!
//! Gains enter as `ln(Q_model / Q_measured)`; error rates below 50 % enter
//! linearly as `(E_model - E_measured) / error_sigma`. Parameters are fitted
//! in unconstrained coordinates (logs and logits) with Levenberg-Marquardt on
//! a forward-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coexistence::{NoiseModel, NOISE_STREAMS};
use crate::fixtures::{self, Condition, Environment};
use crate::forward::{full_gain_table_with, Quadrature, ScenarioConfig};
use crate::model::{cell_keys, Basis, Intensity};
use crate::pipeline::{key_rate, scenario_at_loss, PipelineError, PipelineOptions};
use crate::table_io::PartialTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {need} measured tables, got {got}")]
    TooFewTables { need: usize, got: usize },
    #[error("no free parameters")]
    NothingFree,
    #[error("starting point is outside the model domain: {0}")]
    BadStart(String),
    #[error("fewer residuals ({residuals}) than free parameters ({params})")]
    Underdetermined { residuals: usize, params: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("reference key rate is not positive ({0:e})")]
    Reference(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitParam {
    MuSignalAlice,
    MuDecoyAlice,
    MuSignalBob,
    MuDecoyBob,
    Overlap,
    DarkRate,
    NoiseRate,
    DetEfficiency,
}

impl FitParam {
    pub const ALL: [FitParam; 8] = [
        FitParam::MuSignalAlice,
        FitParam::MuDecoyAlice,
        FitParam::MuSignalBob,
        FitParam::MuDecoyBob,
        FitParam::Overlap,
        FitParam::DarkRate,
        FitParam::NoiseRate,
        FitParam::DetEfficiency,
    ];

    /// Detector efficiency is left out: it only rescales the intensities.
    pub const DEFAULT_FREE: [FitParam; 7] = [
        FitParam::MuSignalAlice,
        FitParam::MuDecoyAlice,
        FitParam::MuSignalBob,
        FitParam::MuDecoyBob,
        FitParam::Overlap,
        FitParam::DarkRate,
        FitParam::NoiseRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FitParam::MuSignalAlice => "mu_signal_alice",
            FitParam::MuDecoyAlice => "mu_decoy_alice",
            FitParam::MuSignalBob => "mu_signal_bob",
            FitParam::MuDecoyBob => "mu_decoy_bob",
            FitParam::Overlap => "overlap",
            FitParam::DarkRate => "dark_rate",
            FitParam::NoiseRate => "noise_rate",
            FitParam::DetEfficiency => "det_efficiency",
        }
    }

    pub fn parse(s: &str) -> Option<FitParam> {
        FitParam::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn value(self, s: &ScenarioConfig) -> f64 {
        match self {
            FitParam::MuSignalAlice => s.alice.mu[Intensity::Signal],
            FitParam::MuDecoyAlice => s.alice.mu[Intensity::Decoy],
            FitParam::MuSignalBob => s.bob.mu[Intensity::Signal],
            FitParam::MuDecoyBob => s.bob.mu[Intensity::Decoy],
            FitParam::Overlap => s.detection.visibility,
            FitParam::DarkRate => s.detection.dark_rate,
            FitParam::NoiseRate => s.detection.noise_rate,
            FitParam::DetEfficiency => s.detection.det_efficiency,
        }
    }

    fn set(self, s: &mut ScenarioConfig, v: f64) {
        match self {
            FitParam::MuSignalAlice => s.alice.mu[Intensity::Signal] = v,
            FitParam::MuDecoyAlice => s.alice.mu[Intensity::Decoy] = v,
            FitParam::MuSignalBob => s.bob.mu[Intensity::Signal] = v,
            FitParam::MuDecoyBob => s.bob.mu[Intensity::Decoy] = v,
            FitParam::Overlap => s.detection.visibility = v,
            FitParam::DarkRate => s.detection.dark_rate = v,
            FitParam::NoiseRate => s.detection.noise_rate = v,
            FitParam::DetEfficiency => s.detection.det_efficiency = v,
        }
    }
}

const RATE_FLOOR: f64 = 1e-3;

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Signal intensity of the node a decoy parameter belongs to.
fn signal_of(p: FitParam, s: &ScenarioConfig) -> Option<f64> {
    match p {
        FitParam::MuDecoyAlice => Some(s.alice.mu[Intensity::Signal]),
        FitParam::MuDecoyBob => Some(s.bob.mu[Intensity::Signal]),
        _ => None,
    }
}

fn to_internal(p: FitParam, s: &ScenarioConfig) -> f64 {
    let v = p.value(s);
    match p {
        FitParam::MuSignalAlice | FitParam::MuSignalBob => v.max(1e-12).ln(),
        FitParam::MuDecoyAlice | FitParam::MuDecoyBob => logit(v / signal_of(p, s).expect("decoy")),
        FitParam::Overlap | FitParam::DetEfficiency => logit(v),
        FitParam::DarkRate | FitParam::NoiseRate => v.max(RATE_FLOOR).ln(),
    }
}

/// Decoys are stored relative to their signal, so signals are applied first.
fn apply(base: &ScenarioConfig, free: &[FitParam], theta: &[f64]) -> ScenarioConfig {
    let mut s = *base;
    let mut order: Vec<usize> = (0..free.len()).collect();
    order.sort_by_key(|&i| signal_of(free[i], base).is_some());
    for i in order {
        let (p, t) = (free[i], theta[i]);
        let v = match p {
            FitParam::MuSignalAlice | FitParam::MuSignalBob => t.exp(),
            FitParam::MuDecoyAlice | FitParam::MuDecoyBob => signal_of(p, &s).expect("decoy") * logistic(t),
            FitParam::Overlap | FitParam::DetEfficiency => logistic(t),
            FitParam::DarkRate | FitParam::NoiseRate => t.exp(),
        };
        p.set(&mut s, v);
    }
    s
}

/// One measured gain table at a known total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredTable {
    pub loss_db: f64,
    pub cells: PartialTable,
    /// Cells left out of the fit.
    pub exclude: Vec<(Basis, Intensity, Intensity)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub free: Vec<FitParam>,
    pub max_iter: usize,
    /// Relative cost decrease below which the fit stops.
    pub tol: f64,
    pub error_sigma: f64,
    pub quadrature_order: usize,
    pub min_tables: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            free: FitParam::DEFAULT_FREE.to_vec(),
            max_iter: 100,
            tol: 1e-10,
            error_sigma: 0.01,
            quadrature_order: 64,
            min_tables: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamEstimate {
    pub param: FitParam,
    pub value: f64,
    /// Linearised one-sigma uncertainty, in natural units.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Fitted scenario at the reference loss of the starting scenario.
    pub scenario: ScenarioConfig,
    pub estimates: Vec<ParamEstimate>,
    /// Root-mean-square weighted residual.
    pub residual: f64,
    pub cost: f64,
    pub residual_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Condition number of the Gauss-Newton normal matrix at the optimum.
    pub condition_number: f64,
}

impl FitResult {
    pub fn value(&self, p: FitParam) -> f64 {
        p.value(&self.scenario)
    }
}

fn residuals(scenario: &ScenarioConfig, data: &[MeasuredTable], opts: &FitOptions) -> Option<Vec<f64>> {
    scenario.validate().ok()?;
    let quad = Quadrature::fixed(opts.quadrature_order);
    let mut r = Vec::new();
    for t in data {
        let s = scenario_at_loss(scenario, t.loss_db).ok()?;
        let model = full_gain_table_with(&s, &quad).ok()?;
        for (b, ia, ib) in cell_keys() {
            if t.exclude.contains(&(b, ia, ib)) {
                continue;
            }
            let Some(d) = t.cells.get(b, ia, ib) else { continue };
            if d.q > 0.0 {
                r.push((model.q(b, ia, ib).max(1e-300) / d.q).ln());
            }
            if d.e < 0.5 {
                r.push((model.e(b, ia, ib) - d.e) / opts.error_sigma);
            }
        }
    }
    r.iter().all(|v| v.is_finite()).then_some(r)
}

fn half_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Levenberg-Marquardt fit starting from `start`. Only `opts.free` move.
/// Running out of iterations returns the best point with `converged = false`.
pub fn fit_tables(start: &ScenarioConfig, data: &[MeasuredTable], opts: &FitOptions) -> Result<FitResult, FitError> {
    if data.len() < opts.min_tables {
        return Err(FitError::TooFewTables {
            need: opts.min_tables,
            got: data.len(),
        });
    }
    let free = &opts.free;
    if free.is_empty() {
        return Err(FitError::NothingFree);
    }
    let n = free.len();
    let mut theta: Vec<f64> = free.iter().map(|&p| to_internal(p, start)).collect();
    let eval = |th: &[f64]| residuals(&apply(start, free, th), data, opts);
    let mut r = eval(&theta).ok_or_else(|| FitError::BadStart(format!("{start:?}")))?;
    let m = r.len();
    if m < n {
        return Err(FitError::Underdetermined { residuals: m, params: n });
    }
    let mut cost = half_sq(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = DMatrix::zeros(m, n);

    let jacobian = |th: &[f64], r0: &[f64]| -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let h = 1e-6 * th[j].abs().max(1.0);
                let mut tp = th.to_vec();
                tp[j] += h;
                match eval(&tp) {
                    Some(rp) => rp.iter().zip(r0).map(|(a, b)| (a - b) / h).collect(),
                    None => vec![0.0; r0.len()],
                }
            })
            .collect();
        DMatrix::from_fn(r0.len(), n, |i, j| cols[j][i])
    };

    for it in 0..opts.max_iter {
        iterations = it + 1;
        jac = jacobian(&theta, &r);
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * DVector::from_column_slice(&r);
        let mut accepted = false;
        let mut step_norm = 0.0;
        while lambda < 1e12 {
            let mut damped = a.clone();
            for k in 0..n {
                damped[(k, k)] += lambda * a[(k, k)].max(1e-12);
            }
            let Some(delta) = damped.lu().solve(&(-&g)) else {
                lambda *= 4.0;
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            if let Some(rt) = eval(&trial) {
                let ct = half_sq(&rt);
                if ct < cost {
                    let rel = (cost - ct) / cost.max(1e-300);
                    step_norm = delta.norm();
                    theta = trial;
                    r = rt;
                    cost = ct;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < opts.tol {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No downhill step at any damping: a stationary point.
            converged = true;
            break;
        }
        if converged || step_norm < 1e-9 {
            converged = true;
            break;
        }
    }
    if iterations > 0 {
        jac = jacobian(&theta, &r);
    }

    let scenario = apply(start, free, &theta);
    let normal = jac.transpose() * &jac;
    let sv = normal.clone().svd(false, false).singular_values;
    let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let dof = (m - n).max(1) as f64;
    let cov = normal.try_inverse().map(|inv| inv * (2.0 * cost / dof));
    let estimates = free
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let value = p.value(&scenario);
            let stderr = cov
                .as_ref()
                .map(|c| {
                    let sigma = c[(i, i)].max(0.0).sqrt();
                    let mut tp = theta.clone();
                    tp[i] += sigma;
                    (p.value(&apply(start, free, &tp)) - value).abs()
                })
                .unwrap_or(f64::INFINITY);
            ParamEstimate { param: p, value, stderr }
        })
        .collect();
    Ok(FitResult {
        scenario,
        estimates,
        residual: (2.0 * cost / m as f64).sqrt(),
        cost,
        residual_count: m,
        iterations,
        converged,
        condition_number,
    })
}

/// Starting point for fitting bundled tables: reported states with the
/// signal-state parameters shared by all intensities, reported visibility,
/// default intensities and noise, at the environment's reference loss.
pub fn fit_start(env: Environment) -> ScenarioConfig {
    let mut s = fixtures::reported_scenario(env);
    s.alice.specs = s.alice.specs.signal_shared();
    s.bob.specs = s.bob.specs.signal_shared();
    s.alice.mu[Intensity::Decoy] = 0.02;
    s.bob.mu[Intensity::Decoy] = 0.02;
    s.detection.dark_rate = 2500.0;
    s
}

/// Bundled loss-series tables for one environment, with the cells known to
/// be inconsistent with their neighbours excluded.
pub fn bundled_measurements(env: Environment) -> Vec<MeasuredTable> {
    fixtures::loss_points(env)
        .into_iter()
        .map(|loss| {
            let (table, _) = fixtures::combined(env, Condition::LossDb(loss)).expect("bundled table");
            let mut exclude = Vec::new();
            if env == Environment::Lab && loss == 19.0 {
                for ib in Intensity::ALL {
                    exclude.push((Basis::Z, Intensity::Vacuum, ib));
                }
            }
            if env == Environment::Lab && loss == 35.0 {
                exclude.push((Basis::X, Intensity::Signal, Intensity::Decoy));
            }
            MeasuredTable {
                loss_db: loss,
                cells: PartialTable::from(&table),
                exclude,
            }
        })
        .collect()
}

pub fn fit_bundled(env: Environment, opts: &FitOptions) -> Result<FitResult, FitError> {
    fit_tables(&fit_start(env), &bundled_measurements(env), opts)
}

/// Noise model whose Raman share of the background at `reference_launch`
/// is `fraction`; the rest is launch-independent.
pub fn raman_model(scenario: &ScenarioConfig, reference_launch: f64, fraction: f64) -> NoiseModel {
    let summed = scenario.detection.noise_rate * NOISE_STREAMS;
    let f = fraction.clamp(0.0, 1.0);
    NoiseModel {
        base_dark_rate: summed * (1.0 - f),
        raman_slope: summed * f / reference_launch,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamanPoint {
    pub launch: f64,
    pub reported_ratio: f64,
    pub model_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamanFit {
    pub model: NoiseModel,
    /// Raman share of the background at the reference launch power.
    pub fraction: f64,
    pub reference_rate: f64,
    pub points: Vec<RamanPoint>,
    pub cost: f64,
}

const RATIO_FLOOR: f64 = 1e-6;

/// Fit the Raman share of the background so that modelled key-rate ratios
/// `R(P) / R(P_ref)` match the reported ones in log space.
///
/// `scenario` must carry the background measured at `reference_launch`.
/// `points` holds `(launch, reported key rate)`; the entry at the reference
/// launch supplies the denominator of the reported ratios.
pub fn fit_raman_slope(
    scenario: &ScenarioConfig,
    reference_launch: f64,
    points: &[(f64, f64)],
    opts: &PipelineOptions,
) -> Result<RamanFit, FitError> {
    let same = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
    let reported_ref = points
        .iter()
        .find(|(p, _)| same(*p, reference_launch))
        .map(|&(_, r)| r)
        .ok_or(FitError::TooFewTables { need: 1, got: 0 })?;
    let others: Vec<(f64, f64)> = points.iter().copied().filter(|(p, _)| !same(*p, reference_launch)).collect();
    if others.is_empty() {
        return Err(FitError::TooFewTables { need: 2, got: points.len() });
    }
    let r_ref = key_rate(scenario, opts)?.result.r;
    if !(r_ref > 0.0) {
        return Err(FitError::Reference(r_ref));
    }
    let ratios = |fraction: f64| -> Vec<f64> {
        let model = raman_model(scenario, reference_launch, fraction);
        others
            .par_iter()
            .map(|&(p, _)| {
                let s = crate::coexistence::apply_coexistence(scenario, &model, p);
                key_rate(&s, opts).map(|k| k.result.r / r_ref).unwrap_or(f64::NAN)
            })
            .collect()
    };
    let cost_of = |model_ratios: &[f64]| -> f64 {
        model_ratios
            .iter()
            .zip(&others)
            .map(|(&m, &(_, rep))| {
                let m = if m.is_finite() { m.max(RATIO_FLOOR) } else { RATIO_FLOOR };
                (m / (rep / reported_ref)).ln().powi(2)
            })
            .sum()
    };
    let cost = |f: f64| cost_of(&ratios(f));

    let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let costs: Vec<f64> = grid.iter().map(|&f| cost(f)).collect();
    let best = (0..grid.len()).min_by(|&i, &j| costs[i].total_cmp(&costs[j])).expect("grid");
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut c1, mut c2) = (cost(x1), cost(x2));
    for _ in 0..25 {
        if c1 <= c2 {
            hi = x2;
            x2 = x1;
            c2 = c1;
            x1 = hi - g * (hi - lo);
            c1 = cost(x1);
        } else {
            lo = x1;
            x1 = x2;
            c1 = c2;
            x2 = lo + g * (hi - lo);
            c2 = cost(x2);
        }
    }
    let mut fraction = 0.5 * (lo + hi);
    let mut final_ratios = ratios(fraction);
    let mut final_cost = cost_of(&final_ratios);
    if costs[best] < final_cost {
        fraction = grid[best];
        final_ratios = ratios(fraction);
        final_cost = costs[best];
    }
    Ok(RamanFit {
        model: raman_model(scenario, reference_launch, fraction),
        fraction,
        reference_rate: r_ref,
        points: others
            .iter()
            .zip(&final_ratios)
            .map(|(&(launch, rep), &m)| RamanPoint {
                launch,
                reported_ratio: rep / reported_ref,
                model_ratio: m,
            })
            .collect(),
        cost: final_cost,
    })
}

/// Carry a fitted Raman slope to another scenario. The slope follows the
/// same per-fibre attenuation law as the background itself; the intercept is
/// re-anchored so the target keeps its own background at `target_launch`.
pub fn transfer_raman(
    fitted: &NoiseModel,
    fitted_scenario: &ScenarioConfig,
    target: &ScenarioConfig,
    target_launch: f64,
) -> NoiseModel {
    let extra = target.link.total_db() - fitted_scenario.link.total_db();
    let slope = fitted.raman_slope * 10f64.powf(-extra / 20.0);
    NoiseModel::anchored(target, target_launch, slope)
}
