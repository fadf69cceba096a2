//! Forward model composed with decoy analysis, and the sweeps built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coexistence::{apply_coexistence, NoiseModel, NOISE_STREAMS};
use crate::decoy::{analyze, min_consistent_slack, DecoyError, DecoyOptions, DecoyResult};
use crate::forward::{full_gain_table_with, ForwardError, Quadrature, ScenarioConfig};
use crate::model::{Basis, ByIntensity, GainTable, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Decoy(#[from] DecoyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("sweep points must be strictly increasing (point {index}: {value})")]
    NotIncreasing { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub decoy: DecoyOptions,
    pub quadrature: Quadrature,
    /// Widen the decoy constraints by the smallest consistent relative slack
    /// when a table is infeasible as given.
    pub auto_slack: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            decoy: DecoyOptions::default(),
            quadrature: Quadrature::default(),
            auto_slack: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyRateReport {
    pub table: GainTable,
    pub result: DecoyResult,
    /// Relative constraint slack the analysis ran with.
    pub rel_slack: f64,
}

pub fn mu_maps(scenario: &ScenarioConfig) -> (ByIntensity<f64>, ByIntensity<f64>) {
    (scenario.alice.mu, scenario.bob.mu)
}

/// Decoy analysis, retried once with the minimal consistent slack if the
/// table is infeasible and `auto_slack` is set.
pub fn analyze_table(
    table: &GainTable,
    mu_a: &ByIntensity<f64>,
    mu_b: &ByIntensity<f64>,
    opts: &PipelineOptions,
) -> Result<(DecoyResult, f64), DecoyError> {
    match analyze(table, mu_a, mu_b, &opts.decoy) {
        Ok(r) => Ok((r, opts.decoy.rel_slack)),
        Err(DecoyError::Infeasible { .. }) if opts.auto_slack => {
            let z = min_consistent_slack(table, mu_a, mu_b, Basis::Z, false, &opts.decoy)?;
            let x = min_consistent_slack(table, mu_a, mu_b, Basis::X, true, &opts.decoy)?;
            let eps = z.max(x) * (1.0 + 1e-4) + 1e-9 + opts.decoy.rel_slack;
            let widened = DecoyOptions {
                rel_slack: eps,
                ..opts.decoy
            };
            Ok((analyze(table, mu_a, mu_b, &widened)?, eps))
        }
        Err(e) => Err(e),
    }
}

pub fn key_rate(scenario: &ScenarioConfig, opts: &PipelineOptions) -> Result<KeyRateReport, PipelineError> {
    let table = full_gain_table_with(scenario, &opts.quadrature)?;
    let (mu_a, mu_b) = mu_maps(scenario);
    let (result, rel_slack) = analyze_table(&table, &mu_a, &mu_b, opts)?;
    Ok(KeyRateReport {
        table,
        result,
        rel_slack,
    })
}

/// The scenario at a different total loss. The difference is split equally
/// between the two fibres, and the coexistence background, generated along
/// each fibre, is attenuated by one side's share. Detector dark counts are
/// unchanged.
pub fn scenario_at_loss(
    base: &ScenarioConfig,
    total_db: f64,
) -> Result<ScenarioConfig, ModelError> {
    let extra = total_db - base.link.total_db();
    let mut s = *base;
    s.link.loss_db_alice += extra / 2.0;
    s.link.loss_db_bob += extra / 2.0;
    s.detection.noise_rate *= 10f64.powf(-extra / 20.0);
    s.link.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Loss,
    Power,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// dB for loss sweeps, W for power sweeps.
    pub axis: f64,
    pub r: f64,
    pub r_clamped: f64,
    /// Coexistence background summed over detector windows (counts/s).
    pub noise_cps: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub warnings: Vec<String>,
}

pub fn check_grid(points: &[f64]) -> Result<(), PipelineError> {
    if points.is_empty() {
        return Err(PipelineError::EmptyGrid);
    }
    for (i, w) in points.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(PipelineError::NotIncreasing {
                index: i + 1,
                value: w[1],
            });
        }
    }
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(PipelineError::NotIncreasing {
            index: i,
            value: points[i],
        });
    }
    Ok(())
}

fn evaluate(axis: f64, scenario: Result<ScenarioConfig, ModelError>, opts: &PipelineOptions) -> SweepPoint {
    let noise_cps = scenario
        .as_ref()
        .map(|s| s.detection.noise_rate * NOISE_STREAMS)
        .unwrap_or(f64::NAN);
    match scenario.map_err(PipelineError::from).and_then(|s| key_rate(&s, opts)) {
        Ok(rep) => SweepPoint {
            axis,
            r: rep.result.r,
            r_clamped: rep.result.r_clamped,
            noise_cps,
            error: None,
        },
        Err(e) => SweepPoint {
            axis,
            r: f64::NAN,
            r_clamped: f64::NAN,
            noise_cps,
            error: Some(e.to_string()),
        },
    }
}

fn monotone_warnings(points: &[SweepPoint], what: &str) -> Vec<String> {
    points
        .windows(2)
        .filter(|w| w[0].error.is_none() && w[1].error.is_none())
        .filter(|w| w[1].r_clamped > w[0].r_clamped * (1.0 + 1e-9) + 1e-300)
        .map(|w| format!("key rate increases with {what} between {} and {}", w[0].axis, w[1].axis))
        .collect()
}

/// Key rate at each total loss (dB). Failing points are recorded and the sweep continues.
pub fn sweep_loss(base: &ScenarioConfig, points: &[f64], opts: &PipelineOptions) -> Result<SweepReport, PipelineError> {
    check_grid(points)?;
    let pts: Vec<SweepPoint> = points
        .par_iter()
        .map(|&l| evaluate(l, scenario_at_loss(base, l), opts))
        .collect();
    let warnings = monotone_warnings(&pts, "loss");
    Ok(SweepReport {
        axis: SweepAxis::Loss,
        points: pts,
        warnings,
    })
}

/// Key rate at each per-node launch power (W).
pub fn sweep_power(
    base: &ScenarioConfig,
    noise: &NoiseModel,
    points: &[f64],
    opts: &PipelineOptions,
) -> Result<SweepReport, PipelineError> {
    check_grid(points)?;
    if let Some(i) = points.iter().position(|&p| p < 0.0) {
        return Err(PipelineError::NotIncreasing {
            index: i,
            value: points[i],
        });
    }
    let pts: Vec<SweepPoint> = points
        .par_iter()
        .map(|&p| evaluate(p, Ok(apply_coexistence(base, noise, p)), opts))
        .collect();
    let warnings = monotone_warnings(&pts, "launch power");
    Ok(SweepReport {
        axis: SweepAxis::Power,
        points: pts,
        warnings,
    })
}
