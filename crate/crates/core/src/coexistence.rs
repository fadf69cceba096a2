//! WDM channel plan and the classical-to-quantum noise budget.
//!
//! Background counts on the Center Node detectors grow linearly with the
//! per-node data launch power. Only co-propagating channels contribute; the
//! counter-propagating fibre (control, stabilisation, Center Node transmit)
//! is treated as noise-free for the qubit channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::ScenarioConfig;
use crate::model::db_to_transmittance;

const PLANCK: f64 = 6.626_070_15e-34;
const LIGHT_SPEED: f64 = 299_792_458.0;

/// Detector-window streams sharing the background: two detectors, two bins.
pub const NOISE_STREAMS: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("channel plan needs exactly one quantum channel at 1310 nm, found {0}")]
    QuantumChannel(usize),
    #[error("channel {0:?} has non-positive wavelength")]
    Wavelength(String),
    #[error("data channel {0:?} must carry positive launch power")]
    DataPower(String),
    #[error("{0} must be >= 0")]
    Negative(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Co,
    Counter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelRole {
    Quantum,
    Data,
    Control,
    Stabilization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub wavelength_nm: f64,
    /// Watts.
    pub launch_power: f64,
    pub direction: Direction,
    pub role: ChannelRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub channels: Vec<Channel>,
}

impl ChannelPlan {
    pub fn validate(&self) -> Result<(), PlanError> {
        let quantum = self
            .channels
            .iter()
            .filter(|c| c.role == ChannelRole::Quantum)
            .collect::<Vec<_>>();
        if quantum.len() != 1 || (quantum[0].wavelength_nm - 1310.0).abs() > 1e-9 {
            return Err(PlanError::QuantumChannel(quantum.len()));
        }
        for c in &self.channels {
            if !(c.wavelength_nm > 0.0) {
                return Err(PlanError::Wavelength(c.name.clone()));
            }
            if c.role == ChannelRole::Data && !(c.launch_power > 0.0) {
                return Err(PlanError::DataPower(c.name.clone()));
            }
        }
        Ok(())
    }

    /// Mean launch power of the co-propagating data channels (W).
    pub fn mean_co_data_launch(&self) -> f64 {
        let co: Vec<f64> = self
            .channels
            .iter()
            .filter(|c| c.role == ChannelRole::Data && c.direction == Direction::Co)
            .map(|c| c.launch_power)
            .collect();
        if co.is_empty() {
            0.0
        } else {
            co.iter().sum::<f64>() / co.len() as f64
        }
    }

    /// Copy with every co-propagating data channel set to `launch` (W).
    pub fn with_data_launch(&self, launch: f64) -> ChannelPlan {
        let mut p = self.clone();
        for c in &mut p.channels {
            if c.role == ChannelRole::Data && c.direction == Direction::Co {
                c.launch_power = launch;
            }
        }
        p
    }

    /// Lab layout: qubits and both data services co-propagating on fibre 1,
    /// Center Node transmit, control and stabilisation on fibre 2.
    pub fn lab_default(launch: f64) -> ChannelPlan {
        let ch = |name: &str, wavelength_nm: f64, launch_power: f64, direction, role| Channel {
            name: name.to_string(),
            wavelength_nm,
            launch_power,
            direction,
            role,
        };
        ChannelPlan {
            channels: vec![
                ch("qubits", 1310.0, 0.0, Direction::Co, ChannelRole::Quantum),
                ch("hbn", 1550.12, launch, Direction::Co, ChannelRole::Data),
                ch("lbn", 1510.0, launch, Direction::Co, ChannelRole::Data),
                ch("hbn-rx", 1550.12, launch, Direction::Counter, ChannelRole::Data),
                ch("lbn-rx", 1510.0, launch, Direction::Counter, ChannelRole::Data),
                ch("control", 1548.0, 1e-3, Direction::Counter, ChannelRole::Control),
                ch("stabilization", 1310.0, 1e-6, Direction::Counter, ChannelRole::Stabilization),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsolationBudget {
    pub wdm_isolation_db: f64,
    pub filter_isolation_db: f64,
    pub filter_bandwidth_nm: f64,
}

impl Default for IsolationBudget {
    fn default() -> Self {
        IsolationBudget {
            wdm_isolation_db: 50.0,
            filter_isolation_db: 45.0,
            filter_bandwidth_nm: 2.0,
        }
    }
}

impl IsolationBudget {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.wdm_isolation_db >= 0.0) || !(self.filter_isolation_db >= 0.0) {
            return Err(PlanError::Negative("isolation"));
        }
        if !(self.filter_bandwidth_nm >= 0.0) {
            return Err(PlanError::Negative("filter bandwidth"));
        }
        Ok(())
    }

    /// Classical power surviving WDM and filter isolation (W).
    pub fn leakage_power(&self, launch: f64) -> f64 {
        launch * 10f64.powf(-(self.wdm_isolation_db + self.filter_isolation_db) / 10.0)
    }

    /// Leaked photons per qubit slot at the detector for a channel at `wavelength_nm`.
    pub fn leakage_photons_per_slot(&self, launch: f64, wavelength_nm: f64, qubit_rate: f64) -> f64 {
        let photon_energy = PLANCK * LIGHT_SPEED / (wavelength_nm * 1e-9);
        self.leakage_power(launch) / (photon_energy * qubit_rate)
    }
}

/// Linear background-count law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Counts/s summed over detector windows with no data traffic.
    pub base_dark_rate: f64,
    /// Counts/s per W of per-node launch power.
    pub raman_slope: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.base_dark_rate >= 0.0) {
            return Err(PlanError::Negative("base_dark_rate"));
        }
        if !(self.raman_slope >= 0.0) {
            return Err(PlanError::Negative("raman_slope"));
        }
        Ok(())
    }

    /// The model that reproduces `scenario`'s background at `reference_launch`
    /// with the given slope. The intercept is clamped at zero.
    pub fn anchored(scenario: &ScenarioConfig, reference_launch: f64, raman_slope: f64) -> NoiseModel {
        let summed = scenario.detection.noise_rate * NOISE_STREAMS;
        NoiseModel {
            base_dark_rate: (summed - raman_slope * reference_launch).max(0.0),
            raman_slope,
        }
    }
}

/// Background counts/s summed over all detector windows.
pub fn noise_rate(model: &NoiseModel, launch_power_per_node: f64) -> f64 {
    model.base_dark_rate + model.raman_slope * launch_power_per_node
}

pub fn received_power(launch: f64, loss_db: f64) -> f64 {
    launch * db_to_transmittance(loss_db.max(0.0)).expect("non-negative loss")
}

/// Number of channels of `per_channel_launch` fitting in `total_power_budget`.
///
/// Quotients within 0.1 % of an integer are snapped to it, so per-channel
/// powers quoted to four significant digits give the intended count.
pub fn channel_capacity_estimate(total_power_budget: f64, per_channel_launch: f64) -> u64 {
    assert!(per_channel_launch > 0.0, "per-channel launch must be positive");
    if total_power_budget <= 0.0 {
        return 0;
    }
    let q = total_power_budget / per_channel_launch;
    let nearest = q.round();
    if (q - nearest).abs() <= 1e-3 * q {
        nearest as u64
    } else {
        q.floor() as u64
    }
}

/// Scenario whose per-stream coexistence noise follows `model` at `launch_power`.
pub fn apply_coexistence(scenario: &ScenarioConfig, model: &NoiseModel, launch_power: f64) -> ScenarioConfig {
    let mut s = *scenario;
    s.detection.noise_rate = noise_rate(model, launch_power) / NOISE_STREAMS;
    s
}
