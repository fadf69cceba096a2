//! Run configuration: a TOML document whose keys carry their units.
//!
//! The document is kept as written so that parse, serialise, parse is the
//! identity; conversion to SI values happens in the accessor methods.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use mdi_core::coexistence::{Channel, ChannelPlan, ChannelRole, Direction, IsolationBudget, NoiseModel};
use mdi_core::decoy::{DecoyOptions, DEFAULT_EC_EFFICIENCY};
use mdi_core::fixtures::{self, Environment};
use mdi_core::forward::ScenarioConfig;
use mdi_core::model::{Basis, ByIntensity, DetectionConfig, Intensity, LinkConfig, QubitSpec, SourceConfig, StateTable};
use mdi_core::pipeline::{check_grid, SweepAxis};
use mdi_core::session::SessionConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field {field}: {msg}")]
    Field { field: String, msg: String },
}

fn field(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// `[m, phi_rad]`-style per-intensity lists, ordered signal, decoy, vacuum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatesDoc {
    pub z0_m: [f64; 3],
    pub z0_phi_rad: [f64; 3],
    pub z1_m: [f64; 3],
    pub z1_phi_rad: [f64; 3],
    pub x0_m: [f64; 3],
    pub x0_phi_rad: [f64; 3],
    pub x1_m: [f64; 3],
    pub x1_phi_rad: [f64; 3],
}

impl StatesDoc {
    fn keys() -> [(Basis, u8); 4] {
        [(Basis::Z, 0), (Basis::Z, 1), (Basis::X, 0), (Basis::X, 1)]
    }

    fn rows(&self) -> [(&[f64; 3], &[f64; 3]); 4] {
        [
            (&self.z0_m, &self.z0_phi_rad),
            (&self.z1_m, &self.z1_phi_rad),
            (&self.x0_m, &self.x0_phi_rad),
            (&self.x1_m, &self.x1_phi_rad),
        ]
    }

    pub fn from_table(t: &StateTable) -> Self {
        let get = |b, bit| {
            let m = Intensity::ALL.map(|i| t.get(b, bit, i).m);
            let p = Intensity::ALL.map(|i| t.get(b, bit, i).phi);
            (m, p)
        };
        let (z0_m, z0_phi_rad) = get(Basis::Z, 0);
        let (z1_m, z1_phi_rad) = get(Basis::Z, 1);
        let (x0_m, x0_phi_rad) = get(Basis::X, 0);
        let (x1_m, x1_phi_rad) = get(Basis::X, 1);
        StatesDoc {
            z0_m,
            z0_phi_rad,
            z1_m,
            z1_phi_rad,
            x0_m,
            x0_phi_rad,
            x1_m,
            x1_phi_rad,
        }
    }

    pub fn to_table(&self, side: &str) -> Result<StateTable, ConfigError> {
        let mut t = StateTable::ideal();
        for (&(b, bit), (m, phi)) in Self::keys().iter().zip(self.rows()) {
            for i in Intensity::ALL {
                let spec = QubitSpec::new(m[i.index()], phi[i.index()])
                    .map_err(|e| field(&format!("{side}.states.{}{bit}", b.label().to_lowercase()), e.to_string()))?;
                t.set(b, bit, i, spec);
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDoc {
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub mu_vacuum: f64,
    pub p_basis_z: f64,
    pub p_signal: f64,
    pub p_decoy: f64,
    pub p_vacuum: f64,
    pub states: StatesDoc,
}

impl SourceDoc {
    pub fn from_source(s: &SourceConfig) -> Self {
        SourceDoc {
            mu_signal: s.mu[Intensity::Signal],
            mu_decoy: s.mu[Intensity::Decoy],
            mu_vacuum: s.mu[Intensity::Vacuum],
            p_basis_z: s.p_basis,
            p_signal: s.p_intensity[Intensity::Signal],
            p_decoy: s.p_intensity[Intensity::Decoy],
            p_vacuum: s.p_intensity[Intensity::Vacuum],
            states: StatesDoc::from_table(&s.specs),
        }
    }

    pub fn to_source(&self, side: &str) -> Result<SourceConfig, ConfigError> {
        let s = SourceConfig {
            mu: ByIntensity::new(self.mu_signal, self.mu_decoy, self.mu_vacuum),
            specs: self.states.to_table(side)?,
            p_basis: self.p_basis_z,
            p_intensity: ByIntensity::new(self.p_signal, self.p_decoy, self.p_vacuum),
        };
        s.validate().map_err(|e| field(side, e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDoc {
    pub loss_db_alice: f64,
    pub loss_db_bob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionDoc {
    pub det_efficiency: f64,
    pub dark_rate_cps: f64,
    pub noise_rate_cps: f64,
    pub window_ps: f64,
    pub visibility: f64,
    pub qubit_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseDoc {
    pub base_dark_rate_cps: f64,
    pub raman_slope_cps_per_uw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolationDoc {
    pub wdm_isolation_db: f64,
    pub filter_isolation_db: f64,
    pub filter_bandwidth_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDoc {
    pub name: String,
    pub wavelength_nm: f64,
    pub launch_uw: f64,
    pub direction: Direction,
    pub role: ChannelRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDoc {
    pub channels: Vec<ChannelDoc>,
}

/// Sweep grid: dB for the loss axis, µW per node for the power axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDoc {
    pub axis: SweepAxis,
    pub points: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoyDoc {
    pub ec_efficiency: f64,
    pub rel_slack: f64,
    pub auto_slack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionDoc {
    pub latency_us: f64,
    pub reveal_x: f64,
    pub reveal_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
    pub alice: SourceDoc,
    pub bob: SourceDoc,
    pub link: LinkDoc,
    pub detection: DetectionDoc,
    pub noise: NoiseDoc,
    pub isolation: IsolationDoc,
    pub plan: PlanDoc,
    pub sweep: SweepDoc,
    pub decoy: DecoyDoc,
    pub session: SessionDoc,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_environment(Environment::Lab)
    }
}

impl RunConfig {
    /// Reported states and visibility of an environment with default intensities and noise.
    pub fn for_environment(env: Environment) -> Self {
        let scenario = fixtures::reported_scenario(env);
        let launch = match env {
            Environment::Lab => fixtures::LAB_REFERENCE_LAUNCH,
            Environment::Deployed => fixtures::DEPLOYED_REFERENCE_LAUNCH,
        };
        let noise = NoiseModel::anchored(&scenario, launch, 0.0);
        RunConfig::from_parts(&scenario, &noise, &ChannelPlan::lab_default(launch))
    }

    pub fn from_parts(scenario: &ScenarioConfig, noise: &NoiseModel, plan: &ChannelPlan) -> Self {
        let d = &scenario.detection;
        let iso = IsolationBudget::default();
        let session = SessionConfig::default();
        RunConfig {
            seed: 1,
            rounds: 1_000_000,
            output_path: None,
            alice: SourceDoc::from_source(&scenario.alice),
            bob: SourceDoc::from_source(&scenario.bob),
            link: LinkDoc {
                loss_db_alice: scenario.link.loss_db_alice,
                loss_db_bob: scenario.link.loss_db_bob,
            },
            detection: DetectionDoc {
                det_efficiency: d.det_efficiency,
                dark_rate_cps: d.dark_rate,
                noise_rate_cps: d.noise_rate,
                window_ps: d.window * 1e12,
                visibility: d.visibility,
                qubit_rate_hz: d.qubit_rate,
            },
            noise: NoiseDoc {
                base_dark_rate_cps: noise.base_dark_rate,
                raman_slope_cps_per_uw: noise.raman_slope * 1e-6,
            },
            isolation: IsolationDoc {
                wdm_isolation_db: iso.wdm_isolation_db,
                filter_isolation_db: iso.filter_isolation_db,
                filter_bandwidth_nm: iso.filter_bandwidth_nm,
            },
            plan: PlanDoc {
                channels: plan
                    .channels
                    .iter()
                    .map(|c| ChannelDoc {
                        name: c.name.clone(),
                        wavelength_nm: c.wavelength_nm,
                        launch_uw: c.launch_power * 1e6,
                        direction: c.direction,
                        role: c.role,
                    })
                    .collect(),
            },
            sweep: SweepDoc {
                axis: SweepAxis::Loss,
                points: vec![19.0, 28.0, 35.0, 43.0, 48.0, 50.0, 52.0, 55.0],
            },
            decoy: DecoyDoc {
                ec_efficiency: DEFAULT_EC_EFFICIENCY,
                rel_slack: 0.0,
                auto_slack: true,
            },
            session: SessionDoc {
                latency_us: session.latency * 1e6,
                reveal_x: session.reveal_x,
                reveal_z: session.reveal_z,
            },
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &str) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario()?;
        self.noise_model()?;
        self.plan()?;
        self.isolation()?;
        self.session_config()?;
        self.decoy_options()?;
        check_grid(&self.sweep.points).map_err(|e| field("sweep.points", e.to_string()))?;
        if self.sweep.axis == SweepAxis::Power && self.sweep.points.iter().any(|&p| p < 0.0) {
            return Err(field("sweep.points", "launch powers must be >= 0"));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<ScenarioConfig, ConfigError> {
        let d = &self.detection;
        let s = ScenarioConfig {
            alice: self.alice.to_source("alice")?,
            bob: self.bob.to_source("bob")?,
            link: LinkConfig {
                loss_db_alice: self.link.loss_db_alice,
                loss_db_bob: self.link.loss_db_bob,
            },
            detection: DetectionConfig {
                det_efficiency: d.det_efficiency,
                dark_rate: d.dark_rate_cps,
                noise_rate: d.noise_rate_cps,
                window: d.window_ps * 1e-12,
                visibility: d.visibility,
                qubit_rate: d.qubit_rate_hz,
            },
        };
        s.link.validate().map_err(|e| field("link", e.to_string()))?;
        s.detection.validate().map_err(|e| field("detection", e.to_string()))?;
        Ok(s)
    }

    pub fn noise_model(&self) -> Result<NoiseModel, ConfigError> {
        let m = NoiseModel {
            base_dark_rate: self.noise.base_dark_rate_cps,
            raman_slope: self.noise.raman_slope_cps_per_uw * 1e6,
        };
        m.validate().map_err(|e| field("noise", e.to_string()))?;
        Ok(m)
    }

    pub fn plan(&self) -> Result<ChannelPlan, ConfigError> {
        let p = ChannelPlan {
            channels: self
                .plan
                .channels
                .iter()
                .map(|c| Channel {
                    name: c.name.clone(),
                    wavelength_nm: c.wavelength_nm,
                    launch_power: c.launch_uw * 1e-6,
                    direction: c.direction,
                    role: c.role,
                })
                .collect(),
        };
        p.validate().map_err(|e| field("plan.channels", e.to_string()))?;
        Ok(p)
    }

    pub fn isolation(&self) -> Result<IsolationBudget, ConfigError> {
        let b = IsolationBudget {
            wdm_isolation_db: self.isolation.wdm_isolation_db,
            filter_isolation_db: self.isolation.filter_isolation_db,
            filter_bandwidth_nm: self.isolation.filter_bandwidth_nm,
        };
        b.validate().map_err(|e| field("isolation", e.to_string()))?;
        Ok(b)
    }

    pub fn decoy_options(&self) -> Result<DecoyOptions, ConfigError> {
        if !(self.decoy.ec_efficiency >= 1.0) {
            return Err(field("decoy.ec_efficiency", "must be >= 1"));
        }
        if !(self.decoy.rel_slack >= 0.0) {
            return Err(field("decoy.rel_slack", "must be >= 0"));
        }
        Ok(DecoyOptions {
            f: self.decoy.ec_efficiency,
            rel_slack: self.decoy.rel_slack,
            ..DecoyOptions::default()
        })
    }

    pub fn session_config(&self) -> Result<SessionConfig, ConfigError> {
        let s = &self.session;
        if !(s.latency_us >= 0.0) {
            return Err(field("session.latency_us", "must be >= 0"));
        }
        for (name, v) in [("session.reveal_x", s.reveal_x), ("session.reveal_z", s.reveal_z)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(field(name, "must lie in [0, 1]"));
            }
        }
        Ok(SessionConfig {
            latency: s.latency_us * 1e-6,
            reveal_x: s.reveal_x,
            reveal_z: s.reveal_z,
            record_log: false,
        })
    }

    /// Mean co-propagating data launch power of the plan, W.
    pub fn launch_power(&self) -> Result<f64, ConfigError> {
        Ok(self.plan()?.mean_co_data_launch())
    }
}
