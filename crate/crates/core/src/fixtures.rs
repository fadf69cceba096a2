//! Transcribed measurement tables and the reported qubit-state parameters.
//!
//! Table files are stored verbatim (three significant digits, QBERs as
//! percentages) under `fixtures/`; `index.csv` names the table family,
//! environment, operating condition and reported key rate of each file.

use crate::forward::ScenarioConfig;
use crate::model::{
    Basis, ByIntensity, DetectionConfig, GainTable, Intensity, LinkConfig, QubitSpec, SourceConfig,
    StateTable,
};
use crate::table_io::{read_partial_table, PartialTable, TableError};

pub const INDEX_CSV: &str = include_str!("../fixtures/index.csv");

pub const FILES: &[(&str, &str)] = &[
    ("table1_x_deployed_26db.csv", include_str!("../fixtures/table1_x_deployed_26db.csv")),
    ("table1_x_deployed_35db.csv", include_str!("../fixtures/table1_x_deployed_35db.csv")),
    ("table1_x_deployed_44db.csv", include_str!("../fixtures/table1_x_deployed_44db.csv")),
    ("table1_x_lab_19db.csv", include_str!("../fixtures/table1_x_lab_19db.csv")),
    ("table1_x_lab_28db.csv", include_str!("../fixtures/table1_x_lab_28db.csv")),
    ("table1_x_lab_35db.csv", include_str!("../fixtures/table1_x_lab_35db.csv")),
    ("table1_x_lab_43db.csv", include_str!("../fixtures/table1_x_lab_43db.csv")),
    ("table1_x_lab_48db.csv", include_str!("../fixtures/table1_x_lab_48db.csv")),
    ("table2_z_deployed_26db.csv", include_str!("../fixtures/table2_z_deployed_26db.csv")),
    ("table2_z_deployed_35db.csv", include_str!("../fixtures/table2_z_deployed_35db.csv")),
    ("table2_z_deployed_44db.csv", include_str!("../fixtures/table2_z_deployed_44db.csv")),
    ("table2_z_lab_19db.csv", include_str!("../fixtures/table2_z_lab_19db.csv")),
    ("table2_z_lab_28db.csv", include_str!("../fixtures/table2_z_lab_28db.csv")),
    ("table2_z_lab_35db.csv", include_str!("../fixtures/table2_z_lab_35db.csv")),
    ("table2_z_lab_43db.csv", include_str!("../fixtures/table2_z_lab_43db.csv")),
    ("table2_z_lab_48db.csv", include_str!("../fixtures/table2_z_lab_48db.csv")),
    ("table3_x_launch_deployed_10.8uw.csv", include_str!("../fixtures/table3_x_launch_deployed_10.8uw.csv")),
    ("table3_x_launch_lab_11.8uw.csv", include_str!("../fixtures/table3_x_launch_lab_11.8uw.csv")),
    ("table3_x_launch_lab_15.0uw.csv", include_str!("../fixtures/table3_x_launch_lab_15.0uw.csv")),
    ("table3_x_launch_lab_155uw.csv", include_str!("../fixtures/table3_x_launch_lab_155uw.csv")),
    ("table3_x_launch_lab_392uw.csv", include_str!("../fixtures/table3_x_launch_lab_392uw.csv")),
    ("table3_x_launch_lab_4.68uw.csv", include_str!("../fixtures/table3_x_launch_lab_4.68uw.csv")),
    ("table3_x_launch_lab_61.7uw.csv", include_str!("../fixtures/table3_x_launch_lab_61.7uw.csv")),
    ("table4_z_launch_deployed_10.8uw.csv", include_str!("../fixtures/table4_z_launch_deployed_10.8uw.csv")),
    ("table4_z_launch_lab_11.8uw.csv", include_str!("../fixtures/table4_z_launch_lab_11.8uw.csv")),
    ("table4_z_launch_lab_15.0uw.csv", include_str!("../fixtures/table4_z_launch_lab_15.0uw.csv")),
    ("table4_z_launch_lab_155uw.csv", include_str!("../fixtures/table4_z_launch_lab_155uw.csv")),
    ("table4_z_launch_lab_392uw.csv", include_str!("../fixtures/table4_z_launch_lab_392uw.csv")),
    ("table4_z_launch_lab_4.68uw.csv", include_str!("../fixtures/table4_z_launch_lab_4.68uw.csv")),
    ("table4_z_launch_lab_61.7uw.csv", include_str!("../fixtures/table4_z_launch_lab_61.7uw.csv")),
];

/// Reported two-photon interference visibility, lab and deployed.
pub const LAB_VISIBILITY: f64 = 0.847;
pub const DEPLOYED_VISIBILITY: f64 = 0.797;

/// Data launch power per End Node at the reference operating point (W).
pub const LAB_REFERENCE_LAUNCH: f64 = 4.68e-6;
pub const DEPLOYED_REFERENCE_LAUNCH: f64 = 10.8e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Environment {
    Lab,
    Deployed,
}

impl Environment {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lab" => Some(Environment::Lab),
            "deployed" => Some(Environment::Deployed),
            _ => None,
        }
    }
}

/// Operating condition a table was measured at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    LossDb(f64),
    /// Per-node data launch power in W.
    Launch(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixture {
    pub file: &'static str,
    /// Table family, e.g. `table1_x`.
    pub family: &'static str,
    pub environment: Environment,
    pub condition: Condition,
    pub key_rate: f64,
    pub basis: Basis,
    pub csv: &'static str,
}

impl Fixture {
    pub fn partial(&self) -> PartialTable {
        read_partial_table(self.csv.as_bytes()).expect("bundled fixture parses")
    }
}

fn parse_condition(s: &str) -> Condition {
    if let Some(v) = s.strip_suffix("db") {
        Condition::LossDb(v.parse().expect("loss"))
    } else if let Some(v) = s.strip_suffix("uw") {
        Condition::Launch(v.parse::<f64>().expect("power") * 1e-6)
    } else {
        panic!("unknown condition {s}")
    }
}

/// All bundled tables in index order.
pub fn all() -> Vec<Fixture> {
    INDEX_CSV
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&'static str> = line.split(',').collect();
            let csv = FILES
                .iter()
                .find(|(name, _)| *name == f[0])
                .map(|(_, c)| *c)
                .unwrap_or_else(|| panic!("fixture {} not bundled", f[0]));
            Fixture {
                file: f[0],
                family: f[1],
                environment: Environment::parse(f[2]).expect("environment"),
                condition: parse_condition(f[3]),
                key_rate: f[4].parse().expect("key rate"),
                basis: if f[1].contains("_x") { Basis::X } else { Basis::Z },
                csv,
            }
        })
        .collect()
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn find(env: Environment, cond: Condition, basis: Basis) -> Option<Fixture> {
    all().into_iter().find(|f| {
        f.environment == env
            && f.basis == basis
            && match (f.condition, cond) {
                (Condition::LossDb(a), Condition::LossDb(b)) => same(a, b),
                (Condition::Launch(a), Condition::Launch(b)) => same(a, b),
                _ => false,
            }
    })
}

/// Both bases at one operating point, merged into a complete table, with
/// the reported key rate.
pub fn combined(env: Environment, cond: Condition) -> Result<(GainTable, f64), TableError> {
    let missing = || TableError::Incomplete(format!("no bundled table for {env:?} {cond:?}"));
    let x = find(env, cond, Basis::X).ok_or_else(missing)?;
    let z = find(env, cond, Basis::Z).ok_or_else(missing)?;
    Ok((x.partial().merge(&z.partial())?.complete()?, z.key_rate))
}

/// Losses with complete bundled tables, ascending.
pub fn loss_points(env: Environment) -> Vec<f64> {
    let mut v: Vec<f64> = all()
        .into_iter()
        .filter(|f| f.environment == env && f.basis == Basis::Z)
        .filter_map(|f| match f.condition {
            Condition::LossDb(l) => Some(l),
            _ => None,
        })
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Launch powers (W) with complete bundled tables and their reported key rates.
pub fn launch_points(env: Environment) -> Vec<(f64, f64)> {
    all()
        .into_iter()
        .filter(|f| f.environment == env && f.basis == Basis::Z)
        .filter_map(|f| match f.condition {
            Condition::Launch(p) => Some((p, f.key_rate)),
            _ => None,
        })
        .collect()
}

type Row = [(f64, f64); 2];

fn states(rows: [Row; 4]) -> StateTable {
    // rows[k] = [(m, phi) signal, (m, phi) decoy] for |e>, |l>, |+>, |->.
    let mut t = StateTable::ideal();
    let keys = [(Basis::Z, 0u8), (Basis::Z, 1), (Basis::X, 0), (Basis::X, 1)];
    for (k, &(b, bit)) in keys.iter().enumerate() {
        let [s, d] = rows[k];
        let s = QubitSpec::new(s.0, s.1).expect("valid");
        let d = QubitSpec::new(d.0, d.1).expect("valid");
        t.set(b, bit, Intensity::Signal, s);
        t.set(b, bit, Intensity::Decoy, d);
        t.set(b, bit, Intensity::Vacuum, d);
    }
    t
}

/// Reported state parameters `(alice, bob)`. The vacuum intensity reuses the decoy entries.
pub fn qubit_states(env: Environment) -> (StateTable, StateTable) {
    match env {
        Environment::Lab => (
            states([
                [(0.9950, 0.0), (0.9524, 0.0)],
                [(0.0045, 0.0), (0.0403, 0.0)],
                [(0.5156, 0.0), (0.4937, 0.0)],
                [(0.5260, 3.14), (0.5040, 3.54)],
            ]),
            states([
                [(0.9989, 0.0), (0.9577, 0.0)],
                [(0.0005, 0.0), (0.0392, 0.0)],
                [(0.5255, 0.0), (0.5077, 0.0)],
                [(0.5243, 3.2), (0.5060, 2.78)],
            ]),
        ),
        Environment::Deployed => (
            states([
                [(0.9969, 0.0), (0.9612, 0.0)],
                [(0.002, 0.0), (0.0055, 0.0)],
                [(0.5212, 0.0), (0.4904, 0.0)],
                [(0.5203, 3.14), (0.4911, 3.48)],
            ]),
            states([
                [(0.9968, 0.0), (0.964, 0.0)],
                [(0.0015, 0.0), (0.0006, 0.0)],
                [(0.4984, 0.0), (0.4888, 0.0)],
                [(0.4963, 3.2), (0.4857, 2.80)],
            ]),
        ),
    }
}

/// Split of a total loss between the two fibres. The lab spools are 1.5 dB
/// apart; the deployed links were equalised.
pub fn link_for(env: Environment, total_db: f64) -> LinkConfig {
    let half = total_db / 2.0;
    match env {
        Environment::Lab => LinkConfig {
            loss_db_alice: half + 0.75,
            loss_db_bob: (half - 0.75).max(0.0),
        },
        Environment::Deployed => LinkConfig {
            loss_db_alice: half,
            loss_db_bob: half,
        },
    }
}

pub fn default_source(specs: StateTable) -> SourceConfig {
    SourceConfig {
        mu: ByIntensity::new(0.3, 0.04, 0.0),
        specs,
        p_basis: 0.5,
        p_intensity: ByIntensity::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    }
}

/// Starting scenario built from the reported state parameters and visibility,
/// with default intensities and noise. Reference losses are 19 dB (lab) and 26 dB (deployed).
pub fn reported_scenario(env: Environment) -> ScenarioConfig {
    let (a, b) = qubit_states(env);
    let (visibility, loss) = match env {
        Environment::Lab => (LAB_VISIBILITY, 19.0),
        Environment::Deployed => (DEPLOYED_VISIBILITY, 26.0),
    };
    ScenarioConfig {
        alice: default_source(a),
        bob: default_source(b),
        link: link_for(env, loss),
        detection: DetectionConfig {
            visibility,
            dark_rate: 600.0,
            noise_rate: 5.0e4,
            ..DetectionConfig::default()
        },
    }
}
