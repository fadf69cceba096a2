//! Shared domain types, unit conversions and elementary math.
//!
//! Everything here is an immutable value type. Constructors validate their
//! inputs so the downstream engines can assume well-formed data.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what} = {value} is outside its domain ({domain})")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn check_unit(what: &'static str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(ModelError::Domain {
            what,
            value: v,
            domain: "[0, 1]",
        })
    }
}

fn check_nonneg(what: &'static str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::Domain {
            what,
            value: v,
            domain: "[0, inf)",
        })
    }
}

/// Encoding basis. Z is the time-bin (early/late) basis, X the phase basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Basis::Z => "Z",
            Basis::X => "X",
        }
    }

    pub fn parse(s: &str) -> Option<Basis> {
        match s.trim() {
            "Z" | "z" => Some(Basis::Z),
            "X" | "x" => Some(Basis::X),
            _ => None,
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Decoy-state intensity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intensity {
    Signal,
    Decoy,
    Vacuum,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Signal, Intensity::Decoy, Intensity::Vacuum];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Intensity {
        Self::ALL[i]
    }

    /// Single-letter label used in table files (`s`, `d`, `v`).
    pub fn label(self) -> &'static str {
        match self {
            Intensity::Signal => "s",
            Intensity::Decoy => "d",
            Intensity::Vacuum => "v",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Intensity::Signal => "signal",
            Intensity::Decoy => "decoy",
            Intensity::Vacuum => "vacuum",
        }
    }

    pub fn parse(s: &str) -> Option<Intensity> {
        match s.trim() {
            "s" | "signal" => Some(Intensity::Signal),
            "d" | "decoy" => Some(Intensity::Decoy),
            "v" | "vacuum" => Some(Intensity::Vacuum),
            _ => None,
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A value per intensity class, indexable by [`Intensity`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByIntensity<T>(pub [T; 3]);

impl<T: Copy> ByIntensity<T> {
    pub fn new(signal: T, decoy: T, vacuum: T) -> Self {
        ByIntensity([signal, decoy, vacuum])
    }
}

impl<T> Index<Intensity> for ByIntensity<T> {
    type Output = T;
    fn index(&self, i: Intensity) -> &T {
        &self.0[i.index()]
    }
}

impl<T> IndexMut<Intensity> for ByIntensity<T> {
    fn index_mut(&mut self, i: Intensity) -> &mut T {
        &mut self.0[i.index()]
    }
}

/// One prepared time-bin state `sqrt(m)|early> + e^{i phi} sqrt(1-m)|late>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitSpec {
    pub m: f64,
    /// Radians, normalised to `[0, 2pi)`.
    pub phi: f64,
}

impl QubitSpec {
    pub fn new(m: f64, phi: f64) -> Result<Self> {
        check_unit("m", m)?;
        if !phi.is_finite() {
            return Err(ModelError::Domain {
                what: "phi",
                value: phi,
                domain: "finite",
            });
        }
        let mut phi = phi.rem_euclid(TAU);
        if phi >= TAU {
            phi = 0.0;
        }
        Ok(QubitSpec { m, phi })
    }

    /// Ideal states: |early>, |late>, |+>, |->.
    pub fn ideal(basis: Basis, bit: u8) -> Self {
        match (basis, bit) {
            (Basis::Z, 0) => QubitSpec { m: 1.0, phi: 0.0 },
            (Basis::Z, _) => QubitSpec { m: 0.0, phi: 0.0 },
            (Basis::X, 0) => QubitSpec { m: 0.5, phi: 0.0 },
            (Basis::X, _) => QubitSpec {
                m: 0.5,
                phi: std::f64::consts::PI,
            },
        }
    }
}

/// State table indexed by basis, bit and intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateTable(pub [[ByIntensity<QubitSpec>; 2]; 2]);

impl StateTable {
    pub fn get(&self, basis: Basis, bit: u8, intensity: Intensity) -> QubitSpec {
        self.0[basis.index()][bit as usize & 1][intensity]
    }

    pub fn set(&mut self, basis: Basis, bit: u8, intensity: Intensity, spec: QubitSpec) {
        self.0[basis.index()][bit as usize & 1][intensity] = spec;
    }

    pub fn ideal() -> Self {
        let mut t = [[ByIntensity([QubitSpec::ideal(Basis::Z, 0); 3]); 2]; 2];
        for b in Basis::ALL {
            for bit in 0..2u8 {
                t[b.index()][bit as usize] = ByIntensity([QubitSpec::ideal(b, bit); 3]);
            }
        }
        StateTable(t)
    }

    /// Copy of this table where every intensity uses the signal-state parameters.
    pub fn signal_shared(&self) -> Self {
        let mut out = *self;
        for b in Basis::ALL {
            for bit in 0..2u8 {
                let s = self.get(b, bit, Intensity::Signal);
                for i in Intensity::ALL {
                    out.set(b, bit, i, s);
                }
            }
        }
        out
    }
}

/// One End Node's source: intensities, prepared states and choice probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub mu: ByIntensity<f64>,
    pub specs: StateTable,
    /// Probability of choosing the Z basis.
    pub p_basis: f64,
    pub p_intensity: ByIntensity<f64>,
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        for i in Intensity::ALL {
            check_nonneg("mu", self.mu[i])?;
            check_unit("p_intensity", self.p_intensity[i])?;
        }
        let (s, d, v) = (
            self.mu[Intensity::Signal],
            self.mu[Intensity::Decoy],
            self.mu[Intensity::Vacuum],
        );
        if !(s > d && d > v) {
            return Err(ModelError::Invalid(format!(
                "intensities must satisfy signal > decoy > vacuum >= 0, got {s}, {d}, {v}"
            )));
        }
        check_unit("p_basis", self.p_basis)?;
        let total: f64 = self.p_intensity.0.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ModelError::Invalid(format!(
                "intensity probabilities sum to {total}, expected 1"
            )));
        }
        for b in Basis::ALL {
            for bit in 0..2u8 {
                for i in Intensity::ALL {
                    let q = self.specs.get(b, bit, i);
                    QubitSpec::new(q.m, q.phi)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub loss_db_alice: f64,
    pub loss_db_bob: f64,
}

impl LinkConfig {
    pub fn total_db(&self) -> f64 {
        self.loss_db_alice + self.loss_db_bob
    }

    pub fn validate(&self) -> Result<()> {
        check_nonneg("loss_db_alice", self.loss_db_alice)?;
        check_nonneg("loss_db_bob", self.loss_db_bob)?;
        Ok(())
    }
}

/// Center Node detection parameters. Both detectors share one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub det_efficiency: f64,
    /// Intrinsic dark counts per second for each (detector, bin) stream.
    pub dark_rate: f64,
    /// Coexistence-induced counts per second for each (detector, bin) stream.
    pub noise_rate: f64,
    /// Seconds.
    pub window: f64,
    pub visibility: f64,
    pub qubit_rate: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            det_efficiency: 1.0,
            dark_rate: 600.0,
            noise_rate: 0.0,
            window: 400e-12,
            visibility: 1.0,
            qubit_rate: 100e6,
        }
    }
}

impl DetectionConfig {
    /// Mean noise counts per detector window.
    pub fn noise_mean(&self) -> f64 {
        (self.dark_rate + self.noise_rate) * self.window
    }

    pub fn validate(&self) -> Result<()> {
        check_unit("det_efficiency", self.det_efficiency)?;
        check_nonneg("dark_rate", self.dark_rate)?;
        check_nonneg("noise_rate", self.noise_rate)?;
        check_nonneg("window", self.window)?;
        check_unit("visibility", self.visibility)?;
        if !(self.qubit_rate > 0.0 && self.qubit_rate.is_finite()) {
            return Err(ModelError::Domain {
                what: "qubit_rate",
                value: self.qubit_rate,
                domain: "(0, inf)",
            });
        }
        Ok(())
    }
}

/// Gain and error rate of one (basis, intensity pair) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub q: f64,
    pub e: f64,
}

/// Gains and error rates over all 18 (basis, alice intensity, bob intensity) cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    cells: [[[Cell; 3]; 3]; 2],
}

impl GainTable {
    pub fn from_fn(mut f: impl FnMut(Basis, Intensity, Intensity) -> Cell) -> Result<Self> {
        let mut cells = [[[Cell { q: 0.0, e: 0.5 }; 3]; 3]; 2];
        for b in Basis::ALL {
            for ia in Intensity::ALL {
                for ib in Intensity::ALL {
                    let c = f(b, ia, ib);
                    check_unit("gain", c.q)?;
                    check_unit("error rate", c.e)?;
                    cells[b.index()][ia.index()][ib.index()] = c;
                }
            }
        }
        Ok(GainTable { cells })
    }

    pub fn get(&self, basis: Basis, ia: Intensity, ib: Intensity) -> Cell {
        self.cells[basis.index()][ia.index()][ib.index()]
    }

    pub fn q(&self, basis: Basis, ia: Intensity, ib: Intensity) -> f64 {
        self.get(basis, ia, ib).q
    }

    pub fn e(&self, basis: Basis, ia: Intensity, ib: Intensity) -> f64 {
        self.get(basis, ia, ib).e
    }

    /// Replace one cell, validating the new values.
    pub fn with_cell(mut self, basis: Basis, ia: Intensity, ib: Intensity, cell: Cell) -> Result<Self> {
        check_unit("gain", cell.q)?;
        check_unit("error rate", cell.e)?;
        self.cells[basis.index()][ia.index()][ib.index()] = cell;
        Ok(self)
    }

    /// Cells in canonical order: Z before X, then Alice intensity, then Bob intensity.
    pub fn iter(&self) -> impl Iterator<Item = (Basis, Intensity, Intensity, Cell)> + '_ {
        cell_keys().map(move |(b, ia, ib)| (b, ia, ib, self.get(b, ia, ib)))
    }
}

/// The 18 cell keys in canonical order.
pub fn cell_keys() -> impl Iterator<Item = (Basis, Intensity, Intensity)> {
    Basis::ALL.into_iter().flat_map(|b| {
        Intensity::ALL
            .into_iter()
            .flat_map(move |ia| Intensity::ALL.into_iter().map(move |ib| (b, ia, ib)))
    })
}

/// Result of one Bell-state measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BsmOutcome {
    PsiMinus,
    NoDetection,
}

/// Binary Shannon entropy in bits.
pub fn binary_entropy(p: f64) -> Result<f64> {
    check_unit("p", p)?;
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

pub fn db_to_transmittance(loss_db: f64) -> Result<f64> {
    check_nonneg("loss", loss_db)?;
    Ok(10f64.powf(-loss_db / 10.0))
}

/// Poisson probability of `n` photons for mean `mu`.
pub fn poisson_pn(mu: f64, n: u32) -> f64 {
    debug_assert!(mu >= 0.0);
    if mu == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let mut ln = -mu + n as f64 * mu.ln();
    for k in 2..=n {
        ln -= (k as f64).ln();
    }
    ln.exp()
}
