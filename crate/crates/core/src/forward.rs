//! Analytic gains and QBERs for every (basis, intensity pair) cell.
//!
//! Each End Node emits a phase-randomised weak coherent pulse in two time
//! bins. Bob's field is split into a component matched to Alice's mode
//! (weight `overlap`) that interferes with relative phase `theta`, and an
//! orthogonal remainder that adds incoherently. Threshold detectors click
//! with probability `1 - exp(-(mean + noise))` independently per
//! (detector, bin). The relative phase is averaged with a uniform
//! quadrature rule.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    cell_keys, db_to_transmittance, Basis, BsmOutcome, Cell, DetectionConfig, GainTable,
    Intensity, LinkConfig, ModelError, QubitSpec, SourceConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("phase quadrature did not converge for {basis} {ia}{ib} (reached order {order})")]
    QuadratureNotConverged {
        basis: Basis,
        ia: Intensity,
        ib: Intensity,
        order: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub alice: SourceConfig,
    pub bob: SourceConfig,
    pub link: LinkConfig,
    pub detection: DetectionConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.alice.validate()?;
        self.bob.validate()?;
        self.link.validate()?;
        self.detection.validate()
    }

    /// Channel transmittance including detector efficiency, per side.
    pub fn transmittances(&self) -> Result<(f64, f64), ModelError> {
        let eta = self.detection.det_efficiency;
        Ok((
            db_to_transmittance(self.link.loss_db_alice)? * eta,
            db_to_transmittance(self.link.loss_db_bob)? * eta,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellProbabilities {
    pub gain: f64,
    pub error_rate: f64,
}

/// Early/late mode amplitudes of a coherent pulse with mean photon number `mu`.
pub fn pulse_amplitudes(spec: QubitSpec, mu: f64) -> (Complex64, Complex64) {
    let early = Complex64::new((mu * spec.m).sqrt(), 0.0);
    let late = Complex64::from_polar((mu * (1.0 - spec.m)).sqrt(), spec.phi);
    (early, late)
}

/// Mean photon numbers per detector and bin, `[d1, d2]` each `[early, late]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorMeans {
    pub d1: [f64; 2],
    pub d2: [f64; 2],
}

impl DetectorMeans {
    pub fn total(&self) -> f64 {
        self.d1[0] + self.d1[1] + self.d2[0] + self.d2[1]
    }
}

pub fn beamsplitter_intensities(
    alice: (Complex64, Complex64),
    bob: (Complex64, Complex64),
    overlap: f64,
    theta: f64,
) -> DetectorMeans {
    debug_assert!((0.0..=1.0).contains(&overlap));
    let rot = Complex64::from_polar(overlap.sqrt(), theta);
    let a = [alice.0, alice.1];
    let b = [bob.0, bob.1];
    let mut out = DetectorMeans {
        d1: [0.0; 2],
        d2: [0.0; 2],
    };
    for t in 0..2 {
        let matched = rot * b[t];
        let incoherent = 0.5 * (1.0 - overlap) * b[t].norm_sqr();
        out.d1[t] = 0.5 * (a[t] + matched).norm_sqr() + incoherent;
        out.d2[t] = 0.5 * (a[t] - matched).norm_sqr() + incoherent;
    }
    out
}

/// Threshold-detector click probability for Poissonian light plus noise.
pub fn click_probability(mean_photons: f64, noise_mean: f64) -> f64 {
    -(-(mean_photons + noise_mean)).exp_m1()
}

/// Clicks per detector and bin, `[early, late]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClickPattern {
    pub d1: [bool; 2],
    pub d2: [bool; 2],
}

impl ClickPattern {
    pub fn from_bits(bits: u8) -> Self {
        ClickPattern {
            d1: [bits & 1 != 0, bits & 2 != 0],
            d2: [bits & 4 != 0, bits & 8 != 0],
        }
    }
}

/// Heralds psi-minus when each detector clicked in exactly one bin and the bins differ.
pub fn coincidence_rule(clicks: &ClickPattern) -> BsmOutcome {
    let one = |d: [bool; 2]| d[0] ^ d[1];
    if one(clicks.d1) && one(clicks.d2) && clicks.d1[0] != clicks.d2[0] {
        BsmOutcome::PsiMinus
    } else {
        BsmOutcome::NoDetection
    }
}

/// Probability of a psi-minus herald given independent click probabilities `p[detector][bin]`.
pub fn psi_minus_probability(p: &[[f64; 2]; 2]) -> f64 {
    let (p1e, p1l, p2e, p2l) = (p[0][0], p[0][1], p[1][0], p[1][1]);
    p1e * (1.0 - p1l) * (1.0 - p2e) * p2l + (1.0 - p1e) * p1l * p2e * (1.0 - p2l)
}

/// Phase-quadrature settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub order: usize,
    /// Compare against the doubled order and escalate until agreement.
    pub check: bool,
    pub max_order: usize,
    pub rel_tol: f64,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature {
            order: 64,
            check: true,
            max_order: 1024,
            rel_tol: 1e-10,
        }
    }
}

impl Quadrature {
    pub fn fixed(order: usize) -> Self {
        Quadrature {
            order,
            check: false,
            ..Default::default()
        }
    }
}

/// Gain and error-weighted gain for explicit per-side means, averaged over
/// bit pairs and `order` phase points.
fn pair_average(
    scenario: &ScenarioConfig,
    basis: Basis,
    ia: Intensity,
    ib: Intensity,
    mu_a: f64,
    mu_b: f64,
    order: usize,
) -> (f64, f64) {
    let nu = scenario.detection.noise_mean();
    let overlap = scenario.detection.visibility;
    let mut gain = 0.0;
    let mut err = 0.0;
    for a in 0..2u8 {
        let alice = pulse_amplitudes(scenario.alice.specs.get(basis, a, ia), mu_a);
        for b in 0..2u8 {
            let bob = pulse_amplitudes(scenario.bob.specs.get(basis, b, ib), mu_b);
            let mut acc = 0.0;
            for k in 0..order {
                let theta = std::f64::consts::TAU * k as f64 / order as f64;
                let m = beamsplitter_intensities(alice, bob, overlap, theta);
                let p = [
                    [click_probability(m.d1[0], nu), click_probability(m.d1[1], nu)],
                    [click_probability(m.d2[0], nu), click_probability(m.d2[1], nu)],
                ];
                acc += psi_minus_probability(&p);
            }
            let pm = acc / order as f64 / 4.0;
            gain += pm;
            // psi-minus heralds anticorrelation; after Bob's flip equal raw bits are errors.
            if a == b {
                err += pm;
            }
        }
    }
    (gain, err)
}

fn to_cell(gain: f64, err: f64, pure_noise: bool) -> CellProbabilities {
    let error_rate = if pure_noise || gain <= 0.0 {
        0.5
    } else {
        (err / gain).clamp(0.0, 1.0)
    };
    CellProbabilities {
        gain: gain.clamp(0.0, 1.0),
        error_rate,
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn cell_probabilities(
    scenario: &ScenarioConfig,
    basis: Basis,
    ia: Intensity,
    ib: Intensity,
) -> Result<CellProbabilities, ForwardError> {
    cell_probabilities_with(scenario, basis, ia, ib, &Quadrature::default())
}

pub fn cell_probabilities_with(
    scenario: &ScenarioConfig,
    basis: Basis,
    ia: Intensity,
    ib: Intensity,
    quad: &Quadrature,
) -> Result<CellProbabilities, ForwardError> {
    let (eta_a, eta_b) = scenario.transmittances()?;
    let mu_a = scenario.alice.mu[ia] * eta_a;
    let mu_b = scenario.bob.mu[ib] * eta_b;
    let pure_noise = mu_a == 0.0 || mu_b == 0.0;
    let mut order = quad.order.max(1);
    let (mut g, mut e) = pair_average(scenario, basis, ia, ib, mu_a, mu_b, order);
    if !quad.check {
        return Ok(to_cell(g, e, pure_noise));
    }
    loop {
        let (g2, e2) = pair_average(scenario, basis, ia, ib, mu_a, mu_b, 2 * order);
        if rel_diff(g, g2) <= quad.rel_tol && rel_diff(e, e2) <= quad.rel_tol {
            return Ok(to_cell(g, e, pure_noise));
        }
        order *= 2;
        if order > quad.max_order {
            return Err(ForwardError::QuadratureNotConverged {
                basis,
                ia,
                ib,
                order,
            });
        }
        g = g2;
        e = e2;
    }
}

pub fn full_gain_table(scenario: &ScenarioConfig) -> Result<GainTable, ForwardError> {
    full_gain_table_with(scenario, &Quadrature::default())
}

pub fn full_gain_table_with(
    scenario: &ScenarioConfig,
    quad: &Quadrature,
) -> Result<GainTable, ForwardError> {
    scenario.validate()?;
    let keys: Vec<_> = cell_keys().collect();
    let cells: Vec<CellProbabilities> = keys
        .par_iter()
        .map(|&(b, ia, ib)| cell_probabilities_with(scenario, b, ia, ib, quad))
        .collect::<Result<_, _>>()?;
    let mut it = cells.into_iter();
    Ok(GainTable::from_fn(|_, _, _| {
        let c = it.next().expect("18 cells");
        Cell {
            q: c.gain,
            e: c.error_rate,
        }
    })?)
}

/// Yield and error yield of the single-photon-pair component for the
/// signal-state encoding in `basis`.
///
/// The phase-randomised gain is a Poisson mixture over photon numbers, so
/// `exp(x + y) Q(x, y)` has `Y11` as its mixed `xy` coefficient. It is
/// extracted with Richardson-extrapolated finite differences at small means.
pub fn single_photon_pair_yield(scenario: &ScenarioConfig, basis: Basis) -> Result<(f64, f64), ForwardError> {
    let (eta_a, eta_b) = scenario.transmittances()?;
    let s = Intensity::Signal;
    let g = |x: f64, y: f64| {
        let (q, e) = pair_average(scenario, basis, s, s, x * eta_a, y * eta_b, 256);
        ((x + y).exp() * q, (x + y).exp() * e)
    };
    let mixed = |h: f64| {
        let (a, ae) = g(h, h);
        let (b, be) = g(h, 0.0);
        let (c, ce) = g(0.0, h);
        let (d, de) = g(0.0, 0.0);
        ((a - b - c + d) / (h * h), (ae - be - ce + de) / (h * h))
    };
    let h = 2e-3;
    let (y1, b1) = mixed(h);
    let (y2, b2) = mixed(h / 2.0);
    let (y4, b4) = mixed(h / 4.0);
    // Two Richardson steps remove the O(h) and O(h^2) terms.
    let r = |f1: f64, f2: f64, f4: f64| {
        let a = 2.0 * f2 - f1;
        let b = 2.0 * f4 - f2;
        (4.0 * b - a) / 3.0
    };
    Ok((r(y1, y2, y4), r(b1, b2, b4)))
}
