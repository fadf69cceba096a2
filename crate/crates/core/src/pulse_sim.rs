//! Pulse-by-pulse Monte Carlo of the three-node link.
//!
//! Every round owns an independent ChaCha8 stream selected by its round
//! index, so any partition of the rounds across workers reproduces the same
//! records. Summaries are plain integer counts and merge by addition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use num_complex::Complex64;

use crate::forward::{
    beamsplitter_intensities, click_probability, coincidence_rule, pulse_amplitudes, ClickPattern,
    ScenarioConfig,
};
use crate::model::{Basis, BsmOutcome, Cell, GainTable, Intensity, ModelError, SourceConfig};

/// Rounds handled by one parallel work item.
const CHUNK: u64 = 1 << 16;
const MAX_ROUNDS: u64 = 1 << 63;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("rounds must be in [1, 2^63], got {0}")]
    Rounds(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One End Node's preparation choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Choice {
    pub basis: Basis,
    pub bit: u8,
    pub intensity: Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: u64,
    pub alice: Choice,
    pub bob: Choice,
    pub outcome: BsmOutcome,
}

/// Random stream of a single round.
pub struct RoundRng(ChaCha8Rng);

impl RoundRng {
    pub fn new(seed: u64, round_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(round_index);
        rng.set_word_pos(0);
        RoundRng(rng)
    }

    fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellCounts {
    pub sent: u64,
    pub psi_minus: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSummary {
    pub rounds: u64,
    /// Same-basis rounds, `[basis][alice intensity][bob intensity]`.
    pub cells: [[[CellCounts; 3]; 3]; 2],
    /// Rounds with mismatched bases, and how many of them heralded.
    pub mismatched_sent: u64,
    pub mismatched_psi_minus: u64,
}

impl Default for SimSummary {
    fn default() -> Self {
        SimSummary {
            rounds: 0,
            cells: [[[CellCounts::default(); 3]; 3]; 2],
            mismatched_sent: 0,
            mismatched_psi_minus: 0,
        }
    }
}

impl SimSummary {
    pub fn cell(&self, b: Basis, ia: Intensity, ib: Intensity) -> CellCounts {
        self.cells[b.index()][ia.index()][ib.index()]
    }

    pub fn record(&mut self, r: &RoundRecord) {
        self.rounds += 1;
        let hit = r.outcome == BsmOutcome::PsiMinus;
        if r.alice.basis != r.bob.basis {
            self.mismatched_sent += 1;
            self.mismatched_psi_minus += u64::from(hit);
            return;
        }
        let c = &mut self.cells[r.alice.basis.index()][r.alice.intensity.index()][r.bob.intensity.index()];
        c.sent += 1;
        if hit {
            c.psi_minus += 1;
            if r.alice.bit == r.bob.bit {
                c.errors += 1;
            }
        }
    }

    pub fn merge(mut self, other: &SimSummary) -> SimSummary {
        self.rounds += other.rounds;
        self.mismatched_sent += other.mismatched_sent;
        self.mismatched_psi_minus += other.mismatched_psi_minus;
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let (c, o) = (&mut self.cells[b][i][j], other.cells[b][i][j]);
                    c.sent += o.sent;
                    c.psi_minus += o.psi_minus;
                    c.errors += o.errors;
                }
            }
        }
        self
    }
}

struct Side {
    /// `[basis][bit][intensity]` amplitudes after channel loss.
    amps: [[[(Complex64, Complex64); 3]; 2]; 2],
    p_basis: f64,
    cum_intensity: [f64; 2],
}

impl Side {
    fn new(src: &SourceConfig, eta: f64) -> Self {
        let mut amps = [[[(Complex64::default(), Complex64::default()); 3]; 2]; 2];
        for b in Basis::ALL {
            for bit in 0..2u8 {
                for i in Intensity::ALL {
                    amps[b.index()][bit as usize][i.index()] =
                        pulse_amplitudes(src.specs.get(b, bit, i), src.mu[i] * eta);
                }
            }
        }
        let p = src.p_intensity.0;
        Side {
            amps,
            p_basis: src.p_basis,
            cum_intensity: [p[0], p[0] + p[1]],
        }
    }

    fn draw(&self, rng: &mut RoundRng) -> Choice {
        let basis = if rng.uniform() < self.p_basis { Basis::Z } else { Basis::X };
        let bit = u8::from(rng.uniform() < 0.5);
        let u = rng.uniform();
        let intensity = if u < self.cum_intensity[0] {
            Intensity::Signal
        } else if u < self.cum_intensity[1] {
            Intensity::Decoy
        } else {
            Intensity::Vacuum
        };
        Choice { basis, bit, intensity }
    }

    fn amp(&self, c: Choice) -> (Complex64, Complex64) {
        self.amps[c.basis.index()][c.bit as usize][c.intensity.index()]
    }
}

/// Precomputed per-scenario state for fast round simulation.
pub struct SimEngine {
    alice: Side,
    bob: Side,
    overlap: f64,
    noise: f64,
    seed: u64,
}

impl SimEngine {
    pub fn new(scenario: &ScenarioConfig, seed: u64) -> Result<Self, ModelError> {
        scenario.validate()?;
        let (eta_a, eta_b) = scenario.transmittances()?;
        Ok(SimEngine {
            alice: Side::new(&scenario.alice, eta_a),
            bob: Side::new(&scenario.bob, eta_b),
            overlap: scenario.detection.visibility,
            noise: scenario.detection.noise_mean(),
            seed,
        })
    }

    /// End Node choices of one round. Drawn first from the round's stream.
    pub fn choices(&self, rng: &mut RoundRng) -> (Choice, Choice) {
        let a = self.alice.draw(rng);
        let b = self.bob.draw(rng);
        (a, b)
    }

    /// Measurement outcome for committed choices, continuing the round's stream.
    pub fn measure(&self, alice: Choice, bob: Choice, rng: &mut RoundRng) -> BsmOutcome {
        let theta = std::f64::consts::TAU * rng.uniform();
        let m = beamsplitter_intensities(self.alice.amp(alice), self.bob.amp(bob), self.overlap, theta);
        let mut click = |mean: f64| rng.uniform() < click_probability(mean, self.noise);
        let clicks = ClickPattern {
            d1: [click(m.d1[0]), click(m.d1[1])],
            d2: [click(m.d2[0]), click(m.d2[1])],
        };
        coincidence_rule(&clicks)
    }

    pub fn round(&self, round_index: u64) -> RoundRecord {
        let mut rng = RoundRng::new(self.seed, round_index);
        let (alice, bob) = self.choices(&mut rng);
        let outcome = self.measure(alice, bob, &mut rng);
        RoundRecord {
            round_index,
            alice,
            bob,
            outcome,
        }
    }

    pub fn run_range(&self, start: u64, count: u64) -> SimSummary {
        let mut s = SimSummary::default();
        for k in start..start + count {
            s.record(&self.round(k));
        }
        s
    }
}

/// Simulate one round with its own stream derived from `(seed, round_index)`.
pub fn simulate_round(scenario: &ScenarioConfig, seed: u64, round_index: u64) -> Result<RoundRecord, ModelError> {
    Ok(SimEngine::new(scenario, seed)?.round(round_index))
}

/// Rounds `[start, start + rounds)`; disjoint ranges of one seed merge into the full run.
pub fn simulate_range(scenario: &ScenarioConfig, seed: u64, start: u64, rounds: u64) -> Result<SimSummary, SimError> {
    if rounds == 0 || rounds > MAX_ROUNDS || start.checked_add(rounds).is_none() {
        return Err(SimError::Rounds(rounds));
    }
    let engine = SimEngine::new(scenario, seed)?;
    let chunks = rounds.div_ceil(CHUNK);
    Ok((0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = start + c * CHUNK;
            let n = CHUNK.min(start + rounds - lo);
            engine.run_range(lo, n)
        })
        .reduce(SimSummary::default, |a, b| a.merge(&b)))
}

pub fn simulate_batch(scenario: &ScenarioConfig, rounds: u64, seed: u64) -> Result<SimSummary, SimError> {
    simulate_range(scenario, seed, 0, rounds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellIssue {
    NothingSent,
    NoHerald,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFlag {
    pub basis: Basis,
    pub ia: Intensity,
    pub ib: Intensity,
    pub issue: CellIssue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTable {
    pub table: GainTable,
    /// Binomial standard error of each gain, `[basis][ia][ib]`.
    pub q_stderr: [[[f64; 3]; 3]; 2],
    pub flags: Vec<CellFlag>,
}

impl EmpiricalTable {
    pub fn q_stderr(&self, b: Basis, ia: Intensity, ib: Intensity) -> f64 {
        self.q_stderr[b.index()][ia.index()][ib.index()]
    }
}

/// Gain and error estimate of one cell from counts, with low-statistics flags.
pub fn estimate_cell(c: CellCounts) -> (Cell, f64, Option<CellIssue>) {
    if c.sent == 0 {
        return (Cell { q: 0.0, e: 0.5 }, 0.0, Some(CellIssue::NothingSent));
    }
    let q = c.psi_minus as f64 / c.sent as f64;
    let se = (q * (1.0 - q) / c.sent as f64).sqrt();
    if c.psi_minus == 0 {
        return (Cell { q, e: 0.5 }, se, Some(CellIssue::NoHerald));
    }
    let e = c.errors as f64 / c.psi_minus as f64;
    (Cell { q, e }, se, None)
}

pub fn empirical_gain_table(summary: &SimSummary) -> EmpiricalTable {
    let mut q_stderr = [[[0.0; 3]; 3]; 2];
    let mut flags = Vec::new();
    let table = GainTable::from_fn(|b, ia, ib| {
        let (cell, se, issue) = estimate_cell(summary.cell(b, ia, ib));
        q_stderr[b.index()][ia.index()][ib.index()] = se;
        if let Some(issue) = issue {
            flags.push(CellFlag { basis: b, ia, ib, issue });
        }
        cell
    })
    .expect("count ratios lie in [0, 1]");
    EmpiricalTable { table, q_stderr, flags }
}
