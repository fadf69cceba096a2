use mdi_core::fixtures::{self, Environment};
use mdi_core::forward::{full_gain_table, ScenarioConfig};
use mdi_core::model::*;
use mdi_core::pipeline::PipelineOptions;
use mdi_core::pulse_sim::*;
use mdi_core::session::*;

fn short_link(loss_db: f64) -> ScenarioConfig {
    let mut s = fixtures::reported_scenario(Environment::Lab);
    s.alice.specs = s.alice.specs.signal_shared();
    s.bob.specs = s.bob.specs.signal_shared();
    s.link.loss_db_alice = loss_db / 2.0;
    s.link.loss_db_bob = loss_db / 2.0;
    s.detection.noise_rate = 2.0e4;
    s
}

#[test]
fn cell_estimate_examples() {
    let (c, _, issue) = estimate_cell(CellCounts {
        sent: 100,
        psi_minus: 0,
        errors: 0,
    });
    assert_eq!((c.q, c.e, issue), (0.0, 0.5, Some(CellIssue::NoHerald)));
    let counts = CellCounts {
        sent: 1_000_000,
        psi_minus: 494,
        errors: 146,
    };
    let (c, se, issue) = estimate_cell(counts);
    assert_eq!(issue, None);
    assert!((c.q - 4.94e-4).abs() < 1e-12);
    assert!((c.e - 0.2955).abs() < 5e-5);
    assert!((se - (c.q * (1.0 - c.q) / 1e6).sqrt()).abs() < 1e-15);
}

#[test]
fn dark_link_never_heralds() {
    let mut s = short_link(10.0);
    s.detection.det_efficiency = 0.0;
    s.detection.dark_rate = 0.0;
    s.detection.noise_rate = 0.0;
    let sum = simulate_batch(&s, 20_000, 3).unwrap();
    let heralds: u64 = sum.cells.iter().flatten().flatten().map(|c| c.psi_minus).sum();
    assert_eq!(heralds + sum.mismatched_psi_minus, 0);
}

#[test]
fn rounds_replay_identically() {
    let s = short_link(10.0);
    for k in [0, 1, 17, 123_456] {
        assert_eq!(simulate_round(&s, 9, k).unwrap(), simulate_round(&s, 9, k).unwrap());
    }
}

#[test]
fn batch_independent_of_thread_count() {
    let s = short_link(10.0);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_batch(&s, 300_000, 42).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(7));
    let split = simulate_range(&s, 42, 0, 100_000)
        .unwrap()
        .merge(&simulate_range(&s, 42, 100_000, 200_000).unwrap());
    assert_eq!(one, split);
}

#[test]
fn counts_are_consistent() {
    let s = short_link(10.0);
    let sum = simulate_batch(&s, 200_000, 5).unwrap();
    let same: u64 = sum.cells.iter().flatten().flatten().map(|c| c.sent).sum();
    assert_eq!(same + sum.mismatched_sent, sum.rounds);
    for c in sum.cells.iter().flatten().flatten() {
        assert!(c.psi_minus <= c.sent && c.errors <= c.psi_minus);
    }
}

#[test]
fn monte_carlo_matches_forward_model() {
    let s = short_link(6.0);
    let model = full_gain_table(&s).unwrap();
    let sum = simulate_batch(&s, 2_000_000, 77).unwrap();
    let emp = empirical_gain_table(&sum);
    let mut outside = 0;
    for (b, ia, ib, m) in model.iter() {
        // Binomial spread under the model, so empty cells are judged fairly.
        let n = sum.cell(b, ia, ib).sent as f64;
        let sigma = (m.q * (1.0 - m.q) / n).sqrt();
        if (emp.table.q(b, ia, ib) - m.q).abs() > 4.0 * sigma {
            outside += 1;
        }
    }
    assert!(outside <= 1, "{outside} cells outside 4 sigma");
}

fn run(s: &ScenarioConfig, rounds: u64, seed: u64, cfg: &SessionConfig) -> SessionOutput {
    run_session(s, rounds, seed, cfg, &PipelineOptions::default()).unwrap()
}

#[test]
fn session_is_causal_and_deterministic() {
    let s = short_link(6.0);
    let cfg = SessionConfig {
        record_log: true,
        ..SessionConfig::default()
    };
    let a = run(&s, 200_000, 1, &cfg);
    assert!(a.causality.checks > 0);
    assert_eq!(a.causality.violations, 0);
    let b = run(&s, 200_000, 1, &cfg);
    assert_eq!(a, b);
}

#[test]
fn stores_hold_the_same_rounds() {
    let s = short_link(6.0);
    let o = run(&s, 200_000, 2, &SessionConfig::default());
    let ra: Vec<u64> = o.alice.round_indices().collect();
    let rb: Vec<u64> = o.bob.round_indices().collect();
    assert_eq!(ra, rb);
    assert!(ra.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(o.report.sifted, ra.len() as u64);
    assert!(o.report.sifted <= o.report.heralded);
    for (ea, eb) in o.alice.entries.iter().zip(&o.bob.entries) {
        assert_eq!(ea.basis, eb.basis);
    }
}

#[test]
fn full_reveal_equals_monte_carlo_table() {
    let s = short_link(6.0);
    let cfg = SessionConfig {
        reveal_z: 1.0,
        reveal_x: 1.0,
        ..SessionConfig::default()
    };
    let o = run(&s, 150_000, 8, &cfg);
    let emp = empirical_gain_table(&simulate_batch(&s, 150_000, 8).unwrap());
    assert_eq!(o.report.estimate.table, emp.table);
}

#[test]
fn partial_reveal_estimates_error_rate() {
    let s = short_link(6.0);
    let full = SessionConfig {
        reveal_z: 1.0,
        ..SessionConfig::default()
    };
    let rounds = 1_000_000;
    let a = run(&s, rounds, 4, &full);
    let b = run(&s, rounds, 4, &SessionConfig::default());
    let cell = (Basis::Z, Intensity::Signal, Intensity::Signal);
    let ef = a.report.estimate.table.e(cell.0, cell.1, cell.2);
    let ep = b.report.estimate.table.e(cell.0, cell.1, cell.2);
    let n = b.report.estimate.revealed[0][0][0] as f64;
    assert!(n > 0.0);
    let sigma = (ef.max(1.0 / n) * (1.0 - ef) / n).sqrt();
    assert!((ef - ep).abs() <= 5.0 * sigma, "{ef} vs {ep} (n = {n})");
}

#[test]
fn sifted_fraction_matches_model() {
    let s = short_link(6.0);
    let o = run(&s, 500_000, 6, &SessionConfig::default());
    let model = full_gain_table(&s).unwrap();
    let sent = o.alice.sent;
    let mut expected = 0.0;
    for (b, ia, ib, c) in model.iter() {
        expected += sent[b.index()][ia.index()][ib.index()] as f64 * c.q;
    }
    let got = o.report.sifted as f64;
    assert!((got - expected).abs() <= 5.0 * expected.sqrt(), "{got} vs {expected}");
}

#[test]
fn replay_reproduces_report() {
    let s = short_link(6.0);
    let cfg = SessionConfig {
        record_log: true,
        ..SessionConfig::default()
    };
    let o = run(&s, 200_000, 12, &cfg);
    let log = o.log.as_deref().unwrap();
    let r = replay(log, &s.alice.mu, &s.bob.mu, &PipelineOptions::default()).unwrap();
    assert_eq!(r.to_text(), o.report.to_text());
    for line in log.lines() {
        assert_eq!(Event::parse_line(line).unwrap().to_line(), line);
    }
}

#[test]
fn corrupt_log_is_rejected() {
    let s = short_link(6.0);
    let err = replay("0\tcenter\tNoSuchMessage\tx=1", &s.alice.mu, &s.bob.mu, &PipelineOptions::default());
    assert!(matches!(err, Err(SessionError::Log { line: 1, .. })), "{err:?}");
}

#[test]
fn silent_session_is_degenerate() {
    let mut s = short_link(6.0);
    s.detection.det_efficiency = 0.0;
    s.detection.dark_rate = 0.0;
    s.detection.noise_rate = 0.0;
    let o = run(&s, 50_000, 1, &SessionConfig::default());
    assert!(o.alice.entries.is_empty() && o.bob.entries.is_empty());
    let d = o.report.decoy.unwrap();
    assert!(d.degenerate);
    assert_eq!(d.r_clamped, 0.0);
}

#[test]
fn zero_rounds_rejected() {
    let s = short_link(6.0);
    assert!(matches!(
        run_session(&s, 0, 1, &SessionConfig::default(), &PipelineOptions::default()),
        Err(SessionError::Rounds)
    ));
}
