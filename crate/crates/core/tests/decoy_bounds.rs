use mdi_core::decoy::*;
use mdi_core::fixtures::{self, Environment};
use mdi_core::forward::{full_gain_table, single_photon_pair_yield, ScenarioConfig};
use mdi_core::model::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_TRUE: u32 = 40;

/// Synthetic yields for one basis, `(Y_nm, B_nm)` over `0..=N_TRUE`.
struct Truth {
    y: Vec<f64>,
    b: Vec<f64>,
}

impl Truth {
    fn random(rng: &mut ChaCha8Rng) -> Truth {
        let k = (N_TRUE + 1) as usize;
        let mut y = vec![0.0; k * k];
        let mut b = vec![0.0; k * k];
        let dark = rng.gen_range(0.0..1e-4);
        for n in 0..k {
            for m in 0..k {
                let v = if n == 0 && m == 0 {
                    dark
                } else {
                    let scale = 10f64.powf(rng.gen_range(-5.0..0.0));
                    (scale * rng.gen_range(0.0..1.0f64)).min(1.0)
                };
                y[n * k + m] = v;
                b[n * k + m] = v * rng.gen_range(0.0..0.5);
            }
        }
        Truth { y, b }
    }

    fn at(&self, v: &[f64], n: usize, m: usize) -> f64 {
        v[n * (N_TRUE as usize + 1) + m]
    }

    /// Brute-force Poisson mixture: gain and error gain.
    fn observe(&self, mu_a: f64, mu_b: f64) -> (f64, f64) {
        let (mut q, mut eq) = (0.0, 0.0);
        for n in 0..=N_TRUE {
            for m in 0..=N_TRUE {
                let w = poisson_pn(mu_a, n) * poisson_pn(mu_b, m);
                q += w * self.at(&self.y, n as usize, m as usize);
                eq += w * self.at(&self.b, n as usize, m as usize);
            }
        }
        (q, eq)
    }
}

fn random_mu(rng: &mut ChaCha8Rng) -> ByIntensity<f64> {
    ByIntensity::new(rng.gen_range(0.15..0.6), rng.gen_range(0.005..0.12), 0.0)
}

fn synthetic_table(z: &Truth, x: &Truth, mu_a: &ByIntensity<f64>, mu_b: &ByIntensity<f64>) -> GainTable {
    GainTable::from_fn(|b, ia, ib| {
        let t = if b == Basis::Z { z } else { x };
        let (q, eq) = t.observe(mu_a[ia], mu_b[ib]);
        Cell { q, e: if q > 0.0 { eq / q } else { 0.5 } }
    })
    .unwrap()
}

#[test]
fn bounds_hold_on_random_yield_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = DecoyOptions::default();
    let mut violations = Vec::new();
    for trial in 0..100 {
        let (z, x) = (Truth::random(&mut rng), Truth::random(&mut rng));
        let (mu_a, mu_b) = (random_mu(&mut rng), random_mu(&mut rng));
        let table = synthetic_table(&z, &x, &mu_a, &mu_b);
        let r = analyze(&table, &mu_a, &mu_b, &opts).unwrap();
        let y11_z = z.at(&z.y, 1, 1);
        let s11 = s11_from_yield(y11_z, mu_a[Intensity::Signal], mu_b[Intensity::Signal]);
        let e11 = x.at(&x.b, 1, 1) / x.at(&x.y, 1, 1);
        let tol = 1e-9;
        if r.s11_z_lower > s11 * (1.0 + tol) + 1e-15 || r.e11_x_upper < e11 * (1.0 - tol) - 1e-15 {
            violations.push((trial, r.s11_z_lower, s11, r.e11_x_upper, e11));
        }
        assert!(r.y11_x_lower <= x.at(&x.y, 1, 1) * (1.0 + tol) + 1e-15);
        assert!(r.b11_x_upper >= x.at(&x.b, 1, 1) * (1.0 - tol) - 1e-15);
    }
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn tight_for_single_photon_pairs_only() {
    // Only Y11 is nonzero, so vacuum cells pin every other low-order yield.
    let k = (N_TRUE + 1) as usize;
    let mk = |y11: f64, e11: f64| {
        let mut y = vec![0.0; k * k];
        let mut b = vec![0.0; k * k];
        y[k + 1] = y11;
        b[k + 1] = y11 * e11;
        Truth { y, b }
    };
    let (z, x) = (mk(0.3, 0.0), mk(0.3, 0.04));
    let mu = ByIntensity::new(0.4, 0.05, 0.0);
    let table = synthetic_table(&z, &x, &mu, &mu);
    let r = analyze(&table, &mu, &mu, &DecoyOptions::default()).unwrap();
    assert!(r.e11_x_upper >= 0.04 * (1.0 - 1e-9));
    assert!(r.e11_x_upper < 0.2, "{}", r.e11_x_upper);
    assert!(r.y11_z_lower <= 0.3 * (1.0 + 1e-9));
}

fn consistent_lab(loss_db: f64) -> ScenarioConfig {
    let mut s = fixtures::reported_scenario(Environment::Lab);
    s.alice.specs = s.alice.specs.signal_shared();
    s.bob.specs = s.bob.specs.signal_shared();
    let extra = loss_db - s.link.total_db();
    s.link.loss_db_alice += extra / 2.0;
    s.link.loss_db_bob += extra / 2.0;
    s.detection.noise_rate = 1.0e4;
    s
}

#[test]
fn y11_bound_close_to_model_yield() {
    let s = consistent_lab(19.0);
    let table = full_gain_table(&s).unwrap();
    let (y11_true, _) = single_photon_pair_yield(&s, Basis::Z).unwrap();
    let y = yield_bounds(&table, &s.alice.mu, &s.bob.mu, Basis::Z, Objective::MinY11, &DecoyOptions::default()).unwrap();
    assert!(y <= y11_true * (1.0 + 1e-6), "{y} > {y11_true}");
    assert!(y >= 0.75 * y11_true, "{y} vs {y11_true}");
}

#[test]
fn cutoff_insensitive() {
    let mut s = consistent_lab(19.0);
    s.alice.mu = ByIntensity::new(0.6, 0.05, 0.0);
    s.bob.mu = ByIntensity::new(0.55, 0.04, 0.0);
    let table = full_gain_table(&s).unwrap();
    let run = |n| {
        let o = DecoyOptions {
            n_cut: Some(n),
            ..DecoyOptions::default()
        };
        analyze(&table, &s.alice.mu, &s.bob.mu, &o).unwrap()
    };
    let (a, b) = (run(10), run(15));
    for (x, y) in [
        (a.y11_z_lower, b.y11_z_lower),
        (a.y11_x_lower, b.y11_x_lower),
        (a.b11_x_upper, b.b11_x_upper),
    ] {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()), "{x} vs {y}");
    }
}

#[test]
fn constraint_order_does_not_matter() {
    let s = consistent_lab(28.0);
    let table = full_gain_table(&s).unwrap();
    let opts = DecoyOptions::default();
    for (basis, with_errors) in [(Basis::Z, false), (Basis::X, false), (Basis::X, true)] {
        let mut prog = build_program(&table, &s.alice.mu, &s.bob.mu, basis, with_errors, &opts, None).unwrap();
        let k = prog.idx11();
        let nv = prog.num_yields();
        if with_errors {
            prog.lp.cost[nv + k] = -1.0;
        } else {
            prog.lp.cost[k] = 1.0;
        }
        let base = prog.lp.solve().unwrap().objective;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mut lp = prog.lp.clone();
            for i in (1..lp.rows.len()).rev() {
                let j = rng.gen_range(0..=i);
                lp.rows.swap(i, j);
            }
            let o = lp.solve().unwrap().objective;
            assert!((o - base).abs() <= 1e-9 * base.abs().max(1.0), "{o} vs {base}");
        }
    }
}

#[test]
fn added_noise_never_raises_key_rate() {
    let s = consistent_lab(19.0);
    let table = full_gain_table(&s).unwrap();
    let opts = DecoyOptions::default();
    let mut prev = f64::INFINITY;
    for delta in [0.0, 1e-7, 1e-6, 3e-6, 1e-5, 3e-5, 1e-4] {
        let noisy = GainTable::from_fn(|b, ia, ib| {
            let c = table.get(b, ia, ib);
            let q = c.q + delta;
            Cell {
                q,
                e: (c.e * c.q + 0.5 * delta) / q,
            }
        })
        .unwrap();
        let r = analyze(&noisy, &s.alice.mu, &s.bob.mu, &opts).unwrap().r_clamped;
        assert!(r <= prev * (1.0 + 1e-9), "rate rose at {delta}: {r} > {prev}");
        prev = r;
    }
}

#[test]
fn all_vacuum_table_is_degenerate() {
    let table = GainTable::from_fn(|_, _, _| Cell { q: 0.0, e: 0.5 }).unwrap();
    let mu = ByIntensity::new(0.3, 0.04, 0.0);
    let r = analyze(&table, &mu, &mu, &DecoyOptions::default()).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.e11_x_upper, 0.5);
    assert_eq!(r.r_clamped, 0.0);
}

#[test]
fn noise_only_table_yields_no_key() {
    let table = GainTable::from_fn(|_, _, _| Cell { q: 1e-7, e: 0.5 }).unwrap();
    let mu = ByIntensity::new(0.3, 0.04, 0.0);
    let r = analyze(&table, &mu, &mu, &DecoyOptions::default()).unwrap();
    assert!(r.e11_x_upper >= 0.5 - 1e-9);
    assert!(r.r < 0.0);
    assert_eq!(r.r_clamped, 0.0);
}

#[test]
fn inconsistent_table_reports_violated_rows() {
    let s = consistent_lab(19.0);
    let table = full_gain_table(&s).unwrap();
    let q = table.q(Basis::Z, Intensity::Vacuum, Intensity::Vacuum);
    // Vacuum-vacuum gain far above what the decoy rows allow.
    let bad = table
        .with_cell(Basis::Z, Intensity::Vacuum, Intensity::Vacuum, Cell { q: q * 1e3, e: 0.5 })
        .unwrap();
    match analyze(&bad, &s.alice.mu, &s.bob.mu, &DecoyOptions::default()) {
        Err(DecoyError::Infeasible {
            basis,
            violated,
            min_rel_slack,
        }) => {
            assert_eq!(basis, Basis::Z);
            assert!(!violated.is_empty());
            assert!(min_rel_slack.unwrap() > 0.0);
        }
        other => panic!("expected infeasibility, got {other:?}"),
    }
}

#[test]
fn cutoff_choice() {
    assert_eq!(choose_n_cut(0.0, 1e-10), 10);
    let n = choose_n_cut(3.0, 1e-10);
    let tail = 1.0 - (0..=n).map(|k| poisson_pn(3.0, k)).sum::<f64>();
    let prev = 1.0 - (0..n).map(|k| poisson_pn(3.0, k)).sum::<f64>();
    assert!(tail < 1e-10 && prev >= 1e-10);
}

#[test]
fn formula_examples() {
    assert_eq!(s11_from_yield(0.0, 0.3, 0.3), 0.0);
    let s = s11_from_yield(0.01, 0.3, 0.3);
    assert!((s - 4.94e-4).abs() < 5e-7, "{s}");
    let (r, rc) = secret_key_rate(0.0, 0.5, 0.0, 0.5, 1.12).unwrap();
    assert_eq!((r, rc), (0.0, 0.0));
    let (r, _) = secret_key_rate(1e-4, 0.02, 2.33e-4, 0.00927, 1.12).unwrap();
    assert!((r - 6.60e-5).abs() <= 1e-7, "{r}");
    assert!(secret_key_rate(1e-4, 0.02, 2.33e-4, 0.00927, 0.9).is_err());
}
