use mdi_core::coexistence::*;
use mdi_core::fit::*;
use mdi_core::fixtures::{self, Condition, Environment};
use mdi_core::forward::{full_gain_table, ScenarioConfig};
use mdi_core::model::*;
use mdi_core::pipeline::*;
use mdi_core::table_io::PartialTable;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

#[test]
fn received_power_examples() {
    assert_eq!(received_power(3.3e-6, 0.0), 3.3e-6);
    assert!((received_power(4.68e-6, 9.71) - 0.50e-6).abs() < 0.005e-6);
    assert!((received_power(10.8e-6, 13.0) - 0.54e-6).abs() < 0.005e-6);
}

#[test]
fn channel_counts() {
    assert_eq!(channel_capacity_estimate(150e-6, 3.571e-6), 42);
    assert_eq!(channel_capacity_estimate(400e-6, 3.509e-6), 114);
    assert_eq!(channel_capacity_estimate(0.0, 3.5e-6), 0);
    assert_eq!(channel_capacity_estimate(10e-6, 3e-6), 3);
}

proptest! {
    #[test]
    fn noise_is_affine(base in 0.0f64..1e6, slope in 0.0f64..1e11, p in 0.0f64..1e-3, h in 1e-7f64..1e-4) {
        let m = NoiseModel { base_dark_rate: base, raman_slope: slope };
        let d2 = noise_rate(&m, p + 2.0 * h) - 2.0 * noise_rate(&m, p + h) + noise_rate(&m, p);
        let scale = noise_rate(&m, p + 2.0 * h).max(1.0);
        prop_assert!(d2.abs() <= 1e-12 * scale);
        prop_assert_eq!(noise_rate(&m, 0.0), base);
    }
}

#[test]
fn leakage_is_far_below_one_photon_per_slot() {
    let iso = IsolationBudget::default();
    let launches = [4.68e-6, 11.8e-6, 15.0e-6, 61.7e-6, 155e-6, 392e-6, 10.8e-6, 100e-6];
    for p in launches {
        let n = iso.leakage_photons_per_slot(p, 1550.12, 100e6);
        assert!(n < 1.0, "{p}: {n}");
    }
    let direct = 392e-6 * 10f64.powf(-9.5);
    assert!((iso.leakage_power(392e-6) - direct).abs() <= 1e-12 * direct);
}

#[test]
fn zero_launch_changes_only_background() {
    let s = fixtures::reported_scenario(Environment::Lab);
    let m = NoiseModel {
        base_dark_rate: 4.0e4,
        raman_slope: 5.0e9,
    };
    let t = apply_coexistence(&s, &m, 0.0);
    assert_eq!(t.detection.noise_rate, 1.0e4);
    let mut back = t;
    back.detection.noise_rate = s.detection.noise_rate;
    assert_eq!(back, s);
}

#[test]
fn anchored_model_reproduces_reference_noise() {
    let s = fixtures::reported_scenario(Environment::Lab);
    let m = NoiseModel::anchored(&s, 4.68e-6, 1.0e9);
    let t = apply_coexistence(&s, &m, 4.68e-6);
    assert!((t.detection.noise_rate - s.detection.noise_rate).abs() < 1e-9);
}

fn keyed_scenario() -> ScenarioConfig {
    let mut s = fixtures::reported_scenario(Environment::Lab);
    s.alice.specs = s.alice.specs.signal_shared();
    s.bob.specs = s.bob.specs.signal_shared();
    s.alice.mu = ByIntensity::new(0.27, 0.015, 0.0);
    s.bob.mu = ByIntensity::new(0.22, 0.02, 0.0);
    s.detection.visibility = 0.82;
    s.detection.dark_rate = 2900.0;
    s.detection.noise_rate = 3.4e4;
    s
}

#[test]
fn key_rate_falls_with_launch_power() {
    let s = keyed_scenario();
    let m = NoiseModel::anchored(&s, 4.68e-6, 6.5e9);
    let pts: Vec<f64> = [0.0, 4.68, 15.0, 61.7, 155.0, 392.0, 600.0].iter().map(|p| p * 1e-6).collect();
    let rep = sweep_power(&s, &m, &pts, &PipelineOptions::default()).unwrap();
    assert!(rep.warnings.is_empty(), "{:?}", rep.warnings);
    assert!(rep.points[0].r_clamped > 0.0);
    for w in rep.points.windows(2) {
        assert!(w[1].r_clamped <= w[0].r_clamped);
        assert!(w[1].noise_cps > w[0].noise_cps);
    }
}

#[test]
fn key_rate_falls_with_loss() {
    let s = keyed_scenario();
    let pts = [19.0, 25.0, 31.0, 37.0, 43.0];
    let rep = sweep_loss(&s, &pts, &PipelineOptions::default()).unwrap();
    assert!(rep.warnings.is_empty(), "{:?}", rep.warnings);
    for w in rep.points.windows(2) {
        assert!(w[1].r_clamped <= w[0].r_clamped);
    }
}

#[test]
fn sweep_grids_must_increase() {
    assert!(matches!(check_grid(&[]), Err(PipelineError::EmptyGrid)));
    assert!(matches!(
        check_grid(&[1.0, 3.0, 3.0]),
        Err(PipelineError::NotIncreasing { index: 2, .. })
    ));
    assert!(check_grid(&[1.0, 2.0]).is_ok());
}

#[test]
fn loss_change_is_split_evenly() {
    let s = keyed_scenario();
    let t = scenario_at_loss(&s, 29.0).unwrap();
    assert!((t.link.total_db() - 29.0).abs() < 1e-12);
    assert!((t.link.loss_db_alice - s.link.loss_db_alice - 5.0).abs() < 1e-12);
    let want = s.detection.noise_rate * 10f64.powf(-0.5);
    assert!((t.detection.noise_rate - want).abs() <= 1e-12 * want);
    assert_eq!(t.detection.dark_rate, s.detection.dark_rate);
    assert!(scenario_at_loss(&s, 0.0).is_err());
}

#[test]
fn fit_recovers_generating_parameters() {
    let mut truth = keyed_scenario();
    truth.detection.visibility = 0.8;
    let data: Vec<MeasuredTable> = [19.0, 28.0, 35.0]
        .iter()
        .map(|&loss| MeasuredTable {
            loss_db: loss,
            cells: PartialTable::from(&full_gain_table(&scenario_at_loss(&truth, loss).unwrap()).unwrap()),
            exclude: Vec::new(),
        })
        .collect();
    let mut start = truth;
    start.alice.mu = ByIntensity::new(0.35, 0.03, 0.0);
    start.bob.mu = ByIntensity::new(0.3, 0.03, 0.0);
    start.detection.visibility = 0.9;
    start.detection.dark_rate = 1000.0;
    start.detection.noise_rate = 1.0e4;
    let r = fit_tables(&start, &data, &FitOptions::default()).unwrap();
    assert!(r.converged);
    for p in FitParam::DEFAULT_FREE {
        let (got, want) = (r.value(p), p.value(&truth));
        assert!((got - want).abs() <= 1e-3 * want, "{}: {got} vs {want}", p.name());
    }
    assert!(r.residual < 1e-4);
}

#[test]
fn fit_rejects_bad_requests() {
    let s = keyed_scenario();
    let one = vec![MeasuredTable {
        loss_db: 19.0,
        cells: PartialTable::from(&full_gain_table(&s).unwrap()),
        exclude: Vec::new(),
    }];
    assert!(matches!(
        fit_tables(&s, &one, &FitOptions::default()),
        Err(FitError::TooFewTables { need: 2, got: 1 })
    ));
    let opts = FitOptions {
        free: Vec::new(),
        min_tables: 1,
        ..FitOptions::default()
    };
    assert!(matches!(fit_tables(&s, &one, &opts), Err(FitError::NothingFree)));
}

#[test]
fn iteration_limit_is_reported() {
    let data = bundled_measurements(Environment::Lab);
    let opts = FitOptions {
        max_iter: 1,
        ..FitOptions::default()
    };
    let r = fit_tables(&fit_start(Environment::Lab), &data, &opts).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(!r.converged);
    assert!(r.residual.is_finite());
}

#[test]
fn bundled_lab_fit_is_physical() {
    let r = fit_bundled(Environment::Lab, &FitOptions::default()).unwrap();
    assert!(r.converged);
    assert!(r.residual.is_finite());
    let s = r.scenario;
    s.validate().unwrap();
    assert!((0.0..=1.0).contains(&s.detection.visibility));
    for e in &r.estimates {
        assert!(e.value >= 0.0 && e.stderr.is_finite(), "{e:?}");
    }
}

#[test]
fn parameter_names_round_trip() {
    for p in FitParam::ALL {
        assert_eq!(FitParam::parse(p.name()), Some(p));
    }
    assert_eq!(FitParam::parse("bogus"), None);
}

const CHECKSUMS: &[(&str, &str)] = &[
    ("table1_x_deployed_26db.csv", "a334cc5e1f191f24f99a639f80b78d1d3831ee93364021e7d7435c27afda5c01"),
    ("table1_x_deployed_35db.csv", "c8dddd36e3886fd408acbec4182ee516466745a2d1f47459735d6b6eac9a2d4b"),
    ("table1_x_deployed_44db.csv", "4c63adc9d4d0010da058a9ae4beb338b9a369831233bd83df4ed8076ce542638"),
    ("table1_x_lab_19db.csv", "d6ccb7388b7c07e3b0d7cc9827b550d5815305e51bf7a221d2bcf3b01f4dca03"),
    ("table1_x_lab_28db.csv", "888aa141aa8516f0974fc7305dcbce264c4dadd74da7073ac6635fd53a108664"),
    ("table1_x_lab_35db.csv", "fc0c38f80d5cabd1dc7e9e8a12fdbf6b9fd4deb20d3b12cf046ea696a12c7572"),
    ("table1_x_lab_43db.csv", "c2faa1c531a8b54e1c7997d6ccffaa58684df08fecd181cfdbf15a178ebf8b26"),
    ("table1_x_lab_48db.csv", "41e2d7c57296e38a1ed2528d7421ebb289ec8492cd2e69702f0e43099e3105a3"),
    ("table2_z_deployed_26db.csv", "fe03ca263fc5c677aeb3d9527160fd51a79fde90eba6ff8df2e681ac9655d64b"),
    ("table2_z_deployed_35db.csv", "653de7a9defd5dc4b3307228a6fb764e2bd0988b7d508a5c7f4e128b8b484941"),
    ("table2_z_deployed_44db.csv", "2ee476e94224edd256a28dfeae4b09727bc95cdbdef8ad72ee46c5ea659defb4"),
    ("table2_z_lab_19db.csv", "c112c94c54c67d39a249656a580447833bf68e9272ada23dde4ba1974767808f"),
    ("table2_z_lab_28db.csv", "60c295bb741599607103766210fe74b577352a625e273071583bb0dd3ec41783"),
    ("table2_z_lab_35db.csv", "fb6f206674ad7e33da28d0721f4d0166268007d344d98d09f527a8498ac16146"),
    ("table2_z_lab_43db.csv", "e5fc9a869ec590113fd18bf309274a0cff00fc9b208b33ff6dd6a67f58b9d617"),
    ("table2_z_lab_48db.csv", "1952048db25ee48dfb06e194496a385febea1c43ff14bb0e7a3dd0a1e35a97a7"),
    ("table3_x_launch_deployed_10.8uw.csv", "e1c58cd458c7c7a31e8c3d9e5be6830132613d809a9bb81eb31cefd6f51eb712"),
    ("table3_x_launch_lab_11.8uw.csv", "1d90c12cd9ce99fce5487ecca8d3829f54e9af34e208bdbd84c10873d8a6b3e6"),
    ("table3_x_launch_lab_15.0uw.csv", "58c5d2019a3741da5978b32a90f3ef32b8da46617ff9c0ddeea98c532df4ec19"),
    ("table3_x_launch_lab_155uw.csv", "2012985280acc10873daa100de1ad795c857a5a307fbb7ad30f546669d9255a5"),
    ("table3_x_launch_lab_392uw.csv", "3fce1905b4343d451b84e7fe81d6c083959081d1d90d9edd8fa7d55a20f01bb7"),
    ("table3_x_launch_lab_4.68uw.csv", "d6ccb7388b7c07e3b0d7cc9827b550d5815305e51bf7a221d2bcf3b01f4dca03"),
    ("table3_x_launch_lab_61.7uw.csv", "ddd67c51b0b9895f6312b2f7e3c8466bfd259873cf26a0d854d41f241cacae2a"),
    ("table4_z_launch_deployed_10.8uw.csv", "e3a9b69ab24301059afe763479c6ad8f6ea6f192923c3366878d38952584b572"),
    ("table4_z_launch_lab_11.8uw.csv", "ff91d81cf5f370dc1b47d5009934f430f973e80d9b479e408856748e15e4c547"),
    ("table4_z_launch_lab_15.0uw.csv", "12d33eba3942a03212519aef744b7a5ee3710cff7416c749b84fd9dc9ce9f97e"),
    ("table4_z_launch_lab_155uw.csv", "084e5d157e169b09887d131b0fcac80dc524c7413edde0f6f5a8dd2b9566e81d"),
    ("table4_z_launch_lab_392uw.csv", "ca312efe07c22a9e47205eacf73c3e899e06bac992312621945c54c6c5f4e0c4"),
    ("table4_z_launch_lab_4.68uw.csv", "255aac788f329209588a5031fa0fba2545f3dd628294c8079e52ba241103c7cc"),
    ("table4_z_launch_lab_61.7uw.csv", "a0d56cb7510d22e8d759260f4949210d3dfaf9f96d5b6b6e882be4c46bea118d"),
];

#[test]
fn fixtures_match_checksums() {
    assert_eq!(fixtures::FILES.len(), CHECKSUMS.len());
    for (name, want) in CHECKSUMS {
        let (_, text) = fixtures::FILES.iter().find(|(n, _)| n == name).expect(name);
        let got: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(&got, want, "{name}");
    }
    let index: String = Sha256::digest(fixtures::INDEX_CSV.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(index, "0704acb031da38219ee09f77770f8e20145036e1554dac038e93ed616b645c20");
}

#[test]
fn bundled_tables_are_complete() {
    for env in [Environment::Lab, Environment::Deployed] {
        for loss in fixtures::loss_points(env) {
            fixtures::combined(env, Condition::LossDb(loss)).unwrap();
        }
        for (p, r) in fixtures::launch_points(env) {
            assert!(r > 0.0);
            fixtures::combined(env, Condition::Launch(p)).unwrap();
        }
    }
    let (t, r) = fixtures::combined(Environment::Lab, Condition::LossDb(19.0)).unwrap();
    assert_eq!(r, 2.10e-7);
    assert_eq!(t.q(Basis::X, Intensity::Signal, Intensity::Signal), 4.94e-4);
    assert_eq!(t.e(Basis::X, Intensity::Signal, Intensity::Signal), 0.295);
    assert_eq!(t.q(Basis::Z, Intensity::Signal, Intensity::Signal), 2.33e-4);
    assert_eq!(t.e(Basis::Z, Intensity::Signal, Intensity::Signal), 0.00927);
}
