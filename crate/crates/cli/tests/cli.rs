use std::path::Path;
use std::process::{Command, Output};

use mdi_cli::config::RunConfig;
use mdi_core::fixtures::Environment;
use proptest::prelude::*;

fn mdiqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdiqkd"))
        .args(args)
        .env("MDIQKD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_config_round_trips() {
    for cfg in [RunConfig::default(), RunConfig::for_environment(Environment::Deployed)] {
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }
}

proptest! {
    #[test]
    fn edited_config_round_trips(
        seed in 0u64..(i64::MAX as u64),
        loss_a in 0.0f64..40.0,
        loss_b in 0.0f64..40.0,
        vis in 0.0f64..=1.0,
        noise in 0.0f64..1e6,
        mu_s in 0.1f64..1.0,
        launch in 0.1f64..500.0,
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.link.loss_db_alice = loss_a;
        cfg.link.loss_db_bob = loss_b;
        cfg.detection.visibility = vis;
        cfg.detection.noise_rate_cps = noise;
        cfg.alice.mu_signal = mu_s;
        for c in cfg.plan.channels.iter_mut().filter(|c| c.name == "hbn" || c.name == "lbn") {
            c.launch_uw = launch;
        }
        let once = RunConfig::parse(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&once, &cfg);
        let twice = RunConfig::parse(&once.to_toml()).unwrap();
        prop_assert_eq!(twice, once);
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let text = RunConfig::default().to_toml();
    assert!(RunConfig::parse(&text.replace("window_ps", "window_ns")).is_err());
    let mut cfg = RunConfig::default();
    cfg.detection.visibility = 1.5;
    assert!(RunConfig::parse(&cfg.to_toml()).is_err());
    let mut cfg = RunConfig::default();
    cfg.sweep.points = vec![30.0, 20.0];
    assert!(RunConfig::parse(&cfg.to_toml()).is_err());
}

#[test]
fn gains_csv_has_header_and_eighteen_rows() {
    let o = mdiqkd(&["gains"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("basis,mu_a,mu_b,Q,E"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 18);
    for r in rows {
        let q: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&q));
    }
}

#[test]
fn sweep_csv_header() {
    let o = mdiqkd(&["sweep-loss", "--points", "19,28"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next(), Some("axis,R,R_clamped,noise_cps"));
    let o = mdiqkd(&["sweep-power", "--points", "1,10"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next(), Some("axis,R,R_clamped,noise_cps"));
}

#[test]
fn exit_codes() {
    assert_eq!(mdiqkd(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(mdiqkd(&["sweep-loss", "--points", "30,20"]).status.code(), Some(2));
    assert_eq!(mdiqkd(&["--config", "/nonexistent/run.toml", "gains"]).status.code(), Some(3));
    assert_eq!(mdiqkd(&["decoy", "--bundled", "mars:19db"]).status.code(), Some(2));
    assert_eq!(mdiqkd(&["--rounds", "0", "session"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mdiqkd"))
        .arg("gains")
        .env("MDIQKD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_table_reports_constraints() {
    let o = mdiqkd(&["decoy", "--bundled", "lab:35db"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("violated"), "{err}");
    assert!(err.contains("slack"), "{err}");
}

#[test]
fn decoy_reads_table_files() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("gains.csv");
    assert!(mdiqkd(&["--output", path(&table), "gains"]).status.success());
    let o = mdiqkd(&["decoy", "--rel-slack", "1", path(&table)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("quantity,value\n"));
    assert!(text.contains("\nR_clamped,"));
    assert_eq!(mdiqkd(&["decoy"]).status.code(), Some(2));
}

#[test]
fn montecarlo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let ta = dir.path().join("ta.csv");
    let tb = dir.path().join("tb.csv");
    let args = |out: &Path, t: &Path| {
        vec![
            "--seed".to_string(),
            "5".into(),
            "--rounds".into(),
            "200000".into(),
            "--output".into(),
            path(out).into(),
            "montecarlo".into(),
            "--table".into(),
            path(t).into(),
        ]
    };
    let run = |v: Vec<String>| {
        let v: Vec<&str> = v.iter().map(String::as_str).collect();
        assert!(mdiqkd(&v).status.success());
    };
    run(args(&a, &ta));
    run(args(&b, &tb));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&ta).unwrap(), std::fs::read(&tb).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("basis,mu_a,mu_b,sent,psi_minus,errors,Q,Q_stderr,E,flag\n"));
}

#[test]
fn session_log_replays_to_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.log");
    let r1 = dir.path().join("r1.txt");
    let r2 = dir.path().join("r2.txt");
    let o = mdiqkd(&[
        "--rounds",
        "100000",
        "--output",
        path(&r1),
        "session",
        "--log",
        path(&log),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(mdiqkd(&["--output", path(&r2), "session", "--replay", path(&log)]).status.success());
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let first = std::fs::read_to_string(&log).unwrap();
    let fields: Vec<&str> = first.lines().next().unwrap().split('\t').collect();
    assert_eq!(fields.len(), 4);
}

#[test]
fn fit_writes_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fitted.toml");
    let o = mdiqkd(&["--output", path(&out), "fit", "--bundled", "deployed"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = RunConfig::load(path(&out)).unwrap();
    let s = cfg.scenario().unwrap();
    assert!((s.link.total_db() - 26.0).abs() < 1e-9);
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("overlap"), "{err}");
    assert!(mdiqkd(&["--config", path(&out), "keyrate"]).status.success());
}

#[test]
fn fit_from_table_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut truth = RunConfig::default();
    truth.detection.noise_rate_cps = 0.0;
    let mut args: Vec<String> = Vec::new();
    for loss in ["19", "28", "35"] {
        let cfg_path = dir.path().join(format!("s{loss}.toml"));
        let mut cfg = truth.clone();
        let extra = loss.parse::<f64>().unwrap() - 19.0;
        cfg.link.loss_db_alice += extra / 2.0;
        cfg.link.loss_db_bob += extra / 2.0;
        std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
        let table = dir.path().join(format!("t{loss}.csv"));
        assert!(mdiqkd(&["--config", path(&cfg_path), "--output", path(&table), "gains"]).status.success());
        args.push("--table".into());
        args.push(format!("{loss}:{}", path(&table)));
    }
    let mut start = truth.clone();
    start.detection.visibility = 0.9;
    start.detection.dark_rate_cps = 1000.0;
    let start_path = dir.path().join("start.toml");
    std::fs::write(&start_path, start.to_toml()).unwrap();
    let out = dir.path().join("fit.toml");
    let mut full = vec!["--config".to_string(), path(&start_path).into(), "--output".into(), path(&out).into(), "fit".into()];
    full.extend(args);
    full.extend(["--free".into(), "overlap,dark_rate".into(), "--exclude".into(), "35:X:s:d".into()]);
    let v: Vec<&str> = full.iter().map(String::as_str).collect();
    let o = mdiqkd(&v);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fitted = RunConfig::load(path(&out)).unwrap();
    assert!((fitted.detection.visibility - truth.detection.visibility).abs() < 1e-6, "{}\n{}", String::from_utf8_lossy(&o.stderr), fitted.to_toml());
    assert!((fitted.detection.dark_rate_cps - truth.detection.dark_rate_cps).abs() < 1e-3 * truth.detection.dark_rate_cps);
    assert_eq!(mdiqkd(&["fit", "--free", "bogus", "--bundled", "lab"]).status.code(), Some(2));
}
