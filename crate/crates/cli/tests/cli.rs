use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vstack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vstack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn desk33() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/desk33/desk33.json")
}

/// Two communities on a three-node chain over four slots.
const SMALL: &str = r#"{
  "horizon": { "H": 4, "dt": 1.0 },
  "tariff": {
    "kind": "tou",
    "tou_price": [0.1, 0.3, 0.5, 0.2],
    "tpt_energy_price": 0.2,
    "tpt_peak_price": 1.0,
    "feed_in_price": 0.04,
    "b2g_price": [0.0, 0.1, 0.3, 0.0]
  },
  "feeder": {
    "branches": [
      { "from": 0, "to": 1, "r_ohm": 0.3, "x_ohm": 0.2 },
      { "from": 1, "to": 2, "r_ohm": 0.3, "x_ohm": 0.2 }
    ]
  },
  "options": { "rho": 0.5 },
  "communities": [
    {
      "node": 1,
      "battery": { "capacity_upper": 100, "capacity_lower": 10, "charge_max": 15, "discharge_max": 15,
                   "eff_charge": 0.95, "eff_discharge": 0.95, "initial_energy": 50, "degradation_coeff": 0.001 },
      "hvac": { "thermal_capacitance": 5, "thermal_resistance": 2, "mode": 1, "power_min": 0, "power_max": 5,
                "temp_min": 10, "temp_max": 35, "temp_pref": 22, "discomfort_coeff": 0.05, "initial_indoor_temp": 22 },
      "limits": { "grid_max": 200, "et_buy_max": 8, "et_sell_max": 8, "b2g_max": 5 },
      "series": { "pv": [0, 12, 14, 2], "load": [40, 38, 45, 42], "temp": 27, "qload": 2 }
    },
    {
      "node": 2,
      "battery": { "capacity_upper": 100, "capacity_lower": 10, "charge_max": 10, "discharge_max": 10,
                   "eff_charge": 0.9, "eff_discharge": 0.9, "initial_energy": 40, "degradation_coeff": 0.001 },
      "hvac": { "thermal_capacitance": 5, "thermal_resistance": 2, "mode": 1, "power_min": 0, "power_max": 5,
                "temp_min": 10, "temp_max": 35, "temp_pref": 22, "discomfort_coeff": 0.05, "initial_indoor_temp": 21 },
      "limits": { "grid_max": 200, "et_buy_max": 8, "et_sell_max": 8, "b2g_max": 5 },
      "series": { "pv": 3, "load": [36, 44, 48, 39], "temp": 26 }
    }
  ]
}"#;

fn small(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn centralized_run_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let sc = small(dir.path());
    let o = vstack(&[
        "run",
        "--scenario",
        sc.to_str().unwrap(),
        "--solver",
        "centralized",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&read(&out, "solution.json")).unwrap();
    assert!(json["total_cost"].is_number());
    assert!(read(&out, "breakdown.csv").lines().count() >= 3);
    assert!(read(&out, "trace.csv").starts_with("iter,r_primal,r_dual,objective,n_active\n"));
}

#[test]
fn desk33_centralized_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = vstack(&[
        "run",
        "--scenario",
        desk33().to_str().unwrap(),
        "--solver",
        "centralized",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["solution.json", "breakdown.csv", "trace.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path());
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("o{k}"));
        let o = vstack(&[
            "run",
            "--scenario",
            sc.to_str().unwrap(),
            "--solver",
            "async",
            "--latency",
            "bernoulli:0.3",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    for f in ["solution.json", "breakdown.csv", "trace.csv"] {
        assert_eq!(
            fs::read(outs[0].join(f)).unwrap(),
            fs::read(outs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_filled_latency_does_not_converge_on_desk33() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = vstack(&[
        "run",
        "--scenario",
        desk33().to_str().unwrap(),
        "--solver",
        "sync-latency",
        "--latency",
        "trace:arrivals.csv",
        "--max-iter",
        "500",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&out, "trace.csv").lines().count(), 501);
}

#[test]
fn small_iteration_cap_is_not_converged() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path());
    let out = dir.path().join("o");
    let o = vstack(&[
        "run",
        "--scenario",
        sc.to_str().unwrap(),
        "--solver",
        "sync",
        "--max-iter",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(out.join("solution.json").exists());
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    let missing = vstack(&[
        "run",
        "--scenario",
        "/nonexistent/s.json",
        "--solver",
        "centralized",
        "--out",
        o,
    ]);
    assert_eq!(code(&missing), 1);
    assert!(!missing.stderr.is_empty());
    assert_eq!(code(&vstack(&["run", "--solver", "centralized", "--out", o])), 1);
    assert_eq!(code(&vstack(&["marginal", "--tariff", "tou", "--out", o])), 1);
    assert_eq!(
        code(&vstack(&["run", "--scenario", "x", "--solver", "simplex", "--out", o])),
        1
    );
    let sc = small(dir.path());
    let bad = vstack(&[
        "run",
        "--scenario",
        sc.to_str().unwrap(),
        "--solver",
        "async",
        "--latency",
        "bernoulli:2",
        "--out",
        o,
    ]);
    assert_eq!(code(&bad), 1);
    fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let broken = dir.path().join("broken.json");
    assert_eq!(
        code(&vstack(&[
            "run",
            "--scenario",
            broken.to_str().unwrap(),
            "--solver",
            "sync",
            "--out",
            o
        ])),
        1
    );
}

#[test]
fn compare_writes_three_mode_columns() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path());
    let out = dir.path().join("o");
    let o = vstack(&[
        "compare",
        "--scenario",
        sc.to_str().unwrap(),
        "--latency",
        "none",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out, "compare.csv");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,sync_r_primal,sync_r_dual,sync_latency_r_primal,sync_latency_r_dual,async_r_primal,async_r_dual"
    );
    // Without latency every mode follows the same iterates.
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 7);
        assert_eq!((f[1], f[2]), (f[5], f[6]), "{line}");
        assert_eq!((f[1], f[2]), (f[3], f[4]), "{line}");
    }
    assert_eq!(read(&out, "compare_summary.csv").lines().count(), 4);
}

#[test]
fn compare_on_desk33_orders_the_modes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = vstack(&[
        "compare",
        "--scenario",
        desk33().to_str().unwrap(),
        "--latency",
        "bernoulli:0.3",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out, "compare.csv");
    let first_below = |col: usize| {
        csv.lines().skip(1).position(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse::<f64>().ok())
                .is_some_and(|v| v <= 0.01)
        })
    };
    let asy = first_below(5).expect("async reaches the primal threshold");
    if let Some(zero) = first_below(3) {
        assert!(asy < zero, "async {asy} vs sync-latency {zero}");
    }
}

#[test]
fn marginal_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small(dir.path());
    for tariff in ["tou", "tpt"] {
        let out = dir.path().join(tariff);
        let o = vstack(&[
            "marginal",
            "--scenario",
            sc.to_str().unwrap(),
            "--tariff",
            tariff,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = read(&out, "marginal.csv");
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "stream,cost_full,cost_without,cost_none,contribution_pct");
        assert_eq!(rows.len(), 4);
        let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
        assert_eq!(names, ["B2B", "B2G", "ET"]);
        let json: serde_json::Value = serde_json::from_str(&read(&out, "marginal.json")).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn marginal_on_desk33_ranks_b2b_first() {
    let dir = tempfile::tempdir().unwrap();
    for tariff in ["tou", "tpt"] {
        let out = dir.path().join(tariff);
        let o = vstack(&[
            "marginal",
            "--scenario",
            desk33().to_str().unwrap(),
            "--tariff",
            tariff,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = read(&out, "marginal.csv");
        let best = csv
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[4].parse::<f64>().unwrap())
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(best.0, "B2B", "{tariff}: {csv}");
    }
}
