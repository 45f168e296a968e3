use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_superlimb-sim"));
    cmd.env_remove("SUPERLIMB_LOG");
    cmd
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Shortened copy of the pendulum scenario.
fn short_pendulum(dir: &TempDir, duration: f64) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(scenario("pendulum.json")).unwrap()).unwrap();
    v["sim"]["duration"] = duration.into();
    let path = dir.path().join("pendulum.json");
    fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn run_writes_complete_finite_log() {
    let dir = TempDir::new().unwrap();
    let cfg = short_pendulum(&dir, 0.05);
    let out_path = dir.path().join("log.csv");
    let out = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let mut rdr = csv::Reader::from_path(&out_path).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[0], "t");
    assert!(header.iter().any(|h| h == "q_s1"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 500);
    for row in &rows {
        assert_eq!(row.len(), header.len());
        for field in row.iter() {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite());
        }
    }
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = TempDir::new().unwrap();
    let cfg = short_pendulum(&dir, 0.02);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = run(&["run", "--config", cfg.to_str().unwrap(), "--out", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn invalid_config_names_the_key_and_exits_1() {
    let dir = TempDir::new().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(scenario("pendulum.json")).unwrap()).unwrap();
    v["sim"]["dt"] = 0.0.into();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let out = run(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("sim.dt"), "{}", stderr(&out));
}

#[test]
fn unknown_field_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(scenario("pendulum.json")).unwrap()).unwrap();
    v["sim"]["stepsize"] = 0.1.into();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let out = run(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("sim"), "{}", stderr(&out));
}

#[test]
fn missing_file_exits_1() {
    let out = run(&["run", "--config", "/nonexistent/scenario.json", "--out", "/tmp/never.csv"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing file"), "{}", stderr(&out));
}

#[test]
fn bad_arguments_exit_1_and_help_exits_0() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["run"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn analyze_stability_reports_inverted_pendulum() {
    let out = run(&["analyze-stability", "--config", scenario("stability_inverted.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let field = |key: &str| -> String {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("no {key} in {text}"))
            .to_string()
    };
    // body 0.5 m above a pivot with 20 N·m/rad tilt servos: 20 - m g d per tilt axis
    let mgd = 10.0 * 9.81 * 0.5;
    assert_eq!(field("is_stable"), "false");
    assert!((field("min_eigenvalue").parse::<f64>().unwrap() - (20.0 - mgd)).abs() < 1e-3);
    assert!((field("servo_stiffness").parse::<f64>().unwrap() - (mgd + 1.0)).abs() < 1e-3);
    assert_eq!(text.lines().filter(|l| l.starts_with("eigenvalue")).count(), 6);
}

#[test]
fn unachievable_servo_margin_exits_2() {
    let dir = TempDir::new().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(scenario("stability_inverted.json")).unwrap()).unwrap();
    v["stability"]["margin"] = 1e9.into();
    v["stability"]["alpha_max"] = 10.0.into();
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let out = run(&["analyze-stability", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

fn write_profile(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("profile.csv");
    fs::write(&path, "t,activation\n0,0\n0.2,0\n0.2,0.6\n0.5,0.6\n").unwrap();
    path
}

#[test]
fn gen_emg_is_seeded() {
    let dir = TempDir::new().unwrap();
    let profile = write_profile(&dir);
    let gen = |seed: &str, name: &str| {
        let p = dir.path().join(name);
        let out = run(&["gen-emg", "--profile", profile.to_str().unwrap(), "--seed", seed, "--out", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(p).unwrap()
    };
    let a = gen("7", "a.csv");
    assert_eq!(a, gen("7", "b.csv"));
    assert_ne!(a, gen("8", "c.csv"));
    assert!(String::from_utf8(a).unwrap().starts_with("t,ch1\n"));
}

#[test]
fn emg_pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let profile = write_profile(&dir);
    let trace = dir.path().join("emg.csv");
    let out = run(&["gen-emg", "--profile", profile.to_str().unwrap(), "--seed", "1", "--out", trace.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // yaw below the gate threshold throughout
    let motion = dir.path().join("yaw.csv");
    fs::write(&motion, "t,yaw_rad\n0,0\n0.25,0.1\n").unwrap();
    let result = dir.path().join("out.csv");
    let out = run(&[
        "emg-pipeline",
        "--in",
        trace.to_str().unwrap(),
        "--motion",
        motion.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(&result).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["t", "envelope", "activation", "force_n", "gate", "dxeq_m"]
    );
    let mut peak_activation: f64 = 0.0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let a: f64 = rec[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&a));
        peak_activation = peak_activation.max(a);
        assert_eq!(&rec[4], "0");
        assert_eq!(rec[5].parse::<f64>().unwrap(), 0.0);
    }
    assert!(peak_activation > 0.3, "activation never rose: {peak_activation}");

    // without a motion stream the gate stays open and the shift follows the force
    let out = run(&["emg-pipeline", "--in", trace.to_str().unwrap(), "--out", result.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(&result).unwrap();
    let last = rdr.records().last().unwrap().unwrap();
    assert_eq!(&last[4], "1");
    assert!(last[5].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn malformed_trace_exits_1() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("emg.csv");
    fs::write(&trace, "t,ch1\n0,0.1\n0.0005,abc\n").unwrap();
    let out = run(&["emg-pipeline", "--in", trace.to_str().unwrap(), "--out", dir.path().join("o.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}
