use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sim-isac");

const SMALL: &str = r#"
carrier_frequency = 28e9
atoms_x = 3
atoms_z = 3
layers = 2
users = 2
total_power_dbm = 15.0
noise_power_dbm = -104.0
path_loss_exponent = 3.5
reference_distance = 1.0
gain_threshold_dbi = 4.0
penalty = 2.0
rng_seed = 7

[optimizer]
n_init = 2
max_iters = 8
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn grad_check_passes_on_reference_size() {
    let out = run(&["grad-check", "--m", "16", "--q", "3", "--k", "2", "--trials", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max_relative_error="));
}

#[test]
fn grad_check_tolerance_failure_exits_3() {
    // tolerances below the stencil's own truncation error cannot be met
    let out = run(&[
        "grad-check", "--m", "4", "--q", "2", "--k", "2", "--trials", "2", "--rel-tol", "1e-300", "--abs-floor", "0",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, SMALL.replace("layers = 2", "layers = 0")).unwrap();
    let out = run(&["run", "--config", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&path, format!("{SMALL}\nunknown_key = 1\n")).unwrap();
    let out = run(&["dump-propagation", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_then_beampattern() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("o");
    let od = out_dir.to_str().unwrap();
    let out = run(&["run", "--config", &cfg, "--out-dir", od, "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.contains("# seed=3"));
    let rows = data_rows(&trace);
    assert_eq!(rows[0], "iter,F,R,g_c,P_target,mu,backtracks");
    assert!(rows.len() >= 2);

    let state_path = out_dir.join("final_state.json");
    let json = fs::read_to_string(&state_path).unwrap();
    for key in ["\"omega\"", "\"p\"", "\"Psi\"", "\"alpha\""] {
        assert!(json.contains(key), "{key}");
    }

    let out = run(&[
        "beampattern",
        "--config",
        &cfg,
        "--out-dir",
        od,
        "--seed",
        "3",
        "--state",
        state_path.to_str().unwrap(),
        "--comm-only",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = fs::read_to_string(out_dir.join("beampattern.csv")).unwrap();
    let rows = data_rows(&grid);
    assert_eq!(rows[0], "theta_deg,phi_deg,gain,gain_dBi");
    assert_eq!(rows.len(), 1 + 179 * 179);
    for name in [
        "beampattern_theta_cut.csv",
        "beampattern_phi_cut.csv",
        "comm_only_beampattern.csv",
        "comm_only_beampattern_theta_cut.csv",
        "comm_only_beampattern_phi_cut.csv",
    ] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn missing_or_mismatched_state_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let od = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["beampattern", "--config", &cfg, "--out-dir", od, "--state", missing.to_str().unwrap()]);
    assert!(!out.status.success());

    let wrong = dir.path().join("wrong.json");
    fs::write(&wrong, r#"{"omega": [[0.0, 1.0]], "p": [1.0], "Psi": 0.0, "alpha": 0.0}"#).unwrap();
    let out = run(&["beampattern", "--config", &cfg, "--out-dir", od, "--state", wrong.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let od = dir.path().join(name);
        let out = run(&[
            "sweep",
            "--config",
            &cfg,
            "--out-dir",
            od.to_str().unwrap(),
            "--variable",
            "gamma",
            "--values",
            "0,4",
            "--n-ch",
            "3",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push((
            fs::read(od.join("sweep_Gamma_dBi.csv")).unwrap(),
            fs::read(od.join("sweep_Gamma_dBi_realizations.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let table = String::from_utf8(outputs[0].0.clone()).unwrap();
    let rows = data_rows(&table);
    assert_eq!(rows[0], "Gamma_dBi,mean_SE,std_SE,mean_gain_dBi,satisfaction_rate");
    assert_eq!(rows.len(), 3);
}

#[test]
fn convergence_writes_one_file_per_layer_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let od = dir.path().join("c");
    let out = run(&[
        "convergence",
        "--config",
        &cfg,
        "--out-dir",
        od.to_str().unwrap(),
        "--layers",
        "1,2",
        "--seeds",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for q in [1, 2] {
        for s in [7, 8] {
            let csv = fs::read_to_string(od.join(format!("convergence_q{q}_seed{s}.csv"))).unwrap();
            assert_eq!(data_rows(&csv)[0], "iter,F,R,g_c");
        }
    }
}

#[test]
fn dumps_have_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let od = dir.path().join("d");
    let ods = od.to_str().unwrap();
    assert!(run(&["dump-propagation", "--config", &cfg, "--out-dir", ods]).status.success());
    assert!(run(&["dump-channel", "--config", &cfg, "--out-dir", ods]).status.success());

    let w1 = fs::read_to_string(od.join("w1.csv")).unwrap();
    let rows = data_rows(&w1);
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.split(',').count() == 2 * 2));
    let w2 = fs::read_to_string(od.join("w2.csv")).unwrap();
    assert!(data_rows(&w2).iter().all(|r| r.split(',').count() == 2 * 9));
    assert!(!od.join("w3.csv").exists());

    let h = fs::read_to_string(od.join("channel_r0.csv")).unwrap();
    let rows = data_rows(&h);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').count() == 2 * 9));
    assert!(od.join("correlation.csv").exists());
    assert!(od.join("path_loss.csv").exists());
}
