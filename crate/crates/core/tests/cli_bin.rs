//! Black-box tests of the compiled binary: flag surface, config files, and
//! output files.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mir-sim"))
}

#[test]
fn noiseless_run_reports_bit_exact_users() {
    let out = bin()
        .args([
            "--K",
            "5",
            "--L",
            "3",
            "--t",
            "2",
            "--mode",
            "noiseless",
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.matches("bit-exact").count(), 5, "{stdout}");
    assert!(stdout.contains("uplink 3/5 downlink 3/5"));
}

#[test]
fn invalid_parameters_fail_with_named_invariant() {
    let out = bin()
        .args(["--K", "3", "--L", "3", "--t", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("K >= t+L"), "{stderr}");
}

#[test]
fn gamma_sweep_writes_csv() {
    let dir = std::env::temp_dir().join("mir_sim_bin_sweep");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("sweep.csv");
    let out = bin()
        .args(["--gamma-sweep", "--K", "10", "--L", "4", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&path).unwrap();
    assert!(csv.starts_with("gamma,t,strategy,T_ul,T_dl\n"));
    assert!(csv.contains("0.200000,2.000000,proposed,1.333333,1.333333"));
    std::fs::remove_file(&path).unwrap();
}

#[test]
fn config_file_drives_a_run_and_emits_outputs() {
    let dir = std::env::temp_dir().join("mir_sim_bin_cfg");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("run.cfg");
    let json_path = dir.join("result.json");
    std::fs::write(
        &cfg_path,
        format!(
            "# noisy smoke run\nK 3\nL 2\nt 1\nf 8\nmode noisy\nsnr_db 10,20\ntrials 2\nseed 3\nworkers 2\nout {}\n",
            json_path.display()
        ),
    )
    .unwrap();
    let out = bin().arg("--config").arg(&cfg_path).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(json_path.exists());
    assert!(json_path.with_extension("ber.csv").exists());
    for p in [cfg_path, json_path.with_extension("ber.csv"), json_path] {
        let _ = std::fs::remove_file(p);
    }
}
