use std::path::Path;
use std::process::{Command, Output};

use rampc::closed_loop::read_trajectory_csv;
use rampc::config::builtin;
use rampc::rampc::{read_iterations_csv, CertificateFile};

fn rampc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rampc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn unknown_subcommands_and_flags_exit_2() {
    assert_eq!(rampc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        rampc(&["run", "--config", "c.json", "--out", "o", "--turbo"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(rampc(&["example", "ex1"]).status.code(), Some(2));
}

#[test]
fn example_without_iterations_writes_initial_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let out = rampc(&["example", "ex2", "--out", s(dir.path()), "--max-iters", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("j=0 cost=64.3087"));
    let rows = read_iterations_csv(
        std::fs::read_to_string(dir.path().join("iterations.csv"))
            .unwrap()
            .as_bytes(),
    )
    .unwrap();
    assert_eq!(rows.len(), 1);
    let file = std::fs::File::open(dir.path().join("trajectory_0.csv")).unwrap();
    let (j, traj) = read_trajectory_csv(std::io::BufReader::new(file)).unwrap();
    assert_eq!(j, 0);
    assert_eq!(traj.len(), rows[0].episode_len);
}

#[test]
fn rollout_reports_initial_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ex3.json");
    std::fs::write(&cfg, builtin("ex3").unwrap().to_json()).unwrap();
    let out = rampc(&[
        "rollout",
        "--config",
        s(&cfg),
        "--controller",
        "init",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("cost=1.3489"));
    assert!(dir.path().join("trajectory_0.csv").is_file());
}

#[test]
fn verify_cert_accepts_issued_and_rejects_tampered_certificates() {
    let dir = tempfile::tempdir().unwrap();
    let run = rampc(&["example", "ex1", "--out", s(dir.path()), "--max-iters", "1"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let cfg = dir.path().join("ex1.json");
    std::fs::write(&cfg, builtin("ex1").unwrap().to_json()).unwrap();
    let cert = dir.path().join("cert_1.json");
    let verify = |path: &Path| {
        rampc(&[
            "verify-cert",
            "--cert",
            s(path),
            "--config",
            s(&cfg),
            "--samples",
            "2000",
        ])
    };
    let good = verify(&cert);
    assert!(good.status.success(), "{}", String::from_utf8_lossy(&good.stdout));

    let mut file = CertificateFile::from_json(&std::fs::read_to_string(&cert).unwrap()).unwrap();
    file.certificate.v = &file.certificate.v + &rampc::poly::Polynomial::constant(2, 2.0);
    let tampered = dir.path().join("tampered.json");
    std::fs::write(&tampered, file.to_json()).unwrap();
    let bad = verify(&tampered);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("\"passed\": false"));

    std::fs::write(&tampered, "{ not json").unwrap();
    assert_eq!(verify(&tampered).status.code(), Some(3));
}
