use std::path::Path;
use std::process::{Command, Output};

fn fpauth(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpauth"))
        .current_dir(dir)
        .env_remove("FPAUTH_ADDR")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = "version = 1\n[experiment]\ncount = 3\npairs_per_feature = 300\nsram_repeats = 2\ntrials = 100\n";

#[test]
fn enroll_and_authenticate_through_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), SMALL).unwrap();
    let run = |args: &[&str]| fpauth(dir.path(), &[&["--config", "cfg.toml"], args].concat());

    assert!(stdout(&run(&["fleet", "spawn", "--file", "fleet.json"])).contains("1,2,3"));
    stdout(&run(&[
        "enroll",
        "--fleet",
        "fleet.json",
        "--snapshot",
        "snap.json",
    ]));
    let first = stdout(&run(&[
        "auth",
        "--fleet",
        "fleet.json",
        "--device",
        "2",
        "--snapshot",
        "snap.json",
        "--count",
        "2",
    ]));
    assert_eq!(first.lines().count(), 2);
    assert!(
        first.lines().all(|l| l.contains("decision=Accept")),
        "{first}"
    );
    // the replay guard survives in the snapshot
    let replay = stdout(&run(&[
        "auth",
        "--fleet",
        "fleet.json",
        "--device",
        "2",
        "--snapshot",
        "snap.json",
        "--nonce",
        "1",
    ]));
    assert!(replay.contains("reason=ReplayDetected"), "{replay}");
}

#[test]
fn eval_appends_rows_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        let o = fpauth(
            dir.path(),
            &[
                "--seed",
                seed,
                "--out",
                "t.csv",
                "eval",
                "tamper-curve",
                "--d",
                "20",
                "--budgets",
                "5",
            ],
        );
        stdout(&o);
    }
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 5);
    assert!(
        text.starts_with("schema,experiment,axis_value,tpr,fpr,attack,attack_rate,seed,trials\n")
    );
    let table = stdout(&fpauth(dir.path(), &["report", "t.csv"]));
    assert!(table.contains("tamper-h1-only"));
}

#[test]
fn failures_print_one_parsable_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "version = 7\n").unwrap();
    let o = fpauth(dir.path(), &["--config", "bad.toml", "eval", "noise-curve"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=config message=\""), "{err}");

    let o = fpauth(
        dir.path(),
        &[
            "auth",
            "--fleet",
            "missing.json",
            "--device",
            "1",
            "--snapshot",
            "s.json",
        ],
    );
    assert!(String::from_utf8(o.stderr)
        .unwrap()
        .starts_with("error kind=sim "));
    assert_eq!(o.status.code(), Some(1));
}
