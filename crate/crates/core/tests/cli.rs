use std::path::Path;
use std::process::{Command, Output};

fn bat_lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bat-lab"))
        .args(args)
        .env("BAT_LAB_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

const FAST: [&str; 10] = [
    "--seed", "2", "--epochs", "2",
    "--set", "trials=4",
    "--set", "mem_epochs=2",
    "--set", "min_trials_per_side=1",
];

#[test]
fn unknown_key_exits_2_with_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bat_lab(tmp.path(), &["gen-data", "--seed", "1", "--set", "alhpa=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("did you mean `alpha`"));
}

#[test]
fn missing_seed_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bat_lab(tmp.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing required key(s): seed"));
}

#[test]
fn bat_before_estimate_mem_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(bat_lab(tmp.path(), &["gen-data", "--seed", "1"]).status.success());
    let out = bat_lab(tmp.path(), &["train", "--seed", "1", "--method", "bat"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run estimate-mem first"));
}

#[test]
fn report_has_one_row_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(bat_lab(p, &[&["gen-data"][..], &FAST].concat()).status.success());
    assert!(bat_lab(p, &[&["estimate-mem"][..], &FAST].concat()).status.success());
    for method in [["--method", "pgd-at"], ["--method", "bat"]] {
        let args = [&["train"][..], &FAST, &method].concat();
        let out = bat_lab(p, &args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let runs = p.join("runs");
    let out = bat_lab(
        p,
        &["report", runs.join("pgd-at").to_str().unwrap(), runs.join("bat_a1_b0.2").to_str().unwrap()],
    );
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    assert!(lines[0].contains("All") && lines[0].contains("Typical") && lines[0].contains("Atyp."));
    assert_eq!(lines[1].matches("Clean").count(), 3);
    assert!(lines[2].starts_with("bat_a1_b0.2") && lines[3].starts_with("pgd-at"));
}
