use std::path::Path;
use std::process::{Command, Output};

const MINIMAL: &str = r#"{"schema_version": 1, "network": {"source": "builtin:ieee33"}, "case": "case1", "out": "runs", "seed": 0}"#;

fn wpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wpo"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn invalid_case_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &MINIMAL.replace("case1", "case9"));
    let out = wpo(&["gen-data", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`case`"), "{err}");
}

#[test]
fn unknown_field_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("\"seed\": 0", "\"seed\": 0,\n\"sede\": 1");
    let cfg = write_config(dir.path(), "typo.json", &text);
    let out = wpo(&["gen-data", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sede") && err.contains("line 2"), "{err}");
}

#[test]
fn gen_data_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", MINIMAL);
    let out = dir.path().join("o");
    let r = wpo(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# seed=0 config_sha256="));
    assert_eq!(lines.next().unwrap(), "8,12,14,16,18,22,25,27,29,30,31,33");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5760);
    assert!(rows.iter().all(|r| r.split(',').count() == 12));
    assert!(out.join("manifest-gen-data.json").exists());
}

#[test]
fn same_seed_same_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &MINIMAL.replace("\"source\"", "\"costs\": \"paper\", \"source\""),
    );
    let mut manifests = Vec::new();
    for (name, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        let out = dir.path().join(name);
        let r = wpo(&[
            "export-network",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success());
        let r = wpo(&[
            "gen-data",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success());
        manifests.push(std::fs::read_to_string(out.join("manifest-gen-data.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    assert_ne!(manifests[0], manifests[2]);
}

#[test]
fn jobs_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", MINIMAL);
    let out = wpo(&["gen-data", "--config", &cfg, "--jobs", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--jobs"));
}
