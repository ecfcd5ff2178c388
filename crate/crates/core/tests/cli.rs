use std::process::Command;

fn code(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_occloc")).args(args).env("RUST_LOG", "off").output().unwrap();
    out.status.code().expect("exited normally")
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["infer", "--help"]), 0);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["gen"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&["gen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    assert_eq!(code(&["gen", "--train", "0", "--eval", "0", "--out", out.to_str().unwrap()]), 1);
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    assert_eq!(code(&["eval", "--predictions", &p("none"), "--references", &p("none"), "--out", &p("m")]), 2);
    assert_eq!(code(&["infer", "--checkpoint", &p("none"), "--cloud", &p("c.xyz"), "--out", &p("o")]), 2);
}
