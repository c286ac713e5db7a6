//! Error-path behavior of the binary: nonzero exit codes and prefixed
//! diagnostics on stderr.

use std::process::Command;

fn run(args: &[&str]) -> (bool, String) {
    let dir = std::env::temp_dir().join(format!("ctlab-err-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_ctlab"))
        .args(args)
        .env("CTLAB_OUT", &dir)
        .output()
        .expect("spawn ctlab");
    (
        output.status.success(),
        String::from_utf8_lossy(&output.stderr).into_owned(),
    )
}

#[test]
fn missing_spec_file_fails_with_prefixed_error() {
    let (ok, stderr) = run(&["phantom", "--spec", "/nonexistent/spec.json"]);
    assert!(!ok);
    assert!(stderr.contains("ctlab: error:"), "stderr was: {stderr}");
}

#[test]
fn retrain_from_missing_checkpoint_fails() {
    let (ok, stderr) = run(&[
        "retrain",
        "--from",
        "no-such-model",
        "--dataset",
        "A",
        "--name",
        "x",
    ]);
    assert!(!ok);
    assert!(stderr.contains("ctlab: error:"), "stderr was: {stderr}");
}

#[test]
fn evaluate_unknown_dataset_fails() {
    let (ok, stderr) = run(&["evaluate", "--model", "m", "--dataset", "nope"]);
    assert!(!ok);
    assert!(stderr.contains("ctlab: error:"), "stderr was: {stderr}");
}

#[test]
fn infeasible_phantom_spec_fails() {
    let dir = std::env::temp_dir().join(format!("ctlab-err-spec-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let spec = dir.join("bad.json");
    // Shift pushes the lesion center out of the valid working range.
    std::fs::write(
        &spec,
        r#"{"tag":"X","side":16,"depth":2,"volumes":1,"shift":600.0,"seed":1}"#,
    )
    .unwrap();
    let (ok, stderr) = run(&["phantom", "--spec", spec.to_str().unwrap()]);
    assert!(!ok);
    assert!(stderr.contains("ctlab: error:"), "stderr was: {stderr}");
}

#[test]
fn version_and_help_exit_cleanly() {
    let (ok, _) = run(&["--help"]);
    assert!(ok);
}
