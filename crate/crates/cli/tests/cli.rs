use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn cfdialog(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfdialog"))
        .args(args)
        .arg("--config")
        .arg(tiny_config())
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_run_in_order_and_rerun_is_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-world", "train-dppr", "train-bicogan"] {
        let o = cfdialog(dir.path(), &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = cfdialog(dir.path(), &["train-policy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("requires counterfactual databases"), "{}", stderr(&o));
    assert!(!dir.path().join("policy").exists());

    let o = cfdialog(dir.path(), &["all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cfdialog(dir.path(), &["all"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("up to date")).count(), 8, "{stdout}");
    for section in ["regression", "alignment", "cumulative", "qstats", "cca"] {
        assert!(dir.path().join(format!("report/{section}.tsv")).is_file(), "{section}");
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfdialog(dir.path(), &["gen-world", "--stage-override", "policy.gamma=1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("policy.gamma"), "{}", stderr(&o));

    let o = cfdialog(dir.path(), &["gen-world", "--stage-override", "reward.epochs=\"many\""]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("reward.epochs"), "{}", stderr(&o));
}

#[test]
fn changed_seed_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cfdialog(dir.path(), &["gen-world"]).status.success());
    let o = cfdialog(dir.path(), &["gen-world", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = cfdialog(dir.path(), &["gen-world", "--seed", "9", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn report_refuses_tampered_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cfdialog(dir.path(), &["all"]).status.success());
    let qstats = dir.path().join("evaluate/qstats.tsv");
    let mut text = fs::read_to_string(&qstats).unwrap();
    text.push_str("extra\n");
    fs::write(&qstats, text).unwrap();
    let o = cfdialog(dir.path(), &["report", "--force"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mixed artifacts"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("not-a-dir");
    fs::write(&file, "").unwrap();
    let o = cfdialog(&file, &["gen-world"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_cfdialog")).arg("no-such-stage").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_cfdialog")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}
