use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pms-ssl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().unwrap()
}

/// toy.toml with a few steps and paths pointing into `dir`.
fn write_quick_config(dir: &Path, clusters: usize) -> std::path::PathBuf {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let text = std::fs::read_to_string(toy)
        .unwrap()
        .replace("../toy-data", "data")
        .replace("../runs/toy", "out")
        .replace("clusters = 100 ", &format!("clusters = {clusters} "))
        .replace("cluster_sizes = [50, 100]", "cluster_sizes = [4, 8]")
        .replace("codebook_sizes = [50, 100]", "codebook_sizes = [4, 8]")
        .replace("steps = 100,", "steps = 2,")
        .replace("steps = 200,", "steps = 2,")
        .replace("steps = 2000,", "steps = 2,");
    let path = dir.join("quick.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn gen_corpus(dir: &Path) {
    let out = run(&[
        "gen-toy-corpus",
        "--out",
        dir.join("data").to_str().unwrap(),
        "--unlabeled",
        "4",
        "--labeled",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_all_then_eval_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    gen_corpus(tmp.path());
    let cfg = write_quick_config(tmp.path(), 8);
    let out = run(&["run-all", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("greedy wer="), "{stdout}");

    let eval = run(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("utterances=2"));
}

#[test]
fn stage_subcommands_resume() {
    let tmp = tempfile::tempdir().unwrap();
    gen_corpus(tmp.path());
    let cfg = write_quick_config(tmp.path(), 8);
    let c = cfg.to_str().unwrap();
    for args in [
        vec!["features", "--config", c],
        vec!["cluster", "--config", c, "--iteration", "1"],
        vec!["pretrain", "--config", c, "--iteration", "1"],
        vec!["extract", "--config", c],
        vec!["cluster", "--config", c, "--iteration", "2"],
        vec!["pretrain", "--config", c, "--iteration", "2"],
        vec!["finetune", "--config", c],
        vec!["decode", "--config", c],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(tmp.path().join("out/manifest.json").exists());
}

#[test]
fn validation_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&["run-all", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));

    // Config refers to a corpus that was never generated.
    let cfg = write_quick_config(tmp.path(), 8);
    let out = run(&["features", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let bad_arg = run(&["cluster", "--config", cfg.to_str().unwrap(), "--iteration", "3"]);
    assert_eq!(bad_arg.status.code(), Some(1));
}

#[test]
fn stage_failure_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    gen_corpus(tmp.path());
    let cfg = write_quick_config(tmp.path(), 100_000);
    let out = run(&["cluster", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration1.cluster"));
}
