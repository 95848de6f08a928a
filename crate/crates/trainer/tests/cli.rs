use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "d_model = 16\nn_heads = 2\nd_ff = 32\nenc_layers = 1\ndec_layers = 1\nrank = 3\nalpha = 3\n\
                    train = 12\ndev = 4\ntest = 4\nepochs = 1\nlr = 1e-2\ngroup_size = 4\neval_group = 4\n";

fn clorae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clorae"))
        .current_dir(dir)
        .env_remove("CLORAE_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_train_eval_routing_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), TINY).unwrap();

    ok(&clorae(d, &["--config", "run.cfg", "--out", "data", "gen-data"]));
    assert!(d.join("data/suite.json").exists());
    assert!(d.join("data/ner.train.jsonl").exists());

    let train = ok(&clorae(d, &["--config", "run.cfg", "--data-dir", "data", "--out", "run", "train"]));
    assert!(train.contains("All"));
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    let eval = ok(&clorae(
        d,
        &["--config", "run.cfg", "--data-dir", "data", "--out", "ev", "eval", "--checkpoint", "run/final.ckpt"],
    ));
    assert!(eval.contains("macro"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ev/eval_test.json")).unwrap()).unwrap();
    let saved: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/test_report.json")).unwrap()).unwrap();
    assert_eq!(report, saved);

    let routing = ok(&clorae(
        d,
        &["--config", "run.cfg", "--data-dir", "data", "--out", "ev", "routing", "--checkpoint", "run/final.ckpt"],
    ));
    assert!(routing.contains("bottom") && routing.contains("top"));
}

#[test]
fn cli_flags_override_the_config_file_and_env_sets_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), format!("{TINY}seed = 4\n")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_clorae"))
        .current_dir(d)
        .env("CLORAE_OUT", d.join("from-env"))
        .args(["--config", "run.cfg", "--seed", "9", "-s", "epochs=2", "train"])
        .output()
        .unwrap();
    ok(&out);
    let config: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("from-env/config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 9);
    assert_eq!(config["epochs"], 2);
}

#[test]
fn params_lists_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    let out = ok(&clorae(dir.path(), &["--config", "run.cfg", "params"]));
    for v in ["full", "no_mim", "no_aml", "no_gate", "only_tlora", "only_ulora", "lora"] {
        assert!(out.lines().any(|l| l.starts_with(v)), "{v}\n{out}");
    }
}

#[test]
fn failures_exit_with_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad_key = clorae(d, &["-s", "bogus=1", "params"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("bogus"));

    let exclusive = clorae(d, &["-s", "only_ulora=true", "-s", "only_tlora=true", "params"]);
    assert_eq!(exclusive.status.code(), Some(2));

    let missing_data = clorae(d, &["--data-dir", "nowhere", "params"]);
    assert_eq!(missing_data.status.code(), Some(3));

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = clorae(d, &["eval", "--checkpoint", "junk.ckpt"]);
    assert_ne!(junk.status.code(), Some(0));
    let missing = clorae(d, &["eval", "--checkpoint", "absent.ckpt"]);
    assert_eq!(missing.status.code(), Some(7));
}
