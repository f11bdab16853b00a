use std::path::Path;
use std::process::{Command, Output};

fn memepair(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memepair"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_is_deterministic_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = memepair(
            &["gen-data", "--data-seed", "7", "--samples", "120", "--out-dir", out],
            p,
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt"] {
        assert_eq!(
            std::fs::read(p.join("a").join(f)).unwrap(),
            std::fs::read(p.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let echoed = std::fs::read_to_string(p.join("a/config.toml")).unwrap();
    assert!(echoed.contains("data_seed = 7") && echoed.contains("samples = 120"));
}

#[test]
fn train_eval_ensemble_roc_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = "samples = 160\nhidden_dim = 16\nnum_heads = 2\nffn_dim = 32\npool_hidden = 8\nepochs = 1\nbatch_size = 16\nlr = 0.01\n";
    std::fs::write(p.join("run.toml"), cfg).unwrap();
    let ok = |o: Output| {
        assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
        o
    };
    ok(memepair(&["gen-data", "-c", "run.toml", "-o", "data"], p));
    for seed in ["1", "2"] {
        let out = format!("run{seed}");
        ok(memepair(
            &[
                "train",
                "-c",
                "run.toml",
                "--seed",
                seed,
                "--data-dir",
                "data",
                "-o",
                &out,
            ],
            p,
        ));
        for f in ["model.ckpt", "metrics.jsonl", "val_predictions.jsonl", "config.toml"] {
            assert!(p.join(&out).join(f).exists(), "{out}/{f}");
        }
        let echoed = std::fs::read_to_string(p.join(&out).join("config.toml")).unwrap();
        assert!(echoed.contains(&format!("seed = {seed}")));
        let o = ok(memepair(
            &[
                "eval",
                "--checkpoint",
                &format!("{out}/model.ckpt"),
                "--input",
                "data/test.jsonl",
                "-o",
                &format!("{out}/test"),
            ],
            p,
        ));
        assert!(stdout(&o).contains("auroc"));
        assert!(p.join(&out).join("test/report.json").exists());
    }
    let o = ok(memepair(
        &[
            "ensemble",
            "run1/test/predictions.jsonl",
            "run2/test/predictions.jsonl",
            "-o",
            "ens",
        ],
        p,
    ));
    assert!(stdout(&o).contains("ensemble of 2"));
    ok(memepair(
        &["roc", "--predictions", "ens/predictions.jsonl", "-o", "ens"],
        p,
    ));
    let csv = std::fs::read_to_string(p.join("ens/roc.csv")).unwrap();
    assert!(csv.starts_with("threshold,fpr,tpr\ninf,0.000000,0.000000\n"));
    assert!(csv.trim_end().ends_with("1.000000,1.000000"));

    // Ensembling a single file reproduces its probabilities.
    ok(memepair(
        &["ensemble", "run1/test/predictions.jsonl", "-o", "single"],
        p,
    ));
    assert_eq!(
        std::fs::read(p.join("single/predictions.jsonl")).unwrap(),
        std::fs::read(p.join("run1/test/predictions.jsonl")).unwrap()
    );

    // Re-running from the echoed config reproduces the checkpoint.
    ok(memepair(&["train", "-c", "run1/config.toml", "-o", "rerun"], p));
    assert_eq!(
        std::fs::read(p.join("rerun/model.ckpt")).unwrap(),
        std::fs::read(p.join("run1/model.ckpt")).unwrap()
    );
}

#[test]
fn gradcheck_passes_on_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = memepair(&["gradcheck", "-o", "gc"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("typo.toml"), "hiden_dim = 64\n").unwrap();
    let o = memepair(&["gen-data", "-c", "typo.toml"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key hiden_dim"), "{}", stderr(&o));

    std::fs::write(p.join("bad.toml"), "lr = \"fast\"\n").unwrap();
    let o = memepair(&["train", "-c", "bad.toml"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("key lr: expected float, got string"),
        "{}",
        stderr(&o)
    );

    let o = memepair(&["train", "--data-dir", "missing"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(!p.join("out").exists(), "no outputs on failure");

    let o = memepair(&["no-such-command"], p);
    assert_eq!(o.status.code(), Some(1));

    std::fs::write(p.join("bad.ckpt"), b"HMPA\x63\x00\x00\x00").unwrap();
    std::fs::write(p.join("d.jsonl"), "").unwrap();
    let o = memepair(&["eval", "--checkpoint", "bad.ckpt", "--input", "d.jsonl"], p);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failed_gradcheck_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // A tolerance no finite difference can meet.
    let o = memepair(&["gradcheck", "--set", "gradcheck_tol=0.0", "-o", "gc"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}
