use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn erl2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erl2"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run erl2")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!(
            "# small pointmass run\n\
             env = pointmass\n\
             pop_size = 3\n\
             total_steps = 600\n\
             warmup_steps = 100\n\
             batch_size = 16\n\
             encoder_hidden = 8\n\
             critic_hidden = 8\n\
             pevfa_hidden = 8\n\
             pevfa_encoder = 8\n\
             eval_episodes = 2\n\
             out_dir = {}\n",
            dir.join("out").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = erl2(&["train", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let run = dir.path().join("out");
    for f in [
        "metrics.csv",
        "losses.csv",
        "summary.json",
        "checkpoint.erl2",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1);

    let ckpt = run.join("checkpoint.erl2");
    let a = erl2(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episodes",
        "3",
    ]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["returns"].as_array().unwrap().len(), 3);
    assert!(report["mean"].as_f64().unwrap().is_finite());

    // same seed, same numbers
    let b = erl2(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episodes",
        "3",
    ]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "pop_size = 1\n").unwrap();
    let out = erl2(&["train", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pop_size"));
}

#[test]
fn unknown_ablation_axis_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = erl2(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "nope",
    ]);
    assert!(!out.status.success());
}
