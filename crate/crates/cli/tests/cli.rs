use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_cfg() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn h3trans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h3trans"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let cfg = tiny_cfg();
    let mut args = vec!["synth", "--config", s(&cfg), "--out", s(&data)];
    args.extend_from_slice(extra);
    let out = h3trans(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--seed", "4"]);
    for f in ["manifest.txt", "train.tsv", "test.tsv", "resolved.cfg"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let run = dir.path().join("run");
    let data_set = format!("data={}", s(&data));
    let out = h3trans(&[
        "train",
        "--config",
        s(&tiny_cfg()),
        "--set",
        &data_set,
        "--set",
        "steps=6",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("trained 6 steps"));
    let ckpt = run.join("final.ckpt.json");
    assert!(ckpt.exists() && run.join("train_log.jsonl").exists());

    let eval = dir.path().join("eval");
    let ckpt_set = format!("checkpoint={}", s(&ckpt));
    let out = h3trans(&[
        "eval",
        "--config",
        s(&tiny_cfg()),
        "--set",
        &data_set,
        "--set",
        &ckpt_set,
        "--out",
        s(&eval),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = fs::read_to_string(eval.join("metrics.tsv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), tsv);
    assert!(tsv.starts_with("domain\tgroup\tmetric\tK\tvalue\tcount\n"));
    assert!(eval.join("metrics.jsonl").exists());
}

#[test]
fn seed_flag_and_overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(
        dir.path(),
        &["--seed", "11", "--set", "users=25", "--set", "heads=4"],
    );
    let resolved = fs::read_to_string(data.join("resolved.cfg")).unwrap();
    for line in ["seed=11", "users=25", "heads=4", "T=2"] {
        assert!(
            resolved.lines().any(|l| l == line),
            "missing `{line}` in\n{resolved}"
        );
    }
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(&dir.path().join("a"), &["--seed", "2"]);
    let b = synth(&dir.path().join("b"), &["--seed", "2"]);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn prepare_reads_native_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for u in 0..6 {
        for i in 0..6 {
            writeln!(text, "user{u}\titem{i}\t{}\t{}", i % 2, u * 10 + i).unwrap();
        }
    }
    let input = dir.path().join("clicks.tsv");
    fs::write(&input, text).unwrap();
    let out_dir = dir.path().join("prepared");
    let inputs = format!("inputs={}", s(&input));
    let out = h3trans(&[
        "prepare",
        "--set",
        &inputs,
        "--set",
        "kcore=2",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "prepared 2 domains, 6 users, 6 items, 24 train / 12 test records"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    // Usage and configuration errors.
    assert_eq!(code(&h3trans(&["train"])), 1);
    assert_eq!(code(&h3trans(&["bogus"])), 1);
    assert_eq!(
        code(&h3trans(&[
            "synth",
            "--set",
            "nonsense=1",
            "--out",
            s(&out)
        ])),
        1
    );
    assert_eq!(
        code(&h3trans(&["synth", "--set", "users=abc", "--out", s(&out)])),
        1
    );
    assert_eq!(
        code(&h3trans(&[
            "synth",
            "--config",
            "/nonexistent.cfg",
            "--out",
            s(&out)
        ])),
        1
    );
    assert_eq!(code(&h3trans(&["train", "--out", s(&out)])), 1);
    assert_eq!(code(&h3trans(&["--help"])), 0);

    // Data errors.
    assert_eq!(
        code(&h3trans(&[
            "train",
            "--set",
            "data=/nonexistent",
            "--out",
            s(&out)
        ])),
        2
    );
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "only\ttwo\n").unwrap();
    let inputs = format!("inputs={}", s(&bad));
    let res = h3trans(&["prepare", "--set", &inputs, "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 1"));

    // Numeric abort: a runaway learning rate overflows the scores.
    let data = synth(dir.path(), &[]);
    let run = dir.path().join("run");
    let data_set = format!("data={}", s(&data));
    let res = h3trans(&[
        "train",
        "--config",
        s(&tiny_cfg()),
        "--set",
        &data_set,
        "--set",
        "lr=1e308",
        "--set",
        "steps=5",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(fs::read_dir(&run).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("diagnostic-step")));
}

#[test]
fn keys_lists_every_key() {
    let out = h3trans(&["keys"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["refresh_interval", "variants", "domain_sweep", "checkpoint"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "{key}");
    }
}
