use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "tasks=3",
    "q_width=8",
    "summary_hidden=8",
    "slot_dim=8",
    "key_dim=8",
    "value_dim=8",
    "n_retrieval=4",
    "k_traj=2",
    "k_states=5",
    "batch_size=16",
    "steps=4",
    "eval_every=2",
    "eval_episodes=2",
    "target_period=2",
];

fn r2a(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2a"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = r2a(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(name);
    ok(&["gen-data", "--tasks", "3", "--episodes", "6", "--seed", "3", "--out", s(&p)]);
    p
}

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec!["train".into(), "--out".into(), out.into()];
    for kv in TINY.iter().chain(extra) {
        v.push("--set".into());
        v.push(kv.to_string());
    }
    v.push("--set".into());
    v.push(format!("dataset={data}"));
    v
}

fn run_owned(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

/// Every file under `dir`, relative path to contents.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.grbm");
    let b = gen(dir.path(), "b.grbm");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    let r = dir.path().join("r.grbm");
    ok(&["gen-data", "--tasks", "touch_red", "--episodes", "3", "--generator", "random", "--out", s(&r)]);
    let o = dir.path().join("o.grbm");
    ok(&[
        "gen-data", "--tasks", "touch_red", "--episodes", "3", "--generator", "online_dqn", "--dqn-hidden", "8",
        "--dqn-batch", "8", "--dqn-updates", "1", "--out", s(&o),
    ]);
    let o2 = dir.path().join("o2.grbm");
    ok(&[
        "gen-data", "--tasks", "touch_red", "--episodes", "3", "--generator", "online_dqn", "--dqn-hidden", "8",
        "--dqn-batch", "8", "--dqn-updates", "1", "--out", s(&o2),
    ]);
    assert_eq!(fs::read(o).unwrap(), fs::read(o2).unwrap());
}

#[test]
fn train_eval_and_plot_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.grbm");
    let mut trees = Vec::new();
    for run in ["x", "y"] {
        let root = dir.path().join(run);
        let train = root.join("train");
        run_owned(&train_args(s(&data), s(&train), &[]));
        let eval = root.join("eval");
        let out = ok(&["eval", "--checkpoint", s(&train.join("checkpoint.r2ac")), "--out", s(&eval)]);
        assert!(!out.stdout.is_empty());
        ok(&["plot", "--metrics", s(&train.join("metrics.csv")), "--out", s(&root.join("curve.svg"))]);
        trees.push(tree(&root));
    }
    assert!(trees[0].len() >= 8);
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn ablate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.grbm");
    let mut trees = Vec::new();
    for run in ["x", "y"] {
        let out = dir.path().join(run);
        let mut args = train_args(s(&data), s(&out), &["seeds=0", "variants=baseline,a1,a2", "steps=2"]);
        args[0] = "ablate".into();
        let res = run_owned(&args);
        let table = String::from_utf8(res.stdout).unwrap();
        assert_eq!(table.lines().count(), 2 + 3);
        assert!(table.contains("a2,0,"));
        trees.push(tree(&out));
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn resume_from_cli_checkpoint_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.grbm");
    let full = dir.path().join("full");
    run_owned(&train_args(s(&data), s(&full), &["checkpoint_every=2"]));
    let part = dir.path().join("part");
    run_owned(&train_args(s(&data), s(&part), &["checkpoint_every=2"]));
    ok(&["train", "--resume", s(&part.join("checkpoint_00000002.r2ac")), "--out", s(&part)]);
    assert_eq!(tree(&full), tree(&part));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(r2a(&["--help"]).status.code(), Some(0));
    assert_eq!(r2a(&["no-such-verb"]).status.code(), Some(1));
    // invalid config value
    let out = dir.path().join("o");
    assert_eq!(r2a(&["train", "--out", s(&out), "--set", "beta=-1"]).status.code(), Some(1));
    assert_eq!(r2a(&["train", "--out", s(&out), "--set", "nonsense=1"]).status.code(), Some(1));
    // missing dataset file
    let code = r2a(&["train", "--out", s(&out), "--set", &format!("dataset={}", s(&dir.path().join("none")))])
        .status
        .code();
    assert_eq!(code, Some(2));
    // corrupt dataset
    let bad = dir.path().join("bad.grbm");
    fs::write(&bad, b"garbage").unwrap();
    let code = r2a(&["train", "--out", s(&out), "--set", &format!("dataset={}", s(&bad))]).status.code();
    assert_eq!(code, Some(2));
    // plot with no rows
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let svg = dir.path().join("x.svg");
    assert_eq!(r2a(&["plot", "--metrics", s(&empty), "--out", s(&svg)]).status.code(), Some(2));
    assert!(!svg.exists());
    assert_eq!(r2a(&["gen-data", "--generator", "magic", "--out", s(&bad)]).status.code(), Some(1));
}
