use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnbench"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The resolved config echoed on stderr, as a key = value file body.
fn echoed_config(o: &Output) -> String {
    stderr(o)
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter(|l| {
            !l.starts_with("reuse") && !l.starts_with("schedule") && !l.starts_with("gate_seed")
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn preset_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["conformer-m", "allattention-lm"] {
        let first = run(&["params", "--preset", preset]);
        assert!(first.status.success(), "{}", stderr(&first));
        let dumped = echoed_config(&first);
        let path = write(dir.path(), &format!("{preset}.cfg"), &dumped);
        let second = run(&["params", "--config", &path]);
        assert!(second.status.success(), "{}", stderr(&second));
        assert_eq!(echoed_config(&second), dumped);
        assert_eq!(stdout(&second), stdout(&first));
    }
}

#[test]
fn json_config_matches_key_value() {
    let dir = tempfile::tempdir().unwrap();
    let kv = write(
        dir.path(),
        "m.cfg",
        "# toy\nlayer_kind = transformer\nnum_layers = 2\ndim = 32\nheads = 4\nseed = 9\n",
    );
    let js = write(
        dir.path(),
        "m.json",
        r#"{"layer_kind": "transformer", "num_layers": 2, "dim": 32, "heads": 4, "seed": 9}"#,
    );
    let a = run(&["params", "--config", &kv]);
    let b = run(&["params", "--config", &js]);
    assert!(
        a.status.success() && b.status.success(),
        "{}{}",
        stderr(&a),
        stderr(&b)
    );
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(echoed_config(&a), echoed_config(&b));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let indivisible = write(
        dir.path(),
        "d255.cfg",
        "layer_kind = transformer\nnum_layers = 2\ndim = 255\nheads = 4\n",
    );
    let o = run(&["params", "--config", &indivisible]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let unknown = write(
        dir.path(),
        "unknown.cfg",
        "preset = conformer-m\n\nwidth = 3\n",
    );
    let o = run(&["params", "--config", &unknown]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let ok = write(dir.path(), "r16.cfg", "preset = conformer-m\nreuse = 4x4\n");
    let o = run(&["params", "--config", &ok]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bad = write(
        dir.path(),
        "r12.cfg",
        "preset = conformer-m\nnum_layers = 12\nreuse = 4x4\n",
    );
    assert_eq!(run(&["params", "--config", &bad]).status.code(), Some(2));

    assert_eq!(run(&["params", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(
        run(&["bench", "--preset", "conformer-m", "--lengths", "100..250"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["prune", "--config", &ok, "--steps", "1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn verify_passes_on_presets() {
    for preset in ["conformer-m", "allattention-lm"] {
        let o = run(&["verify", "--preset", preset]);
        assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
        let out = stdout(&o);
        assert!(out.lines().count() >= 6);
        assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
    }
}

#[test]
fn reuse_grid_and_long_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "toy.cfg",
        "layer_kind = conformer\nnum_layers = 8\ndim = 32\nheads = 2\nconv_kernel = 7\n",
    );
    let out = dir.path().join("grid.csv");
    let o = run(&[
        "reuse",
        "--config",
        &cfg,
        "--lengths",
        "8..64",
        "--repeats",
        "5",
        "--warmup",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "config,8,16,24,32,40,48,56,64");
    let rows: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(rows, ["1x8", "2x4", "4x2", "8x1"]);
    assert!(lines[1..].iter().all(|l| l
        .split(',')
        .skip(1)
        .all(|c| c.parse::<f64>().unwrap() > 0.0)));
    let long = fs::read_to_string(dir.path().join("grid_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 4 * 8);
}

#[test]
fn prune_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "lm.cfg",
        "layer_kind = all_attention\nnum_layers = 2\ndim = 16\nheads = 4\npersistent_slots = 2\nseed = 3\n",
    );
    let out = dir.path().join("heads.csv");
    let args = [
        "prune", "--config", &cfg, "--lambda", "0,1", "--steps", "20", "--length", "6", "--batch",
        "1",
    ];
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    let o = run(&with_out);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(&out).unwrap();
    assert_eq!(table.lines().next().unwrap(), "lambda,1,2,sparsity");
    assert_eq!(table.lines().count(), 3);
    let trajectory = fs::read_to_string(dir.path().join("heads_trajectory.csv")).unwrap();
    assert_eq!(
        trajectory.lines().next().unwrap(),
        "lambda,step,sparsity_loss,open_gates,task_loss"
    );
    assert_eq!(trajectory.lines().count(), 1 + 2 * 20);

    let again = run(&args);
    assert!(again.status.success());
    assert_eq!(stdout(&again), table);
}
