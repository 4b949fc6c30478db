//! End-to-end runs of the binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[run]
seeds = [0]
train_per_transition = 1
eval_per_transition = 1

[train]
epochs = 1
batch = 4
"#;

fn bin(out: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_switchwatch"));
    c.env("SWITCHWATCH_OUT", out).env("RUST_LOG", "warn");
    c
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn tiny(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = read(p);
    let mut lines = text.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let header = lines.next().unwrap();
    (header, lines.collect())
}

fn cell<'a>(header: &[String], row: &'a [String], col: &str) -> &'a str {
    &row[header.iter().position(|h| h == col).unwrap_or_else(|| panic!("no column {col}"))]
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny(dir.path());
    let o = ok(bin(&out).arg("--config").arg(&cfg).args(["--threads", "1", "run"]).output().unwrap());
    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("uatom") && md.contains("NoDetect"), "{md}");

    for f in [
        "config.toml",
        "data/manifest.json",
        "data/train-seed0.jsonl",
        "models/uatom-seed0.ckpt",
        "models/gru-seed0.ckpt",
        "eval/episodes.csv",
        "eval/dynamics.csv",
        "report/report.md",
        "report/summary.csv",
        "report/heatmap_detection.csv",
        "report/heatmap_collisions.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let curve = read(&out.join("curves/uatom-seed0.csv"));
    assert!(curve.starts_with("epoch,L_total,L_act,L_type,L_sw"));
    assert_eq!(curve.lines().count(), 2);

    let log = jsonl(&out.join("logs/train-gru-seed0.jsonl"));
    assert_eq!(log[0]["kind"], "header");
    assert_eq!(log[0]["model"], "gru");
    assert_eq!(log.len(), 2);
    assert_eq!(log[1]["kind"], "epoch");
    assert_eq!(log[1]["epoch"], 1);

    // Training data: a header record then one record per step, 12 episodes.
    let data = jsonl(&out.join("data/train-seed0.jsonl"));
    let headers = data.iter().filter(|r| r.get("schema").is_some()).count();
    assert_eq!(headers, 12);
    assert_eq!(data.len(), 12 * (1 + 200));

    // 6 methods plus 2 adaptation variants, 12 episodes each.
    let eps = read(&out.join("eval/episodes.csv"));
    assert_eq!(eps.lines().count(), 1 + 8 * 12);
    let ckpt = std::fs::read(out.join("models/uatom-seed0.ckpt")).unwrap();
    assert!(ckpt.starts_with(b"SWCKPT 1 "));

    // One heatmap row per method, one column per transition.
    let (h, rows) = csv_rows(&out.join("report/heatmap_detection.csv"));
    assert_eq!(h.len(), 1 + 12);
    assert_eq!(rows.len(), 6);
    let oracle = rows.iter().find(|r| r[0] == "Oracle").unwrap();
    assert!(oracle[1..].iter().all(|v| v == "100.0"), "{oracle:?}");
    let nodetect = rows.iter().find(|r| r[0] == "NoDetect").unwrap();
    assert!(nodetect[1..].iter().all(|v| v == "0.0"), "{nodetect:?}");

    // The headline reduction is recomputable from the summary CSV.
    let (h, rows) = csv_rows(&out.join("report/summary.csv"));
    let get = |m: &str, c: &str| -> String {
        cell(&h, rows.iter().find(|r| r[0] == m).unwrap(), c).to_string()
    };
    let base: f64 = get("NoDetect", "collisions_post").parse().unwrap();
    let u: f64 = get("uatom", "collisions_post").parse().unwrap();
    let red = get("uatom", "collision_reduction_pct");
    if base > 0.0 {
        let expect = 100.0 * (1.0 - u / base);
        assert!((red.parse::<f64>().unwrap() - expect).abs() < 0.006, "{red} vs {expect}");
        assert!(md.contains(&format!("uatom: post-switch collisions reduced by {red}%")));
    } else {
        assert!(red.is_empty());
    }

    // Report and gen reruns reproduce their bytes.
    let before = read(&out.join("report/report.md"));
    let data_before = std::fs::read(out.join("data/train-seed0.jsonl")).unwrap();
    ok(bin(&out).arg("report").output().unwrap());
    ok(bin(&out).arg("gen").output().unwrap());
    assert_eq!(read(&out.join("report/report.md")), before);
    assert_eq!(std::fs::read(out.join("data/train-seed0.jsonl")).unwrap(), data_before);

    // A second single-threaded pipeline elsewhere gives the same report.
    let other = dir.path().join("other");
    ok(bin(&other).arg("--config").arg(&cfg).args(["--threads", "1", "run"]).output().unwrap());
    assert_eq!(read(&other.join("report/report.md")), before);
    assert_eq!(read(&other.join("eval/episodes.csv")), eps);
}

#[test]
fn smoke_training_is_fast_and_resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let flags = ["--seeds", "0", "--train-per-transition", "2", "--eval-per-transition", "1"];
    for out in [&a, &b] {
        ok(bin(out).args(flags).arg("gen").output().unwrap());
    }
    let t0 = std::time::Instant::now();
    ok(bin(&a).args(["--threads", "1", "--set", "train.epochs=2", "train"]).output().unwrap());
    let took = t0.elapsed();
    assert!(took.as_secs_f64() < 60.0, "smoke training took {took:?}");

    ok(bin(&b).args(["--threads", "1", "--set", "train.epochs=1", "train"]).output().unwrap());
    ok(bin(&b).args(["--threads", "1", "--set", "train.epochs=2", "train"]).output().unwrap());
    for f in ["models/uatom-seed0.ckpt", "models/gru-seed0.ckpt", "curves/gru-seed0.csv"] {
        assert!(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn method_subset_needs_no_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny(dir.path());
    ok(bin(&out).arg("--config").arg(&cfg).args(["--methods", "Oracle,NoDetect", "gen"]).output().unwrap());
    ok(bin(&out).arg("eval").output().unwrap());
    let md = String::from_utf8(ok(bin(&out).arg("report").output().unwrap()).stdout).unwrap();
    let (_, rows) = csv_rows(&out.join("report/heatmap_detection.csv"));
    assert_eq!(rows.len(), 2);
    assert!(!md.contains("uatom |") && md.contains("Oracle"), "{md}");

    // Learned methods without checkpoints are an error.
    let o = bin(&out).args(["--methods", "uatom", "eval"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&out).args(["--methods", "nope", "eval"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_extends_and_config_change_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny(dir.path());
    ok(bin(&out).arg("--config").arg(&cfg).arg("gen").output().unwrap());
    ok(bin(&out).args(["train", "--kind", "uatom"]).output().unwrap());
    let before = std::fs::read(out.join("models/uatom-seed0.ckpt")).unwrap();

    // Same budget again: nothing to do, checkpoint untouched.
    ok(bin(&out).args(["train", "--kind", "uatom"]).output().unwrap());
    assert_eq!(std::fs::read(out.join("models/uatom-seed0.ckpt")).unwrap(), before);

    ok(bin(&out)
        .args(["--set", "train.epochs=3", "train", "--kind", "uatom"])
        .output()
        .unwrap());
    let curve = std::fs::read_to_string(out.join("curves/uatom-seed0.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    let log = jsonl(&out.join("logs/train-uatom-seed0.jsonl"));
    let headers: Vec<_> = log.iter().filter(|r| r["kind"] == "header").collect();
    assert_eq!(headers.len(), 2);
    assert_eq!(headers[1]["resumed_from_epoch"], 1);
    assert_eq!(log.iter().filter(|r| r["kind"] == "epoch").count(), 3);

    let refused = bin(&out)
        .args(["--set", "train.lr=0.01", "train", "--kind", "uatom"])
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("hash"));

    ok(bin(&out)
        .args(["--set", "train.lr=0.01", "train", "--kind", "uatom", "--overwrite"])
        .output()
        .unwrap());
}

#[test]
fn workspace_flags_reach_the_stored_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = tiny(dir.path());
    ok(bin(&out)
        .arg("--config")
        .arg(&cfg)
        .args(["--episode-len", "150", "--dt", "0.04", "--v-max", "0.25", "--width", "0.7", "gen"])
        .output()
        .unwrap());
    let stored = switchwatch::config::Config::load(&out.join("config.toml")).unwrap();
    assert_eq!(stored.workspace.episode_len, 150);
    assert_eq!(stored.workspace.width, 0.7);
    assert_eq!((stored.uatom.dt, stored.gru.dt, stored.workspace.dt), (0.04, 0.04, 0.04));
    assert_eq!(stored.uatom.v_max, 0.25);
    assert_eq!(stored.run.seeds, vec![0]);
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bin(&out).args(["--set", "workspace.nope=1", "gen"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&out).args(["--collision-dist", "0.5", "gen"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    // Training before generating data names the missing stage.
    let o = bin(&out).args(["train"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen"));
}
