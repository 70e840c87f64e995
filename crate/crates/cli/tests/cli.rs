use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn lanetr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanetr"))
        .arg("--config")
        .arg(tiny_config())
        .args(args)
        .output()
        .expect("spawn lanetr")
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = lanetr(args);
    assert!(
        out.status.success(),
        "lanetr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn fails(args: &[&str]) -> String {
    let out = lanetr(args);
    assert!(!out.status.success(), "lanetr {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn synth(dir: &Path, seed: &str, n: &str) {
    ok(&["synth", "--seed", seed, "--n", n, "--out", dir.to_str().unwrap()]);
}

fn events<'a>(records: &'a [Value], kind: &str) -> Vec<&'a Value> {
    records.iter().filter(|r| r["event"] == kind).collect()
}

#[test]
fn synth_writes_a_deterministic_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "7", "10");
    synth(&b, "7", "10");
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".pgm")).count(), 10);
    assert_eq!(names.iter().filter(|n| n.starts_with("scene_") && n.ends_with(".json")).count(), 10);
    assert!(names.contains(&"manifest.json".to_string()));
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn synth_rejects_bad_ranges_and_missing_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let err = fails(&["synth", "--seed", "1", "--out", out, "--set", "gen.pitch=[-0.5, 0.1]"]);
    assert!(err.contains("pitch"), "{err}");
    let out = Command::new(env!("CARGO_BIN_EXE_lanetr"))
        .args(["synth", "--out", out])
        .output()
        .unwrap();
    assert!(!out.status.success());
    fails(&["synth", "--seed", "1", "--out", tmp.path().to_str().unwrap(), "--set", "gen.colour=3"]);
}

#[test]
fn fit_recovers_noiseless_lanes() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, "2", "8");
    let ann = ds.join("annotations.jsonl");
    let ann = ann.to_str().unwrap();
    let report = tmp.path().join("fit");
    let cubic = ok(&["fit", "--annotations", ann, "--out", report.to_str().unwrap()]);
    assert!(cubic[0]["rms_residual"].as_f64().unwrap() < 1e-6);
    let lines = fs::read_to_string(report.join("fit.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);
    let quad = ok(&["fit", "--annotations", ann, "--quadratic", "--out", report.to_str().unwrap()]);
    assert!(quad[0]["rms_residual"].as_f64().unwrap() >= cubic[0]["rms_residual"].as_f64().unwrap());

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let r = ok(&["fit", "--annotations", empty.to_str().unwrap()]);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0]["images"], 0);
}

#[test]
fn train_resume_eval_and_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, "3", "1");
    let ds = ds.to_str().unwrap();
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let log = ok(&["train", "--seed", "4", "--dataset", ds, "--out", run_s]);
    let steps = events(&log, "step");
    assert_eq!(steps.len(), 50);
    let first = steps[0]["loss"].as_f64().unwrap();
    let last = steps[49]["loss"].as_f64().unwrap();
    assert!(last < first, "{first} -> {last}");
    assert_eq!(fs::read_to_string(run.join("train.jsonl")).unwrap().lines().count(), log.len());

    let again = tmp.path().join("again");
    let again_log = ok(&["train", "--seed", "4", "--dataset", ds, "--out", again.to_str().unwrap()]);
    assert!(events(&log, "step") == events(&again_log, "step"), "reruns differ");

    let resumed = tmp.path().join("resumed");
    let ckpt = run.join("checkpoint_000025.ckpt");
    let r = ok(&[
        "train",
        "--seed",
        "4",
        "--dataset",
        ds,
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    let next = events(&r, "step")[0];
    assert_eq!(next["step"], 26);
    assert_eq!(next["loss"].as_f64().unwrap().to_bits(), steps[25]["loss"].as_f64().unwrap().to_bits());

    let latest = run.join("latest.ckpt");
    let latest = latest.to_str().unwrap();
    let e = ok(&["eval", "--dataset", ds, "--checkpoint", latest]);
    let acc = e[0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let image = Path::new(ds).join("scene_00000.pgm");
    let image = image.to_str().unwrap();
    let attn = tmp.path().join("attn");
    let attn_s = attn.to_str().unwrap();
    for selector in [["--pixel", "2,5"], ["--slot", "1"]] {
        let r = ok(&["attn", "--checkpoint", latest, "--image", image, "--out", attn_s, selector[0], selector[1]]);
        let text = fs::read_to_string(r[0]["values"].as_str().unwrap()).unwrap();
        let sum: f64 = text.split_whitespace().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(text.lines().count(), 4);
        assert!(Path::new(r[0]["map"].as_str().unwrap()).is_file());
    }
    fails(&["attn", "--checkpoint", latest, "--image", image, "--out", attn_s, "--slot", "3"]);
    fails(&["attn", "--checkpoint", latest, "--image", image, "--out", attn_s, "--pixel", "4,0"]);
}

#[test]
fn train_needs_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let err = fails(&[
        "train",
        "--dataset",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(err.contains("manifest"), "{err}");
}

#[test]
fn ground_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, "5", "6");
    let out = tmp.path().join("eval");
    let r = ok(&["eval", "--dataset", ds.to_str().unwrap(), "--ground-truth", "--out", out.to_str().unwrap()]);
    assert_eq!(r[0]["accuracy"], 1.0);
    assert_eq!(r[0]["fp_rate"], 0.0);
    assert_eq!(r[0]["fn_rate"], 0.0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["per_clip"].as_object().unwrap().len(), 6);
}

#[test]
fn bench_reports_latency_and_macs() {
    let r = ok(&["bench"]);
    assert_eq!(r[0]["repetitions"], 3);
    assert!(r[0]["mean_ms"].as_f64().unwrap() > 0.0);
    let ratio = r[0]["attention_doubling_ratio"].as_f64().unwrap();
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    assert!(r[0]["macs"]["total"].as_u64().unwrap() > 0);
    fails(&["bench", "--repetitions", "0"]);
}
