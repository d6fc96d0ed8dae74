use std::path::Path;
use std::process::{Command, Output};

use smoothdit::formats::{ProfileFile, ScheduleFile, StatsFile};

fn smoothdit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smoothdit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = smoothdit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &[&str] = &[
    "--steps", "20", "--depth", "2", "--width", "16", "--heads", "2", "--seq-len", "8", "--in-dim", "3",
];

fn trained(dir: &Path) {
    let mut args = vec!["train-toy", "--out", "model"];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

fn json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_valid_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    assert!(d.join("model/manifest.json").exists());
    let curve = std::fs::read_to_string(d.join("model/loss_curve.csv")).unwrap();
    assert!(curve.starts_with("# tool_version: smoothdit"));
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 21);

    ok(d, &["calibrate", "--weights", "model", "--nfe", "8", "--samples", "3", "--out", "p.json"]);
    let profile: ProfileFile = json(&d.join("p.json"));
    let prov = profile.provenance.clone().unwrap();
    assert_eq!(prov.seeds.len(), 3);
    assert!(prov.model_checksum.is_some());
    assert_eq!(profile.profile().unwrap().nfe, 8);

    ok(d, &[
        "schedule", "--profile", "p.json", "--alpha", "0.15", "--strategy", "unified-attn", "--cap", "3", "--out",
        "s.json",
    ]);
    let sched: ScheduleFile = json(&d.join("s.json"));
    let s = sched.schedule().unwrap();
    assert_eq!(s.alpha, 0.15);
    assert_eq!(sched.strategy, "unified-attn");
    assert!(sched.provenance.unwrap().inputs.contains_key("p.json"));

    ok(d, &[
        "infer", "--weights", "model", "--schedule", "s.json", "--nfe", "8", "--out", "x.dten", "--stats",
        "stats.json", "--divergence",
    ]);
    let stats: StatsFile = json(&d.join("stats.json"));
    assert_eq!(stats.nfe, 8);
    assert_eq!(stats.cache_hits + stats.sublayer_computes, 2 * 8 * 2 * 2);
    assert_eq!(stats.schedule_fingerprint.as_deref(), Some(smoothdit::formats::schedule_fingerprint(&s).as_str()));
    assert!(stats.divergence_vs_uncached.unwrap().rel_l2 >= 0.0);
    assert!(d.join("x.dten.json").exists());
    smoothdit_core::dten::decode(&std::fs::read(d.join("x.dten")).unwrap()).unwrap();
}

#[test]
fn reruns_reproduce_non_timing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    let a = std::fs::read(d.join("model/manifest.json")).unwrap();
    let mut args = vec!["train-toy", "--out", "model2"];
    args.extend_from_slice(SMALL);
    ok(d, &args);
    let b = std::fs::read(d.join("model2/manifest.json")).unwrap();
    assert_eq!(a, b);
    for out in ["p1.json", "p2.json"] {
        ok(d, &["calibrate", "--weights", "model", "--nfe", "6", "--samples", "2", "--out", out]);
    }
    assert_eq!(std::fs::read(d.join("p1.json")).unwrap(), std::fs::read(d.join("p2.json")).unwrap());
    for out in ["x1.dten", "x2.dten"] {
        ok(d, &["infer", "--weights", "model", "--nfe", "6", "--seed", "4", "--out", out]);
    }
    assert_eq!(std::fs::read(d.join("x1.dten")).unwrap(), std::fs::read(d.join("x2.dten")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    ok(d, &["calibrate", "--weights", "model", "--nfe", "8", "--samples", "1", "--out", "p.json"]);
    ok(d, &["schedule", "--profile", "p.json", "--alpha", "0.2", "--out", "s.json"]);

    let out = smoothdit(d, &["infer", "--weights", "model", "--schedule", "s.json", "--nfe", "16", "--out", "x.dten"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("covers 8 steps but the sampler runs 16"), "{err}");
    assert!(!d.join("x.dten").exists());

    let out = smoothdit(d, &["infer", "--weights", "model", "--frobnicate", "--out", "x.dten"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = smoothdit(d, &["schedule", "--profile", "p.json", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = smoothdit(d, &["infer", "--weights", "nowhere", "--out", "x.dten"]);
    assert_eq!(out.status.code(), Some(1));

    let out = smoothdit(d, &["infer", "--weights", "model", "--sway", "-3", "--out", "x.dten"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_requires_a_profile_per_nfe_and_compare_a_uniform_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    ok(d, &["calibrate", "--weights", "model", "--nfe", "8", "--samples", "2", "--out", "p8.json"]);
    let out = smoothdit(d, &[
        "bench", "--weights", "model", "--profile", "p8.json", "--nfe", "8,6", "--alpha", "0.2", "--out", "b.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `calibrate --nfe 6` first"));

    ok(d, &[
        "bench", "--weights", "model", "--profile", "p8.json", "--nfe", "8", "--alpha", "0.1,0.3", "--eval-count", "3",
        "--timing-runs", "2", "--out", "b.csv",
    ]);
    let csv = std::fs::read_to_string(d.join("b.csv")).unwrap();
    assert!(csv.contains("# note: divergence"));
    assert!(csv.contains("# config:"));

    ok(d, &["schedule", "--profile", "p8.json", "--cached-count", "2", "--pool-blocks", "--out", "u.json"]);
    ok(d, &[
        "compare", "--weights", "model", "--schedule", "u.json", "--eval-count", "3", "--timing-runs", "2", "--out",
        "c.csv", "--json", "c.json",
    ]);
    let report: smoothdit::bench::CompareReport = json(&d.join("c.json"));
    assert!(report.compute_parity);
    assert_eq!(report.reduced.nfe, 6);

    // Independent masks on an unpooled profile rarely agree across layers;
    // build one that certainly does not.
    let mut s: ScheduleFile = json(&d.join("u.json"));
    let m = s.masks.get_mut("0.attn").unwrap();
    let j = m.iter().position(|&v| v == 1).unwrap();
    m[j] = 0;
    s.strategy = "independent".into();
    std::fs::write(d.join("n.json"), serde_json::to_vec(&s).unwrap()).unwrap();
    let out = smoothdit(d, &["compare", "--weights", "model", "--schedule", "n.json", "--out", "c2.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different number of steps per layer"));
}
