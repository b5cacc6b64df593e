use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn memplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memplan"))
        .current_dir(dir)
        .env_remove("MEMPLAN_PRESET_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = memplan(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(dir: &Path, file: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(file)).unwrap()).unwrap()
}

fn small_trace(dir: &Path) {
    std::fs::write(
        dir.join("spec.json"),
        r#"{"hidden_size": 256, "n_blocks": 6, "n_heads": 4, "vocab_size": 1000,
            "seq_len": 128, "batch_size": 2}"#,
    )
    .unwrap();
    ok(
        dir,
        &["gen-trace", "--spec", "spec.json", "-o", "trace.json"],
    );
}

#[test]
fn plan_feeds_estimate_and_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_trace(d);
    ok(
        d,
        &[
            "plan",
            "--trace",
            "trace.json",
            "--hw",
            "rtx3090x4",
            "-o",
            "plan.json",
        ],
    );
    let plan = json(d, "plan.json");
    assert_eq!(plan["plan"]["config"], plan["outcome"]["best"]);

    ok(
        d,
        &[
            "estimate",
            "--trace",
            "trace.json",
            "--hw",
            "rtx3090x4",
            "--plan",
            "plan.json",
            "-o",
            "est.json",
        ],
    );
    ok(
        d,
        &[
            "simulate",
            "--trace",
            "trace.json",
            "--hw",
            "rtx3090x4",
            "--plan",
            "plan.json",
            "-o",
            "sim.json",
            "--events",
            "events.csv",
            "--memory",
            "mem.csv",
            "--chrome",
            "chrome.json",
        ],
    );
    let est = json(d, "est.json")["t_iter"].as_f64().unwrap();
    let sim = json(d, "sim.json")["t_iter"].as_f64().unwrap();
    assert!((est - sim).abs() / sim <= 0.10, "est {est} sim {sim}");
    assert_eq!(est, plan["outcome"]["estimate"]["t_iter"].as_f64().unwrap());

    let events = std::fs::read_to_string(d.join("events.csv")).unwrap();
    assert!(events.starts_with("time_ns,resource,event,subject\n"));
    assert!(std::fs::read_to_string(d.join("mem.csv"))
        .unwrap()
        .starts_with("time_ns,bytes\n"));
    assert!(!json(d, "chrome.json")["traceEvents"]
        .as_array()
        .unwrap()
        .is_empty());
}

#[test]
fn outputs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_trace(d);
    for name in ["a", "b"] {
        ok(
            d,
            &[
                "plan",
                "--trace",
                "trace.json",
                "--hw",
                "a100x4",
                "-o",
                &format!("{name}.plan"),
            ],
        );
        ok(
            d,
            &[
                "validate",
                "--trace",
                "trace.json",
                "--hw",
                "a100x4",
                "--n-samples",
                "4",
                "-o",
                &format!("{name}.csv"),
            ],
        );
        ok(
            d,
            &[
                "simulate",
                "--trace",
                "trace.json",
                "--hw",
                "a100x4",
                "--plan",
                "a.plan",
                "-o",
                &format!("{name}.sim"),
            ],
        );
    }
    for ext in ["plan", "csv", "sim"] {
        assert_eq!(
            std::fs::read(d.join(format!("a.{ext}"))).unwrap(),
            std::fs::read(d.join(format!("b.{ext}"))).unwrap(),
            "{ext}"
        );
    }
    let csv = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn all_persistent_validation_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_trace(d);
    ok(d, &["pack", "--trace", "trace.json", "-o", "layout.json"]);
    let layout = json(d, "layout.json");
    let config = serde_json::json!({
        "s_chunk": layout["s_chunk"],
        "n_chunk": layout["chunks"].as_array().unwrap().len(),
        "n_persist": layout["chunks"].as_array().unwrap().len(),
        "n_buffer": 0,
        "n_block": 6,
        "n_interval": 1,
        "n_swap": 0,
        "n_checkpoint": 0,
    });
    std::fs::write(d.join("config.json"), config.to_string()).unwrap();
    ok(
        d,
        &[
            "validate",
            "--trace",
            "trace.json",
            "--hw",
            "a100x4",
            "--n-samples",
            "1",
            "--plan",
            "config.json",
            "-o",
            "val.csv",
        ],
    );
    let text = std::fs::read_to_string(d.join("val.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(rows[0][col("status")].to_string(), "ok");
    // Only nanosecond rounding of the event clock separates the two.
    let err: f64 = rows[0][col("t_iter_err")].parse().unwrap();
    assert_eq!(format!("{:.2}%", err * 100.0), "0.00%");
}

#[test]
fn sweep_and_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_trace(d);
    let out = ok(
        d,
        &[
            "sweep",
            "--trace",
            "trace.json",
            "--hw",
            "a100x4",
            "--n-checkpoint",
            "0:2",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("s_chunk,n_chunk,n_persist,n_buffer,"));
    assert!(text.lines().next().unwrap().ends_with(",fits"));
    assert!(text.lines().count() > 3);

    let out = ok(d, &["list-presets"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("model\tgpt2-10b"));
    assert!(text.contains("hardware\trtx3090x4"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_trace(d);
    assert_eq!(
        memplan(d, &["plan", "--trace", "trace.json"]).status.code(),
        Some(2)
    );
    assert_eq!(memplan(d, &["no-such-verb"]).status.code(), Some(2));

    let out = memplan(d, &["plan", "--trace", "trace.json", "--hw", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("presets::UnknownPreset"));

    std::fs::write(
        d.join("tiny.json"),
        r#"{"h2d_bw": 1e9, "d2h_bw": 1e9, "coll_alpha": 0.0, "coll_bw": 1e9, "world_size": 1,
            "gpu_mem": 1000.0, "cpu_mem": 1e12, "cpu_optim_rate": 1e9, "gpu_optim_rate": 1e10}"#,
    )
    .unwrap();
    let out = memplan(d, &["plan", "--trace", "trace.json", "--hw", "tiny.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("search::NoFeasibleConfig"));

    std::fs::write(d.join("bad.json"), "{\"ops\": 3}").unwrap();
    let out = memplan(d, &["pack", "--trace", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trace::MalformedTrace"));
}
