use std::path::Path;
use std::process::{Command, Output};

fn glance(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glance"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = glance(args);
    assert!(
        out.status.success(),
        "glance {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn reannotate_keeps_every_line() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.jsonl");
    let lines: Vec<String> = (0..7)
        .map(|i| {
            format!(
                r#"{{"video_id":"v{i}","query":"someone opens a door","start":{}.0,"end":{}.5,"duration":30.0}}"#,
                i,
                i + 3
            )
        })
        .collect();
    std::fs::write(&full, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("glance.jsonl");
    ok(&[
        "reannotate",
        "--in",
        s(&full),
        "--out",
        s(&out),
        "--seed",
        "3",
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 7);
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let g = v["glance"].as_f64().unwrap();
        assert!(i as f64 <= g && g <= i as f64 + 3.5);
    }
}

#[test]
fn perfect_predictions_score_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let anns = dir.path().join("anns.jsonl");
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(
        &anns,
        concat!(
            r#"{"video_id":"a","query":"q one","glance":2.0,"eval_start":1.0,"eval_end":4.0,"duration":10.0}"#,
            "\n",
            r#"{"video_id":"b","query":"q two","glance":6.0,"eval_start":5.5,"eval_end":9.0,"duration":10.0}"#,
            "\n"
        ),
    )
    .unwrap();
    std::fs::write(
        &preds,
        concat!(
            r#"{"video_id":"a","query":"q one","start":1.0,"end":4.0,"score":0.3,"anchor_idx":2,"mode":"qagi"}"#,
            "\n",
            r#"{"video_id":"b","query":"q two","start":5.5,"end":9.0,"score":0.1,"anchor_idx":6,"mode":"qagi"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = ok(&[
        "eval",
        "--predictions",
        s(&preds),
        "--annotations",
        s(&anns),
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["mean_iou"].as_f64(), Some(100.0));
    for t in ["0.3", "0.5", "0.7"] {
        assert_eq!(report["recall_at"][t].as_f64(), Some(100.0));
    }
}

#[test]
fn bad_invocations_fail_with_a_message() {
    let out = glance(&["train", "--no-such-flag"]);
    assert!(!out.status.success());
    let out = glance(&[
        "reannotate",
        "--in",
        "/nonexistent/full.jsonl",
        "--out",
        "/tmp/never.jsonl",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/full.jsonl"));
    let out = glance(&["eval", "--split", "test"]);
    assert!(!out.status.success());
}

#[test]
fn synthetic_pipeline_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth_cfg = dir.path().join("synth.json");
    std::fs::write(
        &synth_cfg,
        r#"{"synth":{"frames":[10,12],"feature_dim":8,"word_dim":6,"n_actions":3,"n_objects":3},
            "splits":{"train":24,"val":8,"test":8}}"#,
    )
    .unwrap();
    ok(&[
        "synth",
        "--config",
        s(&synth_cfg),
        "--out-dir",
        s(&data),
        "--seed",
        "5",
    ]);
    for f in ["words.txt", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }

    let train_cfg = dir.path().join("train.json");
    std::fs::write(
        &train_cfg,
        r#"{"model":{"d_model":8,"heads":2,"layers":1,"d_ff":16,"max_positions":16},
            "batch_size":8,"epochs":2,"learning_rate":0.003,"clip_len":4,"stride":2}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&train_cfg),
        "--data-dir",
        s(&data),
        "--out",
        s(&run),
        "--seed",
        "1",
    ]);
    for f in ["best.ckpt", "last.ckpt", "config.json", "metrics.jsonl"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(first["val_miou"].is_number());

    let preds = dir.path().join("preds.jsonl");
    let out = ok(&[
        "eval",
        "--ckpt",
        s(&run.join("best.ckpt")),
        "--data-dir",
        s(&data),
        "--split",
        "test",
        "--mode",
        "sliding",
        "--write-predictions",
        s(&preds),
        "--json",
    ]);
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["n_examples"].as_u64(), Some(8));
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 8);

    let test_line = std::fs::read_to_string(data.join("test.jsonl")).unwrap();
    let example: serde_json::Value =
        serde_json::from_str(test_line.lines().next().unwrap()).unwrap();
    let video_id = example["video_id"].as_str().unwrap();
    let features = data.join("features").join(format!("{video_id}.vgf"));
    let attention = dir.path().join("attention.json");
    let out = ok(&[
        "infer",
        "--ckpt",
        s(&run.join("last.ckpt")),
        "--features",
        s(&features),
        "--query",
        example["query"].as_str().unwrap(),
        "--words",
        s(&data.join("words.txt")),
        "--dump-attention",
        s(&attention),
    ]);
    let result: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(result["start"].as_f64().unwrap() <= result["end"].as_f64().unwrap());
    let att: Vec<f64> =
        serde_json::from_str(&std::fs::read_to_string(&attention).unwrap()).unwrap();
    assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    std::fs::write(
        &train_cfg,
        r#"{"model":{"d_model":8,"heads":2,"layers":1,"d_ff":16,"max_positions":16},
            "batch_size":8,"epochs":3,"learning_rate":0.003,"clip_len":4,"stride":2}"#,
    )
    .unwrap();
    ok(&[
        "train",
        "--config",
        s(&train_cfg),
        "--data-dir",
        s(&data),
        "--out",
        s(&run),
        "--seed",
        "1",
        "--resume",
        s(&run.join("last.ckpt")),
    ]);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}
