use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use token_thinner_cli::sweep::SUMMARY_HEADER;
use token_thinner_cli::RunReport;

const BIN: &str = env!("CARGO_BIN_EXE_token-thinner");

fn cli(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        r#"
seed = 5

[model]
n_layers = 2
d_model = 8
heads = 2
max_seq_len = 16
combo_tokens = 2
placement = 2
vocab_size = 64

[data]
source = "synthetic"
kind = "keyword-flag"
train_size = 40
test_size = 12
seq_len = 10

[train]
epochs = 1
batch_size = 8
learning_rate = 1e-3
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn summary_header_is_stable() {
    assert_eq!(
        SUMMARY_HEADER.join(","),
        "axis,value,status,preservation_ratio,placement,combo_tokens,best_epoch,best_val_loss,\
         test_accuracy,test_macro_f1,test_micro_f1,flops,ratio_vs_dense,dense_over_this,\
         peak_activation_bytes,final_keys"
    );
}

#[test]
fn synth_writes_labeled_csv_to_stdout() {
    let out = stdout(&cli(&["synth", "--kind", "majority-class", "--size", "6", "--seq-len", "5"]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("text,label,split"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn cost_prints_one_row_per_combination() {
    let out = stdout(&cli(&["cost", "--placement", "11,7,0", "--p", "0.9,1.0"]));
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 1 + 6);
    assert!(rows[0].starts_with("placement,preservation_ratio"));
    // Placement off at p = 1 is the dense baseline itself.
    let dense = rows.iter().find(|r| r.starts_with("0,1,")).unwrap();
    assert!(dense.contains(",1.0000,1.0000,"), "{dense}");
}

#[test]
fn cost_jsonl_round_trips() {
    let out = stdout(&cli(&["cost", "--format", "jsonl"]));
    for line in out.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["report"]["total_flops"].as_u64().unwrap() > 0);
    }
}

#[test]
fn ingest_splits_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut text = String::from("text,label\n");
    for i in 0..20 {
        text.push_str(&format!("sample {i},{}\n", if i % 2 == 0 { "pos" } else { "neg" }));
    }
    fs::write(&data, text).unwrap();
    let out_dir = dir.path().join("splits");
    let out = stdout(&cli(&[
        "ingest",
        data.to_str().unwrap(),
        "--val-fraction",
        "0.25",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(out.contains("20 rows, 2 classes (neg, pos)"), "{out}");
    assert!(out_dir.join("train.csv").exists());
    assert!(out_dir.join("val.csv").exists());
}

#[test]
fn malformed_input_fails_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.jsonl");
    fs::write(&data, "{\"text\": \"ok\", \"label\": 0}\n{\"text\": 3}\n").unwrap();
    let out = Command::new(BIN).args(["ingest", data.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    cli(&["train", "--config", &config, "--out", run_dir.to_str().unwrap()]);
    let report = RunReport::load(&run_dir.join("report.json")).unwrap();
    assert_eq!(report.seed, 5);
    assert_eq!(report.epochs.len(), 1);

    let data = dir.path().join("eval.csv");
    cli(&[
        "synth",
        "--kind",
        "keyword-flag",
        "--size",
        "10",
        "--seq-len",
        "10",
        "--seed",
        "99",
        "--out",
        data.to_str().unwrap(),
    ]);
    let out = stdout(&cli(&["eval", "--run", run_dir.to_str().unwrap(), data.to_str().unwrap()]));
    let eval: serde_json::Value = serde_json::from_str(&out).unwrap();
    let acc = eval["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn sweep_writes_summary_with_failures_in_place() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("sweep");
    // Placement 5 exceeds the layer count, so that run fails.
    let out = Command::new(BIN)
        .env("TOKEN_THINNER_THREADS", "2")
        .args(["sweep", "--config", &config, "--axis", "placement", "--values", "0,1,5"])
        .args(["--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let mut reader = csv::Reader::from_path(out_dir.join("summary.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), SUMMARY_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][2], "ok");
    assert_eq!(&rows[1][2], "ok");
    assert!(rows[2][2].starts_with("failed"));
}
