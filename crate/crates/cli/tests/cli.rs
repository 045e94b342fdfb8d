use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ltag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltag"))
        .args(args)
        .env("LTAG_LOG_LEVEL", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn score(extra: &str) -> String {
    let notes: String = [("C", "你"), ("D", "好"), ("E", "吗")]
        .iter()
        .map(|(step, text)| {
            format!(
                "<note><pitch><step>{step}</step><octave>4</octave></pitch><duration>4</duration>\
                 <lyric><syllabic>single</syllabic><text>{text}</text></lyric>{extra}</note>"
            )
        })
        .collect();
    format!(
        r#"<?xml version="1.0" encoding="UTF-8"?>
<score-partwise version="3.1">
  <part-list><score-part id="P1"><part-name>Voice</part-name></score-part></part-list>
  <part id="P1">
    <measure number="1">
      <attributes><divisions>4</divisions></attributes>
      {notes}
    </measure>
  </part>
</score-partwise>"#
    )
}

/// A tiny configuration derived from the printed defaults.
fn tiny_config(dir: &Path, beta: f64, epochs: usize) -> PathBuf {
    let out = ltag(&["print-config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let overrides = [
        ("d_model", "16".to_string()),
        ("n_heads", "2".to_string()),
        ("ffn_dim", "32".to_string()),
        ("n_layers_enc", "1".to_string()),
        ("n_layers_dec", "1".to_string()),
        ("beta", beta.to_string()),
        ("total_epochs", epochs.to_string()),
        ("bt_end_epoch", (epochs as f64 / 2.0).to_string()),
        ("batch_size", "8".to_string()),
        ("val_limit", "4".to_string()),
    ];
    let body: String = text
        .lines()
        .map(|line| {
            let key = line.split('=').next().unwrap().trim();
            match overrides.iter().find(|(k, _)| *k == key) {
                Some((k, v)) => format!("{k} = {v}\n"),
                None => format!("{line}\n"),
            }
        })
        .collect();
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

fn synth(dir: &Path, name: &str, seed: &str, n: &str) -> PathBuf {
    let path = dir.join(name);
    let out = ltag(&["synth", "--seed", seed, "--verses", n, "--vocab", "12", "--out", p(&path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn ingest_strict_and_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.musicxml");
    std::fs::write(&good, score("")).unwrap();
    let out_path = dir.path().join("out.jsonl");
    let out = ltag(&["ingest", p(&good), "--out", p(&out_path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"tgt_counts\":[1,1,1]"));
    assert!(dir.path().join("out.jsonl.manifest.json").exists());

    let odd = dir.path().join("odd.musicxml");
    std::fs::write(&odd, score("<mystery/>")).unwrap();
    let strict = ltag(&["ingest", p(&odd), "--out", p(&dir.path().join("s.jsonl"))]);
    assert_eq!(code(&strict), 1);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("mystery"));

    let lenient = ltag(&["ingest", "--lenient", p(&odd), "--out", p(&dir.path().join("l.jsonl"))]);
    assert_eq!(code(&lenient), 0);
    assert!(String::from_utf8_lossy(&lenient.stdout).contains("mystery"));
}

#[test]
fn ingest_reports_invalid_records() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        r#"{"id":"x","lang_src":"en","lang_tgt":"zh","domain_tag":"lyrics","src_tokens":[],"tgt_tokens":["你"],"notes":[{"midi":60,"dur_beats":1.0}],"src_counts":[],"tgt_counts":[2]}
"#,
    )
    .unwrap();
    let strict = ltag(&["ingest", p(&bad), "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(code(&strict), 1);
    let lenient = ltag(&["ingest", "--lenient", p(&bad), "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(code(&lenient), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("o.jsonl")).unwrap(), "");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.jsonl", "5", "40");
    let b = synth(dir.path(), "b.jsonl", "5", "40");
    let c = synth(dir.path(), "c.jsonl", "6", "40");
    let read = |f: &Path| std::fs::read(f).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn missing_or_bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", "1", "4");
    let out = ltag(&["train", "--train", p(&data), "--out", p(&dir.path().join("ck"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_model = 256"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "d_model = 16\n").unwrap();
    let out = ltag(&["train", "--config", p(&cfg), "--train", p(&data), "--out", p(&dir.path().join("ck"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing keys"));

    assert_eq!(code(&ltag(&["translate", "--bogus"])), 2);
}

#[test]
fn beta_zero_training_logs_constant_grouping_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", "2", "16");
    let cfg = tiny_config(dir.path(), 0.0, 3);
    let ck = dir.path().join("ck");
    let out = ltag(&["train", "--config", p(&cfg), "--train", p(&data), "--val", p(&data), "--out", p(&ck)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(ck.join("metrics.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row["epoch"], i + 1);
        assert_eq!(row["l_g"], 0.0);
        assert!(row["nll"].as_f64().unwrap().is_finite());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ck.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["version"], format!("v{}", env!("CARGO_PKG_VERSION")));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn untrained_checkpoint_translates_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.jsonl", "3", "6");
    let cfg = tiny_config(dir.path(), 0.8, 2);
    let ck = dir.path().join("ck");
    let out = ltag(&["pretrain", "--config", p(&cfg), "--corpus", p(&data), "--out", p(&ck), "--epochs", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let pred = dir.path().join("pred.jsonl");
    let scores = dir.path().join("scores");
    let out = ltag(&[
        "translate",
        "--model",
        p(&ck),
        "--input",
        p(&data),
        "--out",
        p(&pred),
        "--beam",
        "2",
        "--post-process",
        "trim_head_first",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let verses: Vec<serde_json::Value> = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let preds: Vec<serde_json::Value> =
        std::fs::read_to_string(&pred).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(preds.len(), verses.len());
    for (v, pr) in verses.iter().zip(&preds) {
        assert_eq!(v["id"], pr["id"]);
        let n = v["notes"].as_array().unwrap().len() as u64;
        let total: u64 = pr["tgt_align"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(total, n);
    }

    // Scores export only when every decoded token is a lyric token of the
    // target language; either way the command reports per-verse outcomes.
    let out = ltag(&[
        "translate",
        "--model",
        p(&ck),
        "--input",
        p(&data),
        "--out",
        p(&pred),
        "--export-musicxml",
        p(&scores),
    ]);
    assert!(matches!(code(&out), 0 | 1));
    assert!(scores.is_dir());
}

#[test]
fn evaluate_identity_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "gold.jsonl", "4", "10");
    let pred = dir.path().join("pred.jsonl");
    let lines: String = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let rec = serde_json::json!({
                "id": v["id"],
                "tgt_tokens": v["tgt_tokens"],
                "tgt_align": v["tgt_counts"],
                "logprob": 0.0,
            });
            format!("{rec}\n")
        })
        .collect();
    std::fs::write(&pred, lines).unwrap();
    let report = dir.path().join("report.json");
    let out = ltag(&["evaluate", "--pred", p(&pred), "--gold", p(&data), "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((r["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(r["as_score"], 1.0);
    assert_eq!(r["n_verses"], 10);

    let short = dir.path().join("short.jsonl");
    let first = std::fs::read_to_string(&pred).unwrap().lines().next().unwrap().to_string();
    std::fs::write(&short, first + "\n").unwrap();
    assert_eq!(code(&ltag(&["evaluate", "--pred", p(&short), "--gold", p(&data)])), 1);
}

#[test]
fn print_config_is_a_complete_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltag(&["print-config"]);
    let cfg = dir.path().join("default.cfg");
    std::fs::write(&cfg, &out.stdout).unwrap();
    let data = synth(dir.path(), "d.jsonl", "1", "4");
    let ck = dir.path().join("ck");
    let out = ltag(&["pretrain", "--config", p(&cfg), "--corpus", p(&data), "--out", p(&ck), "--epochs", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ck.join("weights.safetensors").exists());
}
