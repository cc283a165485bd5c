use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: [&str; 16] = [
    "--override", "model.image_size=16",
    "--override", "model.conv_channels=[4,8,8]",
    "--override", "model.d_img=16",
    "--override", "model.text_width=16",
    "--override", "model.text_layers=1",
    "--override", "model.text_heads=2",
    "--override", "model.embed_dim=16",
    "--override", "batch_size=32",
];

fn declip(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_declip"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = declip(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let (data, run) = (root.path().join("data"), root.path().join("run"));
    ok(&[
        "gen-data", "--out", s(&data), "--seed", "2",
        "--override", "concepts=4", "--override", "pairs_per_concept=24",
        "--override", "eval_per_concept=5", "--override", "image_size=16",
    ]);
    for f in ["train.jsonl", "eval.jsonl", "labels.txt", "prompts.txt", "lexicon.tsv", "tags.tsv", "words.txt", "run.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let mut train = vec!["train", "--data", s(&data), "--out", s(&run), "--override", "epochs=2"];
    train.extend(TINY);
    ok(&train);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 3);
    assert!(run.join("checkpoints/epoch_0002/header.json").exists());
    let desc: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(desc["command"], "train");
    assert_eq!(desc["overrides"].as_array().unwrap().len(), 9);

    let refused = declip(&train);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("not empty"));

    let mut more = train.clone();
    more.push("--resume");
    ok(&more);
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);

    let zs = root.path().join("zs");
    let text = ok(&["eval-zeroshot", "--checkpoint", s(&run), "--data", s(&data), "--out", s(&zs)]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["n"], 20);
    assert_eq!(report["classes"], 4);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let lp = root.path().join("lp");
    ok(&["eval-linear", "--checkpoint", s(&run.join("checkpoints/epoch_0001")), "--data", s(&data), "--out", s(&lp)]);
    let csv = fs::read_to_string(lp.join("probe.csv")).unwrap();
    assert!(csv.lines().count() >= 8);
}

#[test]
fn errors_exit_nonzero() {
    let root = tempfile::tempdir().unwrap();
    let out = declip(&["train", "--data", s(&root.path().join("missing")), "--out", s(&root.path().join("o"))]);
    assert!(!out.status.success());
    let out = declip(&["train", "--data", "x", "--out", s(&root.path().join("p")), "--override", "nonsense"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
