use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn captrans(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_captrans"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small synthetic task in `dir/data`.
fn synth(dir: &Path) {
    let cfg = json!({
        "n_train": 20, "n_val": 5, "n_test": 5, "captions_per_image": 5, "feature_dim": 32,
        "noise": 1.0, "corpus_size": 300, "corpus_val_size": 30, "seed": 1
    });
    std::fs::write(dir.join("synth.json"), cfg.to_string()).unwrap();
    let o = captrans(dir, &["synth", "--config", "synth.json", "--out", "data"]);
    assert_eq!(code(&o), 0, "{o:?}");
}

fn quick_lm() -> serde_json::Value {
    json!({
        "init_method": "xavier-normal", "max_init_weight": 1.0, "embed_size": 16, "rnn_size": 32,
        "optimizer": "adam", "learning_rate": 0.003, "weight_decay": 0.0, "embedding_dropout": 0.0,
        "rnn_dropout": 0.0, "max_grad_norm": 5.0, "minibatch_size": 20, "max_epochs": 3
    })
}

fn capgen(max_epochs: usize, max_init_weight: f64) -> serde_json::Value {
    json!({
        "init_method": "xavier-normal", "max_init_weight": max_init_weight, "embed_size": 16, "rnn_size": 32,
        "post_image_size": 16, "post_image_activation": "relu", "normalize_image": false,
        "optimizer": "adam", "learning_rate": 0.01, "weight_decay": 0.0, "image_dropout": 0.0,
        "post_image_dropout": 0.0, "rnn_dropout": 0.0, "max_grad_norm": 5.0, "minibatch_size": 20,
        "beam_width": 2, "max_epochs": max_epochs
    })
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    std::fs::write(d.join("lm.json"), quick_lm().to_string()).unwrap();
    std::fs::write(d.join("cg.json"), capgen(4, 1.0).to_string()).unwrap();
    let data = ["--dataset", "data/dataset.jsonl", "--features", "data/features.bin"];

    let o = captrans(d, &["train-lm", "--config", "lm.json", "--train", "data/general-text.train.jsonl",
        "--val", "data/general-text.val.jsonl", "--out", "lm", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(d.join("lm/weights.bin").exists() && d.join("lm/history.json").exists());

    let mut args = vec!["transfer", "--config", "cg.json", "--lm", "lm", "--mode", "frozen", "--out", "tcg"];
    args.extend(data);
    assert_eq!(code(&captrans(d, &args)), 0);
    let tr: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("tcg/transfer.json")).unwrap()).unwrap();
    assert_eq!(tr["mode"], "frozen");

    let mut args = vec!["train-capgen", "--config", "cg.json", "--init", "tcg", "--out", "cg"];
    args.extend(data);
    assert_eq!(code(&captrans(d, &args)), 0);

    let mut args = vec!["generate", "--model", "cg", "--out", "gen"];
    args.extend(data);
    assert_eq!(code(&captrans(d, &args)), 0);
    let gens = std::fs::read_to_string(d.join("gen/generations.jsonl")).unwrap();
    assert_eq!(gens.lines().count(), 5);
    for line in gens.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["image_id"].is_string() && v["caption"].is_string() && v["logprob"].is_number());
    }

    let o = captrans(d, &["evaluate", "--dataset", "data/dataset.jsonl", "--generations", "gen/generations.jsonl",
        "--embeddings-from", "lm", "--out", "eval"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let report = std::fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert!(report.starts_with("metric,split,value,n_images,n_skipped"));
    assert!(report.contains("cider,test") && report.contains("wmd,test"));

    let o = captrans(d, &["perplexity", "--model", "lm", "--corpus", "data/general-text.val.jsonl"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("fair_perplexity"));
    let mut args = vec!["perplexity", "--model", "cg"];
    args.extend(data);
    let o = captrans(d, &args);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("perplexity "));
}

#[test]
fn reruns_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    std::fs::write(d.join("lm.json"), quick_lm().to_string()).unwrap();
    for out in ["a", "b"] {
        let o = captrans(d, &["train-lm", "--config", "lm.json", "--train", "data/general-text.train.jsonl",
            "--val", "data/general-text.val.jsonl", "--out", out, "--seed", "9"]);
        assert_eq!(code(&o), 0, "{o:?}");
    }
    for f in ["weights.bin", "vocab.json", "config.json"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let history = |out: &str| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(out).join("history.json")).unwrap()).unwrap();
        for e in v["epochs"].as_array_mut().unwrap() {
            e.as_object_mut().unwrap().remove("wall_seconds");
        }
        v
    };
    assert_eq!(history("a"), history("b"));
}

#[test]
fn preprocess_and_build_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("raw.txt"), "The cat, the DOG!\n\n...\n3 dogs ran\n one two three four five six\n").unwrap();
    let o = captrans(d, &["preprocess", "--input", "raw.txt", "--max-tokens", "5", "--out", "pre"]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(d.join("pre/raw.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, [r#"["the","cat","the","dog"]"#, r#"["<num>","dogs","ran"]"#]);
    let o = captrans(d, &["build-vocab", "--corpus", "pre/raw.jsonl", "--min-count", "2", "--out", "voc"]);
    assert_eq!(code(&o), 0);
    let v = std::fs::read_to_string(d.join("voc/vocab.json")).unwrap();
    assert!(v.contains("\"the\"") && !v.contains("\"cat\""));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Usage errors.
    assert_eq!(code(&captrans(d, &["frobnicate"])), 2);
    assert_eq!(code(&captrans(d, &["grid", "--out", "g"])), 2);
    assert_eq!(code(&captrans(d, &["plot-data", "--results", "r.csv", "--figure", "bars", "--out", "p"])), 2);
    // Invalid experiment config: a no-transfer row with an LM corpus.
    std::fs::write(
        d.join("bad.json"),
        json!({"dataset": "x", "features": "y", "seed": 1,
               "rows": [{"type": "no-transfer", "lm_train": "t.txt", "modes": ["fine-tuned"], "capgen_hyperparams": capgen(1, 1.0)}]})
        .to_string(),
    )
    .unwrap();
    assert_eq!(code(&captrans(d, &["grid", "--config", "bad.json", "--out", "g"])), 2);
    // Missing data.
    let o = captrans(d, &["train-lm", "--train", "nope.txt", "--val", "nope.txt", "--out", "lm"]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.matches("No such file").count(), 1, "{err}");
}

#[test]
fn grid_with_failed_trials_exits_4_and_plot_data_works() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let cfg = |cg: serde_json::Value| {
        json!({
            "dataset": "data/dataset.jsonl", "features": "data/features.bin", "seed": 5, "repeats": 2,
            "size_base": 50, "embedding_hyperparams": quick_lm(),
            "rows": [{"type": "no-transfer", "modes": ["fine-tuned"], "capgen_hyperparams": cg}]
        })
    };
    std::fs::write(d.join("ok.json"), cfg(capgen(4, 1.0)).to_string()).unwrap();
    let o = captrans(d, &["grid", "--config", "ok.json", "--out", "ok"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = captrans(d, &["plot-data", "--results", "ok/results.csv", "--figure", "wmd-by-size", "--out", "plots"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let tsv = std::fs::read_to_string(d.join("plots/wmd-by-size.tsv")).unwrap();
    assert!(tsv.starts_with("group\tx\ty_mean\ty_std\tn\n"));
    assert!(tsv.contains("no-transfer\tnone\t"));

    // An empty language-model corpus is a data error before any trial runs.
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let mut fail = cfg(capgen(4, 1.0));
    fail["rows"] = json!([{
        "type": "general-text", "lm_train": "data/general-text.train.jsonl", "lm_val": "empty.jsonl",
        "size_exponents": [0.0], "modes": ["frozen"], "lm_hyperparams": quick_lm(), "capgen_hyperparams": capgen(4, 1.0)
    }]);
    std::fs::write(d.join("fail.json"), fail.to_string()).unwrap();
    let o = captrans(d, &["grid", "--config", "fail.json", "--out", "fail"]);
    assert_eq!(code(&o), 3, "{o:?}");

    // Embeddings that cover no caption word leave WMD undefined for every
    // image, so every trial fails; the grid records the failures and exits 4.
    captrans::metrics::WordEmbeddings::new(vec!["zzz".into()], 2, vec![0.5, 0.5])
        .unwrap()
        .save(&d.join("emb.bin"))
        .unwrap();
    let mut fail = cfg(capgen(4, 1.0));
    fail["wmd_embeddings"] = json!("emb.bin");
    std::fs::write(d.join("fail.json"), fail.to_string()).unwrap();
    let o = captrans(d, &["grid", "--config", "fail.json", "--out", "fail"]);
    assert_eq!(code(&o), 4, "{o:?}");
    let csv = std::fs::read_to_string(d.join("fail/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains("failed")));
}
