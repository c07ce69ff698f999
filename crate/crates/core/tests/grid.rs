use std::path::Path;

use captrans::capgen::TransferMode;
use captrans::runner::grid::{LEDGER_FILE, RESULTS_FILE};
use captrans::runner::partial::PARTIAL_RESULTS_FILE;
use captrans::runner::*;
use captrans::text::Split;
use serde_json::json;

fn tiny_task(dir: &Path) {
    let cfg = SyntheticConfig {
        n_train: 20,
        n_val: 5,
        n_test: 5,
        corpus_size: 1000,
        corpus_val_size: 50,
        ..Default::default()
    };
    SyntheticTask::generate(&cfg).unwrap().write(dir).unwrap();
}

fn quick_lm() -> LmHyperparams {
    LmHyperparams {
        max_epochs: 3,
        ..LmHyperparams::desk()
    }
}

fn quick_cg() -> CapgenHyperparams {
    CapgenHyperparams {
        max_epochs: 4,
        learning_rate: 0.01,
        beam_width: 2,
        ..CapgenHyperparams::desk()
    }
}

fn write_config(dir: &Path, value: serde_json::Value) -> ExperimentConfig {
    let p = dir.join("experiment.json");
    std::fs::write(&p, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    ExperimentConfig::load(&p).unwrap()
}

fn base_config(rows: serde_json::Value, repeats: usize) -> serde_json::Value {
    json!({
        "dataset": "dataset.jsonl",
        "features": "features.bin",
        "rows": rows,
        "repeats": repeats,
        "seed": 7,
        "size_base": 100,
        "embedding_hyperparams": quick_lm(),
    })
}

/// The CSV with the wall-time column blanked.
fn without_wall_time(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "wall_seconds").unwrap();
    let mut out = vec![header.iter().map(String::from).collect::<Vec<_>>()];
    for rec in r.records() {
        let mut row: Vec<String> = rec.unwrap().iter().map(String::from).collect();
        row[col].clear();
        out.push(row);
    }
    out
}

#[test]
fn one_cell_with_five_repeats_gives_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    tiny_task(dir.path());
    let rows = json!([{ "type": "no-transfer", "modes": ["fine-tuned"], "capgen_hyperparams": quick_cg() }]);
    let cfg = write_config(dir.path(), base_config(rows, 5));
    let out = dir.path().join("out");
    let g = run_grid(&cfg, &out, false).unwrap();
    assert_eq!(g.rows.len(), 5);
    assert_eq!(g.n_failed(), 0);
    assert!(g.rows.iter().enumerate().all(|(i, r)| r.repeat == i && r.cell == "no-transfer"));
    assert!(g.rows.iter().all(|r| r.mode == TransferMode::FineTuned && !r.frozen && r.lm_val_perplexity.is_none()));
    let seeds: std::collections::HashSet<u64> = g.rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 5);
    let csv_rows: Vec<ResultRow> = captrans::runner::grid::read_results_csv(&out.join(RESULTS_FILE)).unwrap();
    assert_eq!(csv_rows.len(), 5);
    assert_eq!(emit_plot_data(&out.join(RESULTS_FILE), PlotFigure::WmdBySize, &out.join("bars.tsv")).unwrap(), 1);
}

#[test]
fn grid_resumes_from_ledger_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    tiny_task(dir.path());
    let rows = json!([
        { "type": "no-transfer", "modes": ["fine-tuned"], "capgen_hyperparams": quick_cg() },
        { "type": "same-captions", "size_exponents": [-1, 0], "modes": ["frozen", "fine-tuned"],
          "lm_hyperparams": quick_lm(), "capgen_hyperparams": quick_cg() },
        { "type": "general-text", "size_exponents": [-0.5], "modes": ["frozen"],
          "lm_train": "general-text.train.jsonl", "lm_val": "general-text.val.jsonl",
          "lm_hyperparams": quick_lm(), "capgen_hyperparams": quick_cg() }
    ]);
    let cfg = write_config(dir.path(), base_config(rows, 2));
    let a = dir.path().join("a");
    let full = run_grid(&cfg, &a, false).unwrap();
    // 1 + 2*2 + 1 cells, 2 repeats each
    assert_eq!(full.rows.len(), 12);
    assert_eq!(full.executed, 12);
    assert_eq!(full.n_failed(), 0, "{:?}", full.rows.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>());
    let sc: Vec<&ResultRow> = full.rows.iter().filter(|r| r.row_type == RowType::SameCaptions).collect();
    assert!(sc.iter().all(|r| r.lm_fair_perplexity.is_some() && r.corpus_size.is_some()));
    assert_eq!(sc.iter().filter(|r| r.size_exponent == Some(-1.0)).map(|r| r.corpus_size).next().unwrap(), Some(10));
    // the language model is shared by both modes of a (row, exponent, repeat)
    let pair: Vec<&&ResultRow> = sc.iter().filter(|r| r.size_exponent == Some(0.0) && r.repeat == 1).collect();
    assert_eq!(pair.len(), 2);
    assert_eq!(pair[0].lm_val_perplexity, pair[1].lm_val_perplexity);
    assert_ne!(pair[0].seed, pair[1].seed);

    // interrupted run: keep the first 5 ledger records plus a torn sixth
    let b = dir.path().join("b");
    std::fs::create_dir_all(&b).unwrap();
    let ledger = std::fs::read_to_string(a.join(LEDGER_FILE)).unwrap();
    let lines: Vec<&str> = ledger.lines().collect();
    let mut partial_ledger = lines[..5].join("\n");
    partial_ledger.push('\n');
    partial_ledger.push_str(&lines[5][..lines[5].len() / 2]);
    std::fs::write(b.join(LEDGER_FILE), partial_ledger).unwrap();
    let resumed = run_grid(&cfg, &b, true).unwrap();
    assert_eq!(resumed.executed, 7);
    assert_eq!(without_wall_time(&a.join(RESULTS_FILE)), without_wall_time(&b.join(RESULTS_FILE)));

    // a complete ledger means nothing reruns
    let again = run_grid(&cfg, &b, true).unwrap();
    assert_eq!(again.executed, 0);

    // a fresh run from scratch reproduces the same CSV
    let c = dir.path().join("c");
    run_grid(&cfg, &c, false).unwrap();
    assert_eq!(without_wall_time(&a.join(RESULTS_FILE)), without_wall_time(&c.join(RESULTS_FILE)));

    let scatter = a.join("scatter.tsv");
    assert_eq!(emit_plot_data(&a.join(RESULTS_FILE), PlotFigure::PplxVsWmd, &scatter).unwrap(), 5);
}

#[test]
fn invalid_grids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    tiny_task(dir.path());
    let p = dir.path().join("bad.json");
    let bad = [
        json!([{ "type": "no-transfer", "modes": ["frozen"], "capgen_hyperparams": quick_cg() }]),
        json!([{ "type": "same-captions", "size_exponents": [0.5], "modes": ["frozen"],
                 "lm_hyperparams": quick_lm(), "capgen_hyperparams": quick_cg() }]),
        json!([{ "type": "general-text", "size_exponents": [0], "modes": ["frozen"],
                 "lm_hyperparams": quick_lm(), "capgen_hyperparams": quick_cg() }]),
    ];
    for rows in bad {
        std::fs::write(&p, base_config(rows, 1).to_string()).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(captrans::Error::Config(_))));
    }
    // a corpus too small for the requested exponent is a data error
    let rows = json!([{ "type": "general-text", "size_exponents": [1], "modes": ["frozen"],
        "lm_train": "general-text.val.jsonl", "lm_val": "general-text.val.jsonl",
        "lm_hyperparams": quick_lm(), "capgen_hyperparams": quick_cg() }]);
    let cfg = write_config(dir.path(), base_config(rows, 1));
    assert!(matches!(run_grid(&cfg, &dir.path().join("o"), false), Err(captrans::Error::Size { .. })));
}

#[test]
fn partial_training_follows_the_attempt_rule() {
    let dir = tempfile::tempdir().unwrap();
    tiny_task(dir.path());
    let lm = LmHyperparams {
        learning_rate: 0.05,
        ..quick_lm()
    };
    let mut v = base_config(
        json!([{ "type": "same-captions", "size_exponents": [0], "modes": ["frozen", "fine-tuned"],
                 "lm_hyperparams": lm, "capgen_hyperparams": quick_cg() }]),
        1,
    );
    v["partial"] = json!({ "type": "same-captions", "n_max": 6, "attempts": 2, "repeats": 2 });
    let cfg = write_config(dir.path(), v);
    let out = dir.path().join("p");
    let res = run_partial_training(&cfg, &out, false).unwrap();
    assert_eq!(res.rows.len(), 2 * 7 * 2);
    assert_eq!(res.n_failed(), 0, "{:?}", res.rows.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>());
    for r in &res.rows {
        let epochs = r.lm_epochs.unwrap();
        if r.n == 0 {
            assert_eq!(epochs, 0);
            assert_eq!(r.attempts, 1);
        }
        if r.overfit {
            assert!(epochs < r.n, "overfit run kept {epochs} of {} epochs", r.n);
            assert_eq!(r.attempts, 2);
            assert_eq!(r.overfit_at, Some(r.n));
        } else if r.improvement_required {
            assert_eq!(epochs, r.n);
        }
        match r.overfit_at {
            Some(k) if r.n > k => assert!(!r.improvement_required && epochs == r.n && r.attempts == 1),
            _ => assert!(r.improvement_required),
        }
    }
    assert!(res.rows.iter().any(|r| r.overfit), "no repeat overfitted; the rule went unexercised");
    // both modes see the same language model
    let frozen: Vec<_> = res.rows.iter().filter(|r| r.frozen).map(|r| r.lm_val_perplexity).collect();
    let tuned: Vec<_> = res.rows.iter().filter(|r| !r.frozen).map(|r| r.lm_val_perplexity).collect();
    assert_eq!(frozen, tuned);

    // resume after dropping the last third of the ledger reproduces the CSV
    let ledger = out.join(captrans::runner::partial::PARTIAL_LEDGER_FILE);
    let text = std::fs::read_to_string(&ledger).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let keep = lines.len() * 2 / 3;
    let before = without_wall_time(&out.join(PARTIAL_RESULTS_FILE));
    std::fs::write(&ledger, lines[..keep].join("\n") + "\n").unwrap();
    let again = run_partial_training(&cfg, &out, true).unwrap();
    assert_eq!(again.executed, lines.len() - keep);
    assert_eq!(before, without_wall_time(&out.join(PARTIAL_RESULTS_FILE)));
    let n = emit_plot_data(&out.join(PARTIAL_RESULTS_FILE), PlotFigure::WmdByEpoch, &out.join("e.tsv")).unwrap();
    assert_eq!(n, 14);
}

#[test]
fn zero_epoch_language_model_is_its_random_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    tiny_task(dir.path());
    let task = SyntheticTask::generate(&SyntheticConfig {
        n_train: 20,
        n_val: 5,
        n_test: 5,
        ..Default::default()
    })
    .unwrap();
    let ct = CaptionTask {
        dataset: &task.dataset,
        features: &task.features,
        min_count: 5,
    };
    let hp = quick_lm();
    let schedule = LmSchedule::Exactly {
        epochs: 0,
        require_improvement: true,
    };
    let (lm, h) = train_language_model(&ct.captions(Split::Train), &ct.captions(Split::Val), &hp, 5, schedule, 3).unwrap();
    assert_eq!(h.selected_epoch, 0);
    let fresh = captrans::lm::LanguageModel::new(
        lm.vocab().clone(),
        hp.embed_size,
        hp.rnn_size,
        hp.init_spec(captrans::rng::hash_seed(&[3, 1])).unwrap(),
    )
    .unwrap();
    assert_eq!(lm.params().values(), fresh.params().values());
    let cg = build_caption_generator(&ct, &CapgenHyperparams::desk(), Some(&lm), TransferMode::Frozen, 3).unwrap();
    for (a, b) in cg.encoder().gru_ids().iter().zip(lm.encoder().gru_ids()) {
        assert_eq!(cg.params().value(*a), lm.params().value(b));
    }
}
