use std::path::Path;

use captrans::capgen::CaptionGenerator;
use captrans::hyperopt::{Dimension, ParamSpace, TuneConfig};
use captrans::lm::LanguageModel;
use captrans::runner::tuning::{BEST_HYPERPARAMS_FILE, BEST_MODEL_DIR, HISTORY_FILE};
use captrans::runner::*;
use serde_json::json;

fn tiny_task(dir: &Path) {
    let cfg = SyntheticConfig {
        n_train: 20,
        n_val: 5,
        n_test: 5,
        corpus_size: 300,
        corpus_val_size: 30,
        ..Default::default()
    };
    SyntheticTask::generate(&cfg).unwrap().write(dir).unwrap();
}

fn small_tuner() -> TuneConfig {
    TuneConfig {
        n_init: 3,
        n_iter: 2,
        candidates: 50,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn language_model_job_saves_best_model_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    tiny_task(dir.path());
    let space = ParamSpace::new(vec![
        Dimension::integer("rnn_size", 8, 24),
        Dimension::log("learning_rate", 1e-3, 3e-2),
    ])
    .unwrap();
    let job = json!({
        "target": "language-model",
        "lm_train": "general-text.train.jsonl",
        "lm_val": "general-text.val.jsonl",
        "space": space,
        "tuner": small_tuner(),
        "base_lm": LmHyperparams { max_epochs: 2, ..LmHyperparams::desk() },
    });
    let path = dir.path().join("tune.json");
    std::fs::write(&path, job.to_string()).unwrap();
    let job = TuneJob::load(&path).unwrap();
    let out = dir.path().join("out");
    let o = run_tune_job(&job, &out, false).unwrap();
    assert_eq!(o.history.len(), 5);
    assert!(out.join(HISTORY_FILE).exists());

    let hp = LmHyperparams::load(&out.join(BEST_HYPERPARAMS_FILE)).unwrap();
    assert_eq!(hp.rnn_size as i64, o.best.point.int("rnn_size").unwrap());
    let lm = LanguageModel::load(&out.join(BEST_MODEL_DIR)).unwrap();
    assert_eq!(lm.dims().rnn_size, hp.rnn_size);

    // Resuming a finished job runs nothing and reports the same best trial.
    let again = run_tune_job(&job, &out, true).unwrap();
    assert_eq!(again.best, o.best);
}

#[test]
fn caption_generator_job_with_frozen_transfer() {
    let dir = tempfile::tempdir().unwrap();
    tiny_task(dir.path());
    let (lm, _) = train_language_model(
        &captrans::text::Corpus::read(&dir.path().join("general-text.train.jsonl"), captrans::text::CorpusSource::Other)
            .unwrap()
            .sentences,
        &captrans::text::Corpus::read(&dir.path().join("general-text.val.jsonl"), captrans::text::CorpusSource::Other)
            .unwrap()
            .sentences,
        &LmHyperparams { max_epochs: 2, ..LmHyperparams::desk() },
        5,
        LmSchedule::EarlyStopping,
        3,
    )
    .unwrap();
    lm.save(&dir.path().join("lm")).unwrap();
    let space = ParamSpace::new(vec![Dimension::log("learning_rate", 3e-3, 3e-2)]).unwrap();
    let job = json!({
        "target": "caption-generator",
        "dataset": "dataset.jsonl",
        "features": "features.bin",
        "lm_checkpoint": "lm",
        "space": space,
        "tuner": small_tuner(),
        "base_capgen": CapgenHyperparams { max_epochs: 4, beam_width: 2, ..CapgenHyperparams::desk() },
    });
    let path = dir.path().join("tune.json");
    std::fs::write(&path, job.to_string()).unwrap();
    let job = TuneJob::load(&path).unwrap();
    let out = dir.path().join("out");
    let o = run_tune_job(&job, &out, false).unwrap();
    assert_eq!(o.history.len(), 5);
    let best = o.best.fitness.unwrap();
    assert!((-1.0..=0.0).contains(&best), "fitness is negated WMD similarity: {best}");
    let cg = CaptionGenerator::load(&out.join(BEST_MODEL_DIR)).unwrap();
    assert_eq!(cg.transfer_mode(), captrans::capgen::TransferMode::Frozen);
}

#[test]
fn caption_generator_job_needs_features() {
    let j: TuneJob = serde_json::from_value(json!({"target": "caption-generator", "dataset": "d.jsonl"})).unwrap();
    assert!(matches!(j.validate(), Err(captrans::Error::Config(_))));
}
