mod common;

use std::path::Path;

use common::{small_config, write_subjects};
use eegrag::embedding::{ProviderConfig, ProviderKind};
use eegrag::encoder::GridPoint;
use eegrag::pipeline::{
    emit_plots, line_style, load_offline_artifacts, run_full_experiment, run_inference, run_offline, load_subjects,
    GridSpec, OfflineManifest, PipelineError, REPORT_SCHEMA,
};
use eegrag::stats::{EvalReport, ReportRow, Significance};
use tempfile::tempdir;

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn offline_manifest(dir: &Path) -> OfflineManifest {
    serde_json::from_value(read_json(&dir.join("offline.json"))).unwrap()
}

#[test]
fn store_holds_exactly_the_training_partition() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 1, 40, 2.0, 3);
    let config = small_config(&corpus.join("S00"), &tmp.path().join("out"), 10);
    let subject = &load_subjects(&config.corpus_path).unwrap()[0];
    let dir = tmp.path().join("out/S00");
    std::fs::create_dir_all(&dir).unwrap();
    let artifacts = run_offline(&config, subject, &dir).unwrap();
    let split = artifacts.manifest.split.as_ref().unwrap();
    assert_eq!(artifacts.store.len(), 30);
    let mut stored: Vec<&str> = artifacts.store.ids().collect();
    stored.sort_unstable();
    let mut expected = split.full_train();
    expected.sort_unstable();
    assert_eq!(stored, expected);
    for id in &split.test {
        assert!(!stored.contains(&id.as_str()), "{id} indexed");
    }
}

#[test]
fn defaults_are_recorded_without_a_grid() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 1, 30, 2.0, 5);
    let config = small_config(&corpus, &tmp.path().join("out"), 8);
    run_full_experiment(&config).unwrap();
    let dir = tmp.path().join("out/S00");
    let m = offline_manifest(&dir);
    assert!(!m.grid_used);
    assert!(!dir.join("grid.json").exists());
    let point = m.point.unwrap();
    assert_eq!(point.encoder, config.encoder);
    assert_eq!(point.train.epochs, config.train.epochs);
    assert_eq!(point.train.learning_rate, config.train.learning_rate);
    assert!(m.split.unwrap().validation.is_empty());
    assert!(m.final_train_loss.unwrap().is_finite());
}

#[test]
fn grid_search_picks_one_of_the_points() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 1, 40, 2.0, 6);
    let mut config = small_config(&corpus, &tmp.path().join("out"), 8);
    config.validation_count = 8;
    let a = GridPoint { encoder: config.encoder.clone(), train: config.train.clone() };
    let mut b = a.clone();
    b.train.learning_rate = 0.01;
    b.train.epochs = 5;
    config.grid = Some(GridSpec { points: vec![a.clone(), b.clone()], seeds: vec![0, 1] });
    run_full_experiment(&config).unwrap();
    let dir = tmp.path().join("out/S00");
    let m = offline_manifest(&dir);
    assert!(m.grid_used);
    assert!(dir.join("grid.json").is_file());
    let grid = read_json(&dir.join("grid.json"));
    assert_eq!(grid["table"].as_array().unwrap().len(), 2);
    let chosen = m.point.unwrap();
    assert!(chosen.encoder == a.encoder && [a.train.epochs, b.train.epochs].contains(&chosen.train.epochs));
    let split = m.split.unwrap();
    assert_eq!(split.validation.len(), 8);
    assert_eq!(split.test.len(), 8);
    assert_eq!(split.full_train().len(), 32);
}

#[test]
fn offline_refiner_returns_the_top_hit() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 1, 30, 2.0, 7);
    let config = small_config(&corpus, &tmp.path().join("out"), 10);
    let outcome = run_full_experiment(&config).unwrap();
    let decoded = &outcome.subjects[0].decoded;
    assert_eq!(decoded.len(), 10);
    for d in decoded {
        assert_eq!(d.retrieved.len(), 3);
        assert_eq!(d.output_sentence, d.retrieved[0].text);
        assert!(d.retrieved.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }
}

#[test]
fn rerun_reproduces_every_artifact_hash() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 2, 30, 2.0, 8);
    let first = run_full_experiment(&small_config(&corpus, &tmp.path().join("a"), 8)).unwrap();
    let second = run_full_experiment(&small_config(&corpus, &tmp.path().join("b"), 8)).unwrap();
    assert_eq!(first.report_hash, second.report_hash);
    assert_eq!(first.manifest.subjects, second.manifest.subjects);
    for name in ["report.json", "S00/store.bin", "S01/encoder.bin", "S01/scores_baseline.jsonl"] {
        assert_eq!(
            std::fs::read(tmp.path().join("a").join(name)).unwrap(),
            std::fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    let mut other = small_config(&corpus, &tmp.path().join("c"), 8);
    other.seed = 1;
    assert_ne!(run_full_experiment(&other).unwrap().report_hash, first.report_hash);
}

#[test]
fn nine_subjects_give_nine_rows_and_a_dataset_row() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 9, 24, 2.0, 9);
    let mut config = small_config(&corpus, &tmp.path().join("out"), 6);
    config.train.epochs = 10;
    config.baseline.n_seeds = 3;
    let outcome = run_full_experiment(&config).unwrap();
    let report = &outcome.report;
    assert_eq!(report.per_subject.len(), 9);
    let ids: Vec<&str> = report.per_subject.iter().map(|r| r.subject_id.as_str()).collect();
    assert_eq!(ids, ["S00", "S01", "S02", "S03", "S04", "S05", "S06", "S07", "S08"]);
    let all = report.whole_dataset.as_ref().unwrap();
    assert_eq!(all.subject_id, "ALL");
    assert_eq!(all.n, 9);
    assert!(all.p_fdr.is_none());
    assert_eq!(report.boxplot_data.len(), 20);
    let table = std::fs::read_to_string(tmp.path().join("out/report.txt")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("ALL")));

    let plots = emit_plots(report, &tmp.path().join("plots")).unwrap();
    let lines = std::fs::read_to_string(&plots.lines).unwrap();
    assert_eq!(lines.lines().count(), 10);
    let boxes = std::fs::read_to_string(&plots.dataset_boxes).unwrap();
    assert_eq!(boxes.lines().count(), 3);
}

#[test]
fn single_subject_omits_the_dataset_row() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 1, 24, 2.0, 10);
    let outcome = run_full_experiment(&small_config(&corpus, &tmp.path().join("out"), 6)).unwrap();
    assert!(outcome.report.whole_dataset.is_none());
    assert_eq!(outcome.report.per_subject.len(), 1);
    assert!(outcome.report.notices.iter().any(|n| n.contains("whole-dataset")), "{:?}", outcome.report.notices);
    assert_eq!(outcome.report.boxplot_data.len(), 2);
}

#[test]
fn report_json_matches_the_schema() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 2, 24, 2.0, 11);
    run_full_experiment(&small_config(&corpus, &tmp.path().join("out"), 6)).unwrap();
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let report = read_json(&tmp.path().join("out/report.json"));
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let mut broken = report.clone();
    broken["per_subject"][0]["p_raw"] = serde_json::json!(1.5);
    broken["extra"] = serde_json::json!(true);
    assert!(!validator.is_valid(&broken));

    let manifest = read_json(&tmp.path().join("out/manifest.json"));
    for key in ["started_at", "finished_at"] {
        chrono::DateTime::parse_from_rfc3339(manifest[key].as_str().unwrap()).unwrap();
    }
    let text = std::fs::read_to_string(tmp.path().join("out/report.json")).unwrap();
    assert!(!text.contains(manifest["started_at"].as_str().unwrap()));
}

#[test]
fn failed_stage_leaves_an_incomplete_manifest() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 1, 20, 2.0, 12);
    let mut config = small_config(&corpus, &tmp.path().join("out"), 5);
    config.embedding = ProviderConfig {
        kind: ProviderKind::External,
        endpoint: Some("http://127.0.0.1:9".into()),
        timeout_ms: 500,
        ..ProviderConfig::offline(0)
    };
    let err = run_full_experiment(&config).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: "embed", .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    let dir = tmp.path().join("out/S00");
    let m = read_json(&dir.join("offline.json"));
    assert_eq!(m["status"], "incomplete");
    assert_eq!(m["failed_stage"], "embed");
    assert!(m["error"].as_str().is_some_and(|e| !e.is_empty()));
    assert!(load_offline_artifacts(&dir).is_err());
    assert!(!dir.join("encoder.bin").exists());
}

#[test]
fn tampered_artifacts_are_rejected() {
    let tmp = tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_subjects(&corpus, 1, 20, 2.0, 13);
    let config = small_config(&corpus, &tmp.path().join("out"), 5);
    run_full_experiment(&config).unwrap();
    let dir = tmp.path().join("out/S00");
    let artifacts = load_offline_artifacts(&dir).unwrap();
    let subject = &load_subjects(&corpus).unwrap()[0];
    run_inference(&config, subject, &artifacts, &dir).unwrap();

    for name in ["store.bin", "encoder.bin", "embeddings.bin"] {
        let path = dir.join(name);
        let original = std::fs::read(&path).unwrap();
        let mut bytes = original.clone();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_offline_artifacts(&dir).err().expect("tampering detected");
        assert!(matches!(err, PipelineError::Stage { stage: "verify", .. }), "{name}: {err}");
        std::fs::write(&path, original).unwrap();
    }
    load_offline_artifacts(&dir).unwrap();
}

#[test]
fn invalid_config_is_a_validation_error() {
    let tmp = tempdir().unwrap();
    let mut config = small_config(&tmp.path().join("missing"), &tmp.path().join("out"), 5);
    let err = run_full_experiment(&config).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    config.corpus_path = tmp.path().to_path_buf();
    config.k = 0;
    assert!(matches!(config.validate(), Err(PipelineError::Validation(_))));
}

#[test]
fn config_round_trips_through_json_and_toml() {
    let tmp = tempdir().unwrap();
    let config = small_config(Path::new("/data/corpus"), Path::new("/data/out"), 12);
    let json = tmp.path().join("c.json");
    std::fs::write(&json, serde_json::to_vec(&config).unwrap()).unwrap();
    assert_eq!(eegrag::pipeline::ExperimentConfig::load(&json).unwrap(), config);
    let toml_path = tmp.path().join("c.toml");
    std::fs::write(&toml_path, "corpus_path = \"/c\"\noutput_dir = \"/o\"\nseed = 4\ntest_count = 7\n").unwrap();
    let loaded = eegrag::pipeline::ExperimentConfig::load(&toml_path).unwrap();
    assert_eq!((loaded.seed, loaded.test_count, loaded.k), (4, 7, 3));
    assert_eq!(loaded.baseline.n_seeds, 10);
}

fn row(id: &str, real: f64, rand: f64, p_fdr: f64) -> ReportRow {
    ReportRow {
        subject_id: id.into(),
        n: 10,
        real_mu: real,
        real_sigma: 0.1,
        rand_mu: rand,
        rand_sigma: 0.1,
        delta: real - rand,
        delta_pct: Some(100.0 * (real - rand) / rand),
        statistic: Some(1.0),
        method: None,
        p_raw: Some(p_fdr / 2.0),
        p_fdr: Some(p_fdr),
        significance: Significance::classify(Some(p_fdr)),
    }
}

#[test]
fn plot_data_styles_and_whiskers() {
    let rows = vec![
        row("A", 0.20, 0.10, 0.03),
        row("B", 0.15, 0.14, 0.30),
        row("C", 0.18, 0.12, 0.06),
        row("D", 0.50, 0.13, 0.009),
        row("E", 0.16, 0.15, 0.05),
    ];
    assert_eq!(rows.iter().map(line_style).collect::<Vec<_>>(), ["solid", "dashed", "dashed", "solid", "dashed"]);
    let report = EvalReport { per_subject: rows, whole_dataset: None, boxplot_data: vec![], notices: vec![] };
    let tmp = tempdir().unwrap();
    let files = emit_plots(&report, tmp.path()).unwrap();
    let lines = std::fs::read_to_string(&files.lines).unwrap();
    assert!(lines.lines().nth(1).unwrap().ends_with(",significant,solid"));

    // real means sorted: .15 .16 .18 .20 .50 -> q1 .16, median .18, q3 .20,
    // upper fence .26 (below the max), lower fence .10 clipped to .15.
    let boxes = std::fs::read_to_string(&files.dataset_boxes).unwrap();
    let real: Vec<f64> = boxes.lines().nth(1).unwrap().split(',').skip(1).take(8).map(|v| v.parse().unwrap()).collect();
    let expect = [5.0, 0.15, 0.15, 0.16, 0.18, 0.20, 0.26, 0.50];
    for (got, want) in real.iter().zip(expect) {
        assert!((got - want).abs() < 1e-12, "{real:?}");
    }
}
