use groupbert_core::accounting::count_params;
use groupbert_core::config::{preset_names, DataSource, ExperimentConfig, PRESETS};
use groupbert_core::model::{Family, NormPolicy};
use groupbert_core::Error;

#[test]
fn every_preset_parses_and_validates() {
    assert_eq!(PRESETS.len(), 10);
    for name in preset_names() {
        let cfg = ExperimentConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(cfg.name, name);
    }
}

#[test]
fn size_presets_carry_the_hyperparameter_table() {
    let expected = [
        ("bert-small", 4e-4, 512),
        ("bert-medium", 2e-4, 480),
        ("bert-base", 2e-4, 480),
        ("bert-large", 1e-4, 512),
        ("groupbert-small", 3e-3, 512),
        ("groupbert-medium", 1.5e-3, 480),
        ("groupbert-base", 8e-4, 480),
        ("groupbert-large", 4e-4, 480),
    ];
    for (name, lr, batch) in expected {
        let cfg = ExperimentConfig::preset(name).unwrap();
        assert_eq!(cfg.training.optimizer.peak_lr, lr, "{name}");
        assert_eq!(cfg.training.batch_size, batch, "{name}");
        assert!(cfg.schedule.phases.iter().all(|p| p.global_batch == batch as u64));
        assert_eq!(cfg.schedule.total_steps(), 1_000_000);
        assert_eq!(cfg.model.heads * 64, cfg.model.hidden);
        match cfg.model.family {
            Family::Bert => assert_eq!(cfg.model.norm_policy, NormPolicy::Postnorm),
            Family::GroupBert => {
                assert_eq!(cfg.model.norm_policy, NormPolicy::Prenorm);
                assert_eq!(cfg.model.dropout_rate, 0.0);
            }
        }
    }
    let base = |n| count_params(&ExperimentConfig::preset(n).unwrap().model).unwrap().total_params as f64;
    assert!((base("bert-base") - 110.1e6).abs() <= 0.15e6);
    assert!((base("groupbert-base") - 160.8e6).abs() <= 0.15e6);
}

#[test]
fn unknown_keys_are_reported_by_name() {
    let err = ExperimentConfig::from_json(r#"{"model": {"hiden": 64}}"#, &[]).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("hiden"), "{err}");
    let err = ExperimentConfig::from_json(r#"{"trainng": {}}"#, &[]).unwrap_err();
    assert!(err.to_string().contains("trainng"), "{err}");
}

#[test]
fn required_keys_are_named_when_missing() {
    let err = ExperimentConfig::from_json(r#"{"model": {}}"#, &["model", "training"]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("`training`"), "{err}");
    assert!(ExperimentConfig::from_json("{}", &[]).is_ok());
    assert!(ExperimentConfig::from_json("[1]", &[]).unwrap_err().is_config());
}

#[test]
fn semantic_problems_are_collected() {
    let text = r#"{"model": {"hidden": 30, "heads": 4}, "training": {"batch_size": 0}}"#;
    let err = ExperimentConfig::from_json(text, &[]).unwrap_err().to_string();
    assert!(err.contains("hidden") && err.contains("batch_size"), "{err}");
    let err = ExperimentConfig::from_json(r#"{"data": {"source": "text"}}"#, &[]).unwrap_err();
    assert!(err.to_string().contains("data.path"), "{err}");
    let err = ExperimentConfig::from_json(
        r#"{"model": {"max_positions": 16}, "training": {"seq_len": 32}}"#,
        &[],
    )
    .unwrap_err();
    assert!(err.to_string().contains("max_positions"), "{err}");
}

#[test]
fn load_accepts_paths_and_preset_names() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("seqs.txt"), "5 6 7\n8 9 10\n11 12\n13 14 15\n16 17\n5 9\n").unwrap();
    let path = dir.path().join("mine.json");
    std::fs::write(
        &path,
        r#"{"model": {"vocab_size": 40, "max_positions": 32},
            "training": {"seq_len": 16},
            "data": {"source": "sequences", "path": "seqs.txt"}}"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load(path.to_str().unwrap(), &["model", "training"]).unwrap();
    assert_eq!(cfg.name, "mine");
    assert_eq!(cfg.data.source, DataSource::Sequences);
    assert_eq!(cfg.data.path.as_deref(), Some(dir.path().join("seqs.txt").as_path()));
    let (train, eval) = cfg.load_data().unwrap();
    assert_eq!(train.len() + eval.len(), 5);
    assert_eq!(eval.len(), 1);

    assert_eq!(ExperimentConfig::load("toy-groupbert", &[]).unwrap().model.hidden, 64);
    let err = ExperimentConfig::load("no-such-thing", &[]).unwrap_err().to_string();
    assert!(err.contains("toy-groupbert"), "{err}");
}

#[test]
fn synthetic_data_split_is_seeded() {
    let cfg = ExperimentConfig::preset("toy-groupbert").unwrap();
    let (train, eval) = cfg.load_data().unwrap();
    assert_eq!((train.len(), eval.len()), (1800, 200));
    assert_eq!(cfg.load_data().unwrap().0, train);
    let other = ExperimentConfig { seed: 1, ..cfg };
    assert_ne!(other.load_data().unwrap().0, train);
}

#[test]
fn configs_round_trip_through_json() {
    for name in preset_names() {
        let cfg = ExperimentConfig::preset(name).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text, &[]).unwrap(), cfg);
    }
}
