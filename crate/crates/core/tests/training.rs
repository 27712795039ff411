use slicemil::benchmark::{domain_shift_benchmark, trainer_config};
use slicemil::data::{generate_volumes, SyntheticSpec, Volume};
use slicemil::eval::{evaluate, EvalSettings};
use slicemil::trainer::{checkpoint_path, train, TrainOptions, TrainState, TrainerConfig};

fn small_set() -> Vec<Volume> {
    let spec = SyntheticSpec {
        seed: 5,
        patients: 6,
        volume_length: (12, 16),
        lesion_run: (3, 5),
        ..SyntheticSpec::default()
    };
    generate_volumes(&spec).unwrap().into_iter().map(|g| g.volume).collect()
}

fn small_config() -> TrainerConfig {
    let mut c = TrainerConfig {
        backbone: "tiny-cnn-desk".into(),
        max_iterations: 6,
        batch_size: 2,
        section_len: 4,
        k: 2,
        ..TrainerConfig::default()
    };
    c.augmentation.output_size = 32;
    c
}

#[test]
fn same_seed_same_model_different_seed_different_model() {
    let v = small_set();
    let a = train(&v, &small_config(), TrainOptions::default()).unwrap();
    let b = train(&v, &small_config(), TrainOptions::default()).unwrap();
    assert_eq!(a.state.model, b.state.model);
    assert_eq!(a.history.iter().map(|r| r.loss).collect::<Vec<_>>(), b.history.iter().map(|r| r.loss).collect::<Vec<_>>());
    let c = train(&v, &TrainerConfig { seed: 1, ..small_config() }, TrainOptions::default()).unwrap();
    assert_ne!(a.state.model, c.state.model);
}

#[test]
fn resume_is_bit_identical() {
    let v = small_set();
    let config = TrainerConfig {
        checkpoint_every: 3,
        ..small_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let full = train(
        &v,
        &config,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let mid = TrainState::load(checkpoint_path(dir.path(), 3)).unwrap();
    assert_eq!(mid.iteration, 3);
    let resumed = train(
        &v,
        &config,
        TrainOptions {
            resume: Some(mid),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.state.model, full.state.model);
    assert_eq!(resumed.state.optimizer, full.state.optimizer);
    assert_eq!(
        resumed.history.iter().map(|r| r.loss).collect::<Vec<_>>(),
        full.history[3..].iter().map(|r| r.loss).collect::<Vec<_>>()
    );
    let last = TrainState::load(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(last.model, full.state.model);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn resume_rejects_a_changed_config() {
    let v = small_set();
    let state = train(&v, &small_config(), TrainOptions::default()).unwrap().state;
    let changed = TrainerConfig { k: 3, ..small_config() };
    let err = train(
        &v,
        &changed,
        TrainOptions {
            resume: Some(state),
            ..TrainOptions::default()
        },
    );
    assert!(err.is_err());
}

#[test]
fn checkpoint_round_trip_gives_identical_reports() {
    let v = small_set();
    let config = small_config();
    let state = train(&v, &config, TrainOptions::default()).unwrap().state;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    state.save(&path).unwrap();
    let loaded = TrainState::load(&path).unwrap();
    assert_eq!(loaded.config, config);
    let settings = EvalSettings::from_config(&config);
    let a = evaluate(&state.model, &v, None, &settings).unwrap();
    let b = evaluate(&loaded.model, &v, None, &settings).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loss_falls_over_two_hundred_iterations() {
    let bench = domain_shift_benchmark(0).unwrap();
    let config = TrainerConfig {
        max_iterations: 200,
        ..trainer_config(0)
    };
    let h = train(&bench.train, &config, TrainOptions::default()).unwrap().history;
    assert_eq!(h.len(), 200);
    assert!(h[199].loss < h[0].loss, "{} vs {}", h[199].loss, h[0].loss);
}
