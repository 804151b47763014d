use bayes_transformer::checkpoint::Checkpoint;
use bayes_transformer::config::TrainConfig;
use bayes_transformer::data::{generate_synthetic, SynthConfig, Vocab};
use bayes_transformer::losses::{total_loss_value, JointWeights};
use bayes_transformer::oracle::tiny_model_config;
use bayes_transformer::train::{
    evaluate, read_jsonl, run_paths, train_set, EpochRecord, EvalOptions, MetricsSink, StepRecord, Trainer,
    CHECKPOINT_FILE, EPOCHS_JSONL, STEPS_CSV, STEPS_JSONL,
};
use bayes_transformer::Error;

fn small_config(epochs: u32) -> TrainConfig {
    let mut c = TrainConfig {
        epochs,
        batch_size: 4,
        seed: 11,
        eval_samples: 6,
        synth: SynthConfig {
            num_samples: 10,
            feature_dim: 8,
            content_tokens: 3,
            max_tokens: 3,
            ..SynthConfig::default()
        },
        ..TrainConfig::default()
    };
    c.model = tiny_model_config();
    c.model.max_source_len = 64;
    c.model.max_target_len = 32;
    c.model.vocab_size = c.synth.content_tokens + 4;
    c
}

#[test]
fn one_epoch_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(1);
    let data = train_set(&config).unwrap();
    let mut trainer = Trainer::new(config.clone()).unwrap();
    let mut sink = MetricsSink::open(dir.path(), false).unwrap();
    let records = trainer.run(&data, None, Some(&mut sink)).unwrap();
    sink.flush().unwrap();
    trainer.save_run(dir.path(), &config.synth.vocab().unwrap()).unwrap();

    assert_eq!(records.len(), 1);
    assert_eq!(records[0].steps, 3);
    assert!(records[0].total.is_finite());
    for path in run_paths(dir.path()) {
        assert!(path.exists(), "{}", path.display());
    }
    let saved = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.encode(), trainer.checkpoint().encode());
    assert_eq!((saved.epoch, saved.step), (1, 3));
    assert_eq!(TrainConfig::load(&run_paths(dir.path())[0]).unwrap(), config);
}

#[test]
fn metrics_files_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(3);
    let data = train_set(&config).unwrap();
    let mut trainer = Trainer::new(config).unwrap();
    let mut sink = MetricsSink::open(dir.path(), false).unwrap();
    trainer.run(&data, None, Some(&mut sink)).unwrap();
    sink.flush().unwrap();

    let steps: Vec<StepRecord> = read_jsonl(&dir.path().join(STEPS_JSONL)).unwrap();
    assert_eq!(steps.len(), 9);
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.step, i as u64);
        assert_eq!(s.epoch, i as u32 / 3);
        assert_eq!(s.kl_weighted, s.kl_weight * s.kl_raw);
        assert_eq!(s.total, total_loss_value(s.kl_raw, s.ctc, s.ce, s.kl_weight, JointWeights::default()));
    }
    let csv = std::fs::read_to_string(dir.path().join(STEPS_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,epoch,kl_raw,kl_weight,kl_weighted,ctc,ce,total"));
    for (line, s) in lines.by_ref().zip(&steps) {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[0], s.step as f64);
        assert_eq!(fields[7], s.total);
    }
    assert_eq!(lines.next(), None);
    let epochs: Vec<EpochRecord> = read_jsonl(&dir.path().join(EPOCHS_JSONL)).unwrap();
    assert_eq!(epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn resuming_from_a_checkpoint_file_appends_identical_metrics() {
    let config = small_config(4);
    let data = train_set(&config).unwrap();

    let straight = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(config.clone()).unwrap();
    let mut sink = MetricsSink::open(straight.path(), false).unwrap();
    trainer.run(&data, None, Some(&mut sink)).unwrap();
    sink.flush().unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(config.clone()).unwrap();
    let mut sink = MetricsSink::open(split.path(), false).unwrap();
    first.run(&data, Some(2), Some(&mut sink)).unwrap();
    sink.flush().unwrap();
    drop(sink);
    first.checkpoint().save(&split.path().join(CHECKPOINT_FILE)).unwrap();
    drop(first);

    let ckpt = Checkpoint::load(&split.path().join(CHECKPOINT_FILE)).unwrap();
    let mut second = Trainer::resume(config, ckpt).unwrap();
    let mut sink = MetricsSink::open(split.path(), true).unwrap();
    second.run(&data, None, Some(&mut sink)).unwrap();
    sink.flush().unwrap();

    for name in [STEPS_JSONL, STEPS_CSV, EPOCHS_JSONL] {
        assert_eq!(
            std::fs::read(straight.path().join(name)).unwrap(),
            std::fs::read(split.path().join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(trainer.checkpoint().encode(), second.checkpoint().encode());
}

#[test]
fn non_finite_parameter_aborts_with_its_name() {
    let config = small_config(1);
    let data = train_set(&config).unwrap();
    let mut trainer = Trainer::new(config).unwrap();
    let id = trainer.store.id("decoder.0.ff.bayes_in.w_mu").expect("parameter exists");
    trainer.store.get_mut(id).data_mut()[3] = f64::NAN;
    match trainer.train_epoch(&data, None) {
        Err(Error::NonFinite { tensor, step }) => {
            assert_eq!(tensor, "param.decoder.0.ff.bayes_in.w_mu");
            assert_eq!(step, 0);
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn diverging_run_stops_with_a_non_finite_error() {
    let mut config = small_config(5);
    config.learning_rate = 1e300;
    let data = train_set(&config).unwrap();
    let mut trainer = Trainer::new(config).unwrap();
    let err = trainer.run(&data, None, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
}

#[test]
fn evaluation_rejects_a_mismatched_vocabulary() {
    let config = small_config(1);
    let trainer = Trainer::new(config.clone()).unwrap();
    let wrong = Vocab::letters(5).unwrap();
    let data = train_set(&config).unwrap();
    let err = evaluate(&trainer.model, &trainer.store, &wrong, &data, &EvalOptions::from_config(&config)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");

    let other = SynthConfig {
        feature_dim: 9,
        ..config.synth.clone()
    };
    let (data, _) = generate_synthetic(&other, 1).unwrap();
    let vocab = config.synth.vocab().unwrap();
    let err = evaluate(&trainer.model, &trainer.store, &vocab, &data, &EvalOptions::from_config(&config)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");
}

#[test]
fn untrained_model_has_high_error_rate() {
    let config = small_config(1);
    let trainer = Trainer::new(config.clone()).unwrap();
    let data = bayes_transformer::train::eval_set(&config).unwrap();
    let mut opts = EvalOptions::from_config(&config);
    opts.beam_width = 2;
    let report = evaluate(&trainer.model, &trainer.store, &config.synth.vocab().unwrap(), &data, &opts).unwrap();
    assert_eq!(report.samples, 6);
    assert!(report.cer > 0.5, "{}", report.cer);
}

#[test]
fn config_round_trips_through_toml_and_rejects_unknown_keys() {
    let config = small_config(7);
    assert_eq!(TrainConfig::from_toml(&config.to_toml().unwrap()).unwrap(), config);
    assert!(matches!(TrainConfig::from_toml("epochz = 3"), Err(Error::Config(_))));
    let partial = TrainConfig::from_toml("epochs = 3\n[model]\nd_model = 32\n").unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.model.d_model, 32);
    assert_eq!(partial.batch_size, TrainConfig::default().batch_size);
}
