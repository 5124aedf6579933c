mod common;

use convtx::audio::Utterance;
use convtx::model::{Checkpoint, Model};
use convtx::optim::{average_checkpoints, train_epoch, AdaDeltaState, Trainer};
use convtx::Error;

#[test]
fn loss_decreases_over_the_first_five_epochs() {
    let data = common::toy_data(10, 3);
    let run = common::train(common::toy_config(3, 5), &data.examples).unwrap();
    let losses: Vec<f64> = run.stats.iter().map(|s| s.mean_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn empty_epoch_has_zero_stats_and_no_checkpoint() {
    let mut model = Model::new(convtx::model::preset("toy").unwrap(), 0).unwrap();
    let before = model.clone();
    let mut state = AdaDeltaState::new(0.95, 1e-6);
    let mut called = false;
    let stats = train_epoch(&mut model, &[], &mut state, 10.0, 1, 0, &mut |_, _| {
        called = true;
        Ok(())
    })
    .unwrap();
    assert!(!called);
    assert_eq!((stats.batches, stats.tokens, stats.mean_loss), (0, 0, 0.0));
    assert_eq!(model.params(), before.params());
}

#[test]
fn learning_rate_is_fixed_and_recorded() {
    let data = common::toy_data(8, 1);
    let mut trainer = Trainer::new(common::toy_config(1, 3)).unwrap();
    let mut headers = Vec::new();
    for _ in 0..3 {
        trainer
            .run_epoch(&data.examples, &mut |ck: Checkpoint, _| {
                headers.push(ck.header);
                Ok(())
            })
            .unwrap();
        assert_eq!(trainer.state.lr(), 1.0);
    }
    for (i, h) in headers.iter().enumerate() {
        assert_eq!(h.get("optim.lr"), Some("1.0"));
        assert_eq!(h.get("optim.rho"), Some("0.95"));
        assert_eq!(
            h.get("checkpoint.epoch"),
            Some((i + 1).to_string().as_str())
        );
    }
}

#[test]
fn non_finite_features_abort_the_epoch() {
    let mut data = common::toy_data(4, 2);
    data.examples[2].features.data_mut()[5] = f64::NAN;
    let err = common::train(common::toy_config(2, 1), &data.examples)
        .err()
        .unwrap();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn wide_beam_never_loses_to_greedy_on_trained_models() {
    for seed in [21, 22, 23] {
        let data = common::toy_data(50, seed);
        let run = common::train(common::toy_config(seed, 40), &data.examples).unwrap();
        let greedy = common::corpus_wer(&run.model, &data, None);
        let beam = common::corpus_wer(&run.model, &data, Some(20));
        assert!(
            greedy.rate() >= beam.rate(),
            "seed {seed}: greedy {greedy:?} beam {beam:?}"
        );
    }
}

#[test]
fn averaged_toy_model_still_decodes() {
    let data = common::toy_data(50, 7);
    let run = common::train(common::toy_config(7, 40), &data.examples).unwrap();
    let avg = average_checkpoints(&run.checkpoints[30..]).unwrap();
    assert_eq!(avg.header.get("checkpoint.averaged_count"), Some("10"));
    let model = avg.to_model().unwrap();
    let w = common::corpus_wer(&model, &data, Some(5));
    assert!(w.rate() <= 0.05, "{w:?}");
}

#[test]
fn utterances_shorter_than_the_conv_stack_are_rejected() {
    let mut data = common::toy_data(2, 4);
    let short = Utterance {
        id: "short".into(),
        features: convtx::tensor::Tensor::zeros([2, 16]),
        text: "a".into(),
    };
    data.dataset.utterances.push(short);
    let examples = convtx::cli::examples(&data.dataset, &data.vocab);
    let err = common::train(common::toy_config(4, 1), &examples)
        .err()
        .unwrap();
    assert!(matches!(err, Error::Input(_)), "{err}");
}
