use proptest::prelude::*;

use resnetplus::data::{synth_splits, AugmentPolicy, Normalization, Preprocessor};
use resnetplus::model::{Model, ModelConfig};
use resnetplus::trainer::{cosine_lr, ema_update, evaluate, train, EmaState, TrainConfig, TrainSetup};
use resnetplus::Tensor;

fn small_run(seed: u64, epochs: usize) -> (resnetplus::trainer::TrainOutcome, Model<f32>) {
    let splits = synth_splits(3, 12, 32, 0).unwrap();
    let pre = Preprocessor::new(32, Normalization::synthetic(), AugmentPolicy::synthetic()).unwrap();
    let mut model = Model::build(&ModelConfig::resnet50_plus(3).with_width(0.25), seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    };
    let setup = TrainSetup {
        train: &splits.train,
        val: &splits.val,
        pre: &pre,
        out_dir: None,
    };
    let outcome = train(&mut model, &setup, &cfg).unwrap();
    (outcome, model)
}

#[test]
fn training_is_bit_reproducible() {
    let (a, ma) = small_run(3, 3);
    let (b, mb) = small_run(3, 3);
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.to_csv(), b.report.to_csv());
    assert_eq!(ma.state().params, mb.state().params);
    let (c, _) = small_run(4, 3);
    assert_ne!(a.report.first_batch_loss, c.report.first_batch_loss);
}

#[test]
fn best_epoch_is_the_maximum_of_the_val_series() {
    let (out, _) = small_run(5, 4);
    let r = &out.report;
    let max = r.epochs.iter().map(|e| e.val_acc).fold(f64::MIN, f64::max);
    assert_eq!(r.best_val_acc, max);
    assert_eq!(r.epochs[r.best_epoch].val_acc, max);
    // Ties keep the earliest epoch.
    assert!(r.epochs[..r.best_epoch].iter().all(|e| e.val_acc < max));
}

#[test]
fn single_epoch_considers_one_checkpoint() {
    let (out, _) = small_run(6, 1);
    assert_eq!(out.report.epochs.len(), 1);
    assert_eq!(out.report.best_epoch, 0);
    assert_eq!(out.report.steps, 3);
}

#[test]
fn zeroed_classifier_is_at_chance() {
    let splits = synth_splits(3, 60, 32, 1).unwrap();
    let pre = Preprocessor::new(32, Normalization::synthetic(), AugmentPolicy::synthetic()).unwrap();
    let mut model = Model::<f32>::build(&ModelConfig::resnet50_plus(3).with_width(0.25), 0).unwrap();
    let fc = model.fc().clone();
    model.state_mut().param_mut(fc.weight).data_mut().fill(0.0);
    let weights = model.state().clone();
    let report = evaluate(&model, &weights, &splits.test, &pre).unwrap();
    // 30 balanced samples: binomial sd of 1/3 is about 0.086, allow three.
    let acc = report.accuracy();
    assert!((acc - 1.0 / 3.0).abs() < 0.26, "{acc}");
    let mut again = evaluate(&model, &weights, &splits.test, &pre).unwrap();
    again.latency = report.latency.clone();
    assert_eq!(again, report);
}

#[test]
fn ema_follows_geometric_closed_form() {
    let target = Tensor::<f64>::ones(&[5]);
    let mut shadow = vec![Tensor::<f64>::zeros(&[5])];
    for n in 1..=200 {
        ema_update(&mut shadow, std::slice::from_ref(&target), 0.995).unwrap();
        let want = 1.0 - 0.995f64.powi(n);
        assert!(shadow[0].data().iter().all(|v| (v - want).abs() < 1e-12));
    }
}

#[test]
fn cosine_closed_form_midpoint() {
    let cfg = TrainConfig::default();
    assert_eq!(cosine_lr(0, &cfg), 0.01);
    assert!((cosine_lr(20, &cfg) - (1e-6 + 0.5 * (0.01 - 1e-6))).abs() < 1e-15);
    assert_eq!(cosine_lr(40, &cfg), 0.01);
    assert!(cosine_lr(39, &cfg) < 2e-5);
}

proptest! {
    #[test]
    fn cosine_is_bounded_and_non_increasing_within_a_cycle(
        lr0 in 1e-4..1.0f64,
        frac in 0.0..1.0f64,
        t_max in 1usize..100,
        epochs in 1usize..400,
    ) {
        let cfg = TrainConfig { lr0, eta_min: lr0 * frac, t_max_epochs: t_max, ..TrainConfig::default() };
        for e in 0..epochs {
            let lr = cosine_lr(e, &cfg);
            prop_assert!(lr >= cfg.eta_min && lr <= lr0);
            if (e + 1) % t_max != 0 {
                prop_assert!(cosine_lr(e + 1, &cfg) <= lr);
            }
        }
    }

    #[test]
    fn ema_shadow_stays_inside_the_history_envelope(
        history in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 4), 1..40),
        decay in 0.0..0.999f64,
    ) {
        let initial = resnetplus::params::ModelState {
            params: vec![Tensor::new(&[4], history[0].clone()).unwrap()],
            buffers: vec![],
        };
        let mut ema = EmaState::new(&initial, decay).unwrap();
        for step in &history[1..] {
            let state = resnetplus::params::ModelState {
                params: vec![Tensor::new(&[4], step.clone()).unwrap()],
                buffers: vec![],
            };
            ema.update(&state).unwrap();
        }
        for i in 0..4 {
            let lo = history.iter().map(|h| h[i]).fold(f64::MAX, f64::min);
            let hi = history.iter().map(|h| h[i]).fold(f64::MIN, f64::max);
            let s = ema.shadow.params[0].data()[i];
            prop_assert!(s >= lo - 1e-9 && s <= hi + 1e-9);
        }
    }
}
