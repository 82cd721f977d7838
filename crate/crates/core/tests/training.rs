//! Loss values, the optimizer, the schedule and short training runs.

mod common;

use common::*;
use fuseseg_core::graph::Graph;
use fuseseg_core::model::{Model, ModelSpec, Parameters, Variant};
use fuseseg_core::objectives::{
    aggregate, ce_loss, combined_loss, combined_loss_value, dice_loss, overlap_metrics, binarize, LossConfig,
    MetricsRecord,
};
use fuseseg_core::optim::{step_decay, AmsGrad, OptimizerState};
use fuseseg_core::synth::{generate_dataset, kfold_split, PhantomParams};
use fuseseg_core::train::{epoch_order, make_batch, predict_batch, train_run, Split, TrainConfig, TrainSession};
use fuseseg_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn t(v: &[f64]) -> Tensor {
    Tensor::new([v.len()], v.to_vec()).unwrap()
}

#[test]
fn hand_computed_losses() {
    let y = t(&[1.0, 0.0, 0.0, 0.0]);
    let half = t(&[0.5; 4]);
    assert!((dice_loss(&half, &y, 1.0).unwrap() - 0.5).abs() <= 1e-9);
    assert!((ce_loss(&half, &y, 1e-7).unwrap() - std::f64::consts::LN_2).abs() <= 1e-9);
    let sharp = t(&[0.9, 0.1, 0.1, 0.1]);
    assert!((ce_loss(&sharp, &y, 1e-7).unwrap() - 0.105_360_515_657_826_3).abs() <= 1e-9);
    let cfg = LossConfig::default();
    assert!((combined_loss_value(&half, &y, &cfg).unwrap() - 1.193_147_180_559_945).abs() <= 1e-9);
    assert!(combined_loss_value(&y, &y, &cfg).unwrap() <= 2e-7);
    let ones = Tensor::new([100], vec![1.0; 100]).unwrap();
    assert_eq!(dice_loss(&ones, &ones, 1.0).unwrap(), 0.0);
    assert_eq!(dice_loss(&Tensor::zeros([9]), &Tensor::zeros([9]), 1.0).unwrap(), 0.0);
    let no_ce = LossConfig { alpha: 0.0, ..cfg };
    assert_eq!(combined_loss_value(&sharp, &y, &no_ce).unwrap(), dice_loss(&sharp, &y, 1.0).unwrap());
}

#[test]
fn loss_input_errors() {
    let y = t(&[1.0, 0.0]);
    assert!(dice_loss(&t(&[0.5; 3]), &t(&[1.0, 0.0, 0.0, 0.0]), 1.0).is_err());
    assert!(dice_loss(&t(&[0.5, 0.5]), &t(&[1.0, 0.5]), 1.0).is_err());
    assert!(ce_loss(&t(&[0.5; 3]), &y, 1e-7).is_err());
}

#[test]
fn combined_graph_loss_equals_value_function() {
    let mut r = rng(30);
    let p = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
    let y = binary(&[2, 1, 8, 8], 0.3, &mut r);
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let pv = g.variable(p.clone());
    let l = combined_loss(&mut g, pv, &y, &cfg).unwrap();
    assert_eq!(g.value(l).item().unwrap(), combined_loss_value(&p, &y, &cfg).unwrap());
}

proptest! {
    #[test]
    fn losses_stay_in_range(p in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
        let mut r = rng(seed);
        let y: Vec<f64> = p.iter().map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let (p, y) = (t(&p), t(&y));
        let d = dice_loss(&p, &y, 1.0).unwrap();
        prop_assert!((0.0..1.0).contains(&d));
        let ce = ce_loss(&p, &y, 1e-7).unwrap();
        prop_assert!(ce >= 0.0 && ce <= -(1e-7f64).ln() + 1e-12);
    }

    #[test]
    fn v_max_never_decreases(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut params = Parameters::new();
        params.push("w", uniform(&[7], -1.0, 1.0, &mut r));
        params.push("b", uniform(&[3], -1.0, 1.0, &mut r));
        let mut state = OptimizerState::new(&params);
        let cfg = AmsGrad::default();
        for step in 0..100 {
            let scale = if step % 10 == 0 { 10.0 } else { 0.1 };
            let grads = vec![
                (0..7).map(|_| r.random_range(-scale..scale)).collect::<Vec<f64>>(),
                (0..3).map(|_| r.random_range(-scale..scale)).collect(),
            ];
            let before = state.v_max.clone();
            state.step(&cfg, &mut params, &grads, 1e-3).unwrap();
            prop_assert_eq!(state.t, step as u64 + 1);
            for (old, new) in before.iter().flatten().zip(state.v_max.iter().flatten()) {
                prop_assert!(new >= old);
            }
            for (vm, v) in state.v_max.iter().flatten().zip(state.v.iter().flatten()) {
                prop_assert!(vm >= v);
            }
        }
    }
}

#[test]
fn first_amsgrad_step_by_hand() {
    let mut params = Parameters::new();
    params.push("x", t(&[1.0, -2.0, 0.5]));
    let mut state = OptimizerState::new(&params);
    let g = [0.3, -4.0, 0.0];
    let lr = 1e-2;
    state
        .step(&AmsGrad::default(), &mut params, &[g.to_vec()], lr)
        .unwrap();
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
    let expected: Vec<f64> = [1.0, -2.0, 0.5]
        .iter()
        .zip(g)
        .map(|(x, gi)| x - lr * gi / (gi.abs() + 1e-8))
        .collect();
    for (a, b) in params.tensors()[0].data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }
    let mut bad = state.clone();
    let before = params.clone();
    assert!(bad
        .step(&AmsGrad::default(), &mut params, &[vec![f64::NAN, 0.0, 0.0]], lr)
        .is_err());
    assert_eq!(params.tensors(), before.tensors());
}

#[test]
fn step_schedule() {
    assert_eq!(step_decay(1e-4, 30, 0), 1e-4);
    assert_eq!(step_decay(1e-4, 30, 30), 5e-5);
    assert_eq!(step_decay(1e-4, 30, 59), 5e-5);
    assert_eq!(step_decay(1e-4, 30, 60), 2.5e-5);
    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = (0..200).map(|e| cfg.lr_at_epoch(e)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    for k in 1..6 {
        assert_eq!(cfg.lr_at_epoch(30 * k), cfg.lr_at_epoch(30 * k - 1) / 2.0);
    }
}

#[test]
fn aggregate_reports_population_sd_over_runs() {
    let rec = |dice| MetricsRecord {
        dice,
        sensitivity: dice,
        relative_area_difference: 0.1,
    };
    let runs = vec![vec![rec(0.7), rec(0.8)], vec![rec(0.7)], vec![rec(0.8), rec(0.8)]];
    let s = aggregate(&runs).unwrap();
    assert!((s.dice.mean - 0.75).abs() < 1e-12);
    let per_run = [0.75, 0.7, 0.8];
    let mean = per_run.iter().sum::<f64>() / 3.0;
    let sd = (per_run.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt();
    assert!((s.dice.sd - sd).abs() < 1e-12);
    assert_eq!(s.dice.to_string(), "75.0 ± 4.1");
    assert!(aggregate(&[]).is_err());
}

fn toy(n: usize) -> (Vec<fuseseg_core::synth::SegmentationSample>, Split) {
    let params = PhantomParams {
        image_size: 32,
        n_distractors: (1, 2),
        n_decoys: (0, 1),
        mass_radius: Range::new(3.0, 6.0),
        blob_radius: Range::new(2.0, 4.0),
        ..PhantomParams::default()
    };
    let data = generate_dataset(&params, n).unwrap();
    let folds = kfold_split(n, 4, 0).unwrap();
    (data, Split::from_folds(&folds, 0).unwrap())
}

use fuseseg_core::synth::Range;

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr0: 1e-3,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn smoke_training_reduces_loss() {
    let (data, _) = toy(8);
    let split = Split {
        train: (0..8).collect(),
        test: vec![],
    };
    let spec = ModelSpec::with_base_width(Variant::Proposed, 4);
    let run = train_run(&spec, &data, &split, &small_config(5), 3).unwrap();
    assert_eq!(run.history.len(), 5);
    let first = run.history[0].train_loss;
    let last = run.history[4].train_loss;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn runs_are_deterministic_given_the_seed() {
    let (data, split) = toy(12);
    let spec = ModelSpec::with_base_width(Variant::FuseUnet, 4);
    let a = train_run(&spec, &data, &split, &small_config(2), 9).unwrap();
    let b = train_run(&spec, &data, &split, &small_config(2), 9).unwrap();
    let c = train_run(&spec, &data, &split, &small_config(2), 10).unwrap();
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!((x.train_loss - y.train_loss).abs() <= 1e-10);
        assert!((x.val_dice - y.val_dice).abs() <= 1e-10);
    }
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params().tensors(), b.model.params().tensors());
    assert_ne!(a.history, c.history);
    assert_eq!(a.metrics.len(), split.test.len());
}

#[test]
fn shuffles_depend_only_on_seed_and_epoch() {
    let train: Vec<usize> = (0..40).collect();
    assert_eq!(epoch_order(&train, 4, 7), epoch_order(&train, 4, 7));
    assert_ne!(epoch_order(&train, 4, 7), epoch_order(&train, 4, 8));
    assert_ne!(epoch_order(&train, 4, 7), epoch_order(&train, 5, 7));
    let mut sorted = epoch_order(&train, 4, 7);
    sorted.sort_unstable();
    assert_eq!(sorted, train);
}

/// A hand-written loop optimizing the Dice loss alone reproduces the
/// history of a session configured with alpha = 0.
#[test]
fn zero_alpha_equals_pure_dice_training() {
    let (data, split) = toy(12);
    let spec = ModelSpec::with_base_width(Variant::FuseUnet, 4);
    let mut config = small_config(2);
    config.loss.alpha = 0.0;
    let reference = train_run(&spec, &data, &split, &config, 5).unwrap();

    let mut model = Model::build(&spec, 5).unwrap();
    let mut state = OptimizerState::new(model.params());
    let opt = config.optimizer();
    for epoch in 0..config.epochs {
        let order = epoch_order(&split.train, 5, epoch);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = make_batch(&data, chunk).unwrap();
            let (loss, grads) = {
                let mut g = Graph::new();
                let m = g.input(batch.master.clone());
                let a = g.input(batch.assistant.clone());
                let out = model.forward(&mut g, m, Some(a)).unwrap();
                let loss = g.dice_loss(out.prob, &batch.label, config.loss.epsilon).unwrap();
                g.backward(loss).unwrap();
                let grads: Vec<Vec<f64>> = out.params.iter().map(|&p| g.grad(p).unwrap().to_vec()).collect();
                (g.value(loss).item().unwrap(), grads)
            };
            state
                .step(&opt, model.params_mut(), &grads, step_decay(config.lr0, config.decay_every, epoch))
                .unwrap();
            weighted += loss * chunk.len() as f64;
        }
        let mut dice = 0.0;
        for chunk in split.test.chunks(config.batch_size) {
            let batch = make_batch(&data, chunk).unwrap();
            let prob = predict_batch(&model, &batch).unwrap();
            for k in 0..chunk.len() {
                let pred = binarize(&prob.index_first(k).unwrap(), 0.5);
                dice += overlap_metrics(&pred, &batch.label.index_first(k).unwrap()).unwrap().0;
            }
        }
        let rec = reference.history[epoch];
        assert_eq!(rec.train_loss, weighted / order.len() as f64, "epoch {epoch}");
        assert_eq!(rec.val_dice, dice / split.test.len() as f64, "epoch {epoch}");
    }
    assert_eq!(reference.model.params().tensors(), model.params().tensors());
}

#[test]
fn session_and_configuration_errors() {
    let spec = ModelSpec::with_base_width(Variant::Unet, 4);
    assert!(TrainSession::new(&spec, TrainConfig { batch_size: 0, ..TrainConfig::default() }, 0).is_err());
    assert!(TrainSession::new(&spec, TrainConfig { lr0: -1.0, ..TrainConfig::default() }, 0).is_err());
    let folds = kfold_split(10, 5, 0).unwrap();
    assert!(Split::from_folds(&folds, 5).is_err());
    let overlapping = Split {
        train: vec![0, 1, 2],
        test: vec![2, 3],
    };
    assert!(overlapping.check_disjoint().is_err());
    let (data, _) = toy(4);
    let mut s = TrainSession::new(&spec, TrainConfig::default(), 0).unwrap();
    assert!(s.run_epoch(&data, &overlapping).is_err());
}

#[test]
fn divergence_aborts_with_the_epoch() {
    let (data, split) = toy(8);
    let spec = ModelSpec::with_base_width(Variant::Unet, 4);
    let mut s = TrainSession::new(&spec, small_config(3), 0).unwrap();
    s.model.params_mut().tensors_mut()[0].data_mut()[0] = f64::NAN;
    let err = s.run_epoch(&data, &split).unwrap_err().to_string();
    assert!(err.contains("epoch 0"), "{err}");
}
