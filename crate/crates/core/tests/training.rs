mod common;

use ccvqa::clip::ClipModel;
use ccvqa::harness::experiment::PreparedData;
use ccvqa::harness::optim::{adamw_step, lr_schedule, AdamWConfig, AdamWState};
use ccvqa::harness::train::score_predictions;
use ccvqa::synth::QType;
use ccvqa::tensor::{Gradients, ParamStore, Tape, Tensor};
use common::*;
use rand::Rng;

/// Gradients equal to `g` for every parameter, produced through the tape.
fn grads_of(store: &ParamStore<f64>, g: &[Vec<f64>]) -> Gradients<f64> {
    let mut tape = Tape::new(store);
    let mut loss = None;
    for (id, gi) in store.ids().zip(g) {
        let p = tape.param(id);
        let c = tape.constant(Tensor::new(store.tensor(id).shape().to_vec(), gi.clone()).unwrap());
        let m = tape.mul(p, c).unwrap();
        let s = tape.sum(m);
        loss = Some(match loss {
            None => s,
            Some(l) => tape.add(l, s).unwrap(),
        });
    }
    tape.backward(loss.unwrap()).unwrap()
}

#[test]
fn adamw_without_decay_is_adam() {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    store.insert("a", random_tensor(&[3, 4], &mut r)).unwrap();
    store.insert("b", random_tensor(&[5], &mut r)).unwrap();
    let mut theta: Vec<Vec<f64>> = store.ids().map(|id| store.tensor(id).data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = theta.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut v = m.clone();
    let mut state = AdamWState::new(store.len());
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    for step in 1..=20 {
        let g: Vec<Vec<f64>> = theta.iter().map(|t| (0..t.len()).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let lr = 1e-2 / step as f64;
        let grads = grads_of(&store, &g);
        adamw_step(&mut store, &grads, &mut state, lr, &cfg);
        for p in 0..theta.len() {
            for i in 0..theta[p].len() {
                m[p][i] = 0.9 * m[p][i] + 0.1 * g[p][i];
                v[p][i] = 0.999 * v[p][i] + 0.001 * g[p][i] * g[p][i];
                let mh = m[p][i] / (1.0 - 0.9f64.powi(step));
                let vh = v[p][i] / (1.0 - 0.999f64.powi(step));
                theta[p][i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (p, id) in store.ids().enumerate() {
            assert!(max_abs_diff(store.tensor(id).data(), &theta[p]) <= 1e-12);
        }
    }
}

#[test]
fn adamw_first_step_and_decay() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::scalar(0.5)).unwrap();
    let mut state = AdamWState::new(1);
    let no_decay = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let grads = grads_of(&store, &[vec![1.0]]);
    adamw_step(&mut store, &grads, &mut state, 1e-3, &no_decay);
    assert!((store.tensor(store.ids().next().unwrap()).data()[0] - (0.5 - 1e-3)).abs() < 1e-9);

    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::from_f64(&[3], &[1.0, -2.0, 0.25]).unwrap()).unwrap();
    let before = store.tensor(store.ids().next().unwrap()).data().to_vec();
    let mut state = AdamWState::new(1);
    let grads = grads_of(&store, &[vec![0.0; 3]]);
    let decay = AdamWConfig {
        weight_decay: 0.1,
        ..Default::default()
    };
    adamw_step(&mut store, &grads, &mut state, 1e-2, &decay);
    let after = store.tensor(store.ids().next().unwrap()).data();
    for (a, b) in after.iter().zip(&before) {
        assert_eq!(*a, b * (1.0 - 1e-2 * 0.1));
    }

    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()).unwrap();
    let mut state = AdamWState::new(1);
    let grads = grads_of(&store, &[vec![0.0; 2]]);
    adamw_step(&mut store, &grads, &mut state, 1e-2, &no_decay);
    assert_eq!(store.tensor(store.ids().next().unwrap()).data(), [1.0, -2.0]);
}

#[test]
fn schedule_is_linear() {
    assert_eq!(lr_schedule(0, 100, 5e-5, 0.0), 5e-5);
    assert_eq!(lr_schedule(100, 100, 5e-5, 0.0), 0.0);
    assert!((lr_schedule(50, 100, 5e-5, 0.0) - 2.5e-5).abs() < 1e-20);
    assert_eq!(lr_schedule(100, 100, 5e-5, 1e-6), 1e-6);
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint_roundtrip_check(dir.path()).unwrap();
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    reproducibility_check(dir.path()).unwrap();
}

#[test]
fn frozen_clip_branch_is_untouched_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, root) = tiny_setup(dir.path(), 16);
    let data = PreparedData::load(&root, &cfg).unwrap();
    for frozen in [true, false] {
        let mut c = cfg.clone();
        c.clip_frozen = frozen;
        let mut t = tiny_trainer(&data, &c, 0);
        let before = t.store.clone();
        t.train_epoch(&data.train).unwrap();
        let clip = ClipModel::param_ids(&before);
        let unchanged = clip.iter().all(|&id| {
            before.tensor(id).data().iter().zip(t.store.tensor(id).data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        assert_eq!(unchanged, frozen);
    }
}

#[test]
fn zero_epochs_train_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, root) = tiny_setup(dir.path(), 16);
    cfg.epochs = 0;
    let data = PreparedData::load(&root, &cfg).unwrap();
    let mut t = tiny_trainer(&data, &cfg, 0);
    let before = t.store.clone();
    assert!(t.fit(&data.train, &data.val, |_| {}).unwrap().is_empty());
    assert!(same_bits(&before, &t.store));
}

#[test]
fn accuracy_bookkeeping() {
    let mut r = rng(2);
    let n = 200;
    let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..8)).collect();
    let qtypes: Vec<QType> = (0..n).map(|_| QType::ALL[r.random_range(0..5)]).collect();
    assert_eq!(score_predictions(&targets, &targets, &qtypes).0, 1.0);
    let constant = vec![3; n];
    let freq = targets.iter().filter(|&&t| t == 3).count() as f64 / n as f64;
    assert_eq!(score_predictions(&constant, &targets, &qtypes).0, freq);
    let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..8)).collect();
    let (top1, per) = score_predictions(&preds, &targets, &qtypes);
    let weighted: f64 = per
        .iter()
        .map(|(q, acc)| acc * qtypes.iter().filter(|t| t.as_str() == q).count() as f64)
        .sum::<f64>()
        / n as f64;
    assert!((weighted - top1).abs() < 1e-12);
}
