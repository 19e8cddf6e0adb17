mod common;

use ccvqa::clip::ClipModel;
use ccvqa::fusion::{interact, qa_loss, FusionWeights, Projections};
use ccvqa::model::Mode;
use ccvqa::tensor::{ParamBuilder, ParamStore, Tape, Tensor};
use common::*;
use rand::Rng;

#[test]
fn interactions_match_the_loop_oracle() {
    let err = interaction_max_error(100, 7);
    assert!(err <= 1e-10, "max error {err:e}");
}

#[test]
fn zero_visual_projection_gives_zero_scores() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let proj = Projections::new(&mut ParamBuilder::new(&mut store, &mut r), "proj", 5, 3).unwrap();
    for x in store.tensor_mut(proj.p_v.weight).data_mut() {
        *x = 0.0;
    }
    let mut tape = Tape::new(&store);
    let t = tape.constant(random_tensor(&[4, 3], &mut r));
    let v = tape.constant(random_tensor(&[1, 5], &mut r));
    let h = proj.interact_tv(&mut tape, t, v).unwrap();
    assert!(tape.value(h).data().iter().all(|&x| x == 0.0));
}

#[test]
fn orthonormal_prompts_give_one_hot_scores() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let prompts = tape.constant(Tensor::eye(4));
    for c in 0..4 {
        let mut row = vec![0.0; 4];
        row[c] = 1.0;
        let v = tape.constant(Tensor::new(vec![1, 4], row.clone()).unwrap());
        let h = interact(&mut tape, prompts, v).unwrap();
        assert_eq!(tape.value(h).data(), row.as_slice());
    }
}

#[test]
fn mismatched_projection_widths_are_rejected() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let p = tape.constant(Tensor::zeros(&[3, 4]));
    let v = tape.constant(Tensor::zeros(&[1, 5]));
    assert!(interact(&mut tape, p, v).is_err());
}

#[test]
fn fusion_is_affine() {
    let err = affine_max_error(200, 3);
    assert!(err <= 1e-10, "max error {err:e}");
}

#[test]
fn identity_weights_sum_the_tokens() {
    assert!(identity_fusion_sums_exactly(50, 11));
}

#[test]
fn zero_tokens_give_the_offset() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(2);
    let fw = FusionWeights::new(&mut ParamBuilder::new(&mut store, &mut r), "fusion", 5, false).unwrap();
    randomize(&mut store, &fw.params(), &mut r);
    let z = vec![0.0; 5];
    let h = fuse_values(&fw, &store, [Some(&z), Some(&z), Some(&z), Some(&z)]);
    assert_eq!(h, store.tensor(fw.b).data());
}

#[test]
fn fusion_weights_are_registered_once() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let fw = FusionWeights::new(&mut ParamBuilder::new(&mut store, &mut r), "fusion", 6, false).unwrap();
    let mut names: Vec<&str> = fw.params().iter().map(|&id| store.get(id).name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), 5);
    assert_eq!(store.len(), 5);
    for id in &fw.w {
        assert_eq!(store.tensor(*id).shape(), [6, 6]);
    }
}

#[test]
fn shared_body_is_one_parameter_set() {
    for seed in 0..8 {
        let err = shared_weight_check(seed).unwrap();
        assert!(err <= 1e-12, "seed {seed}: gradient-sum error {err:e}");
    }
}

#[test]
fn bypassed_body_with_selecting_head_returns_the_question_class_token() {
    for seed in 0..5 {
        let (mut model, mut store, sample, cfg, c) = instance(seed);
        if c > cfg.dim {
            continue;
        }
        model.shared.bypass_body = true;
        for x in store.tensor_mut(model.shared.segment).data_mut() {
            *x = 0.0;
        }
        let head = &model.shared.head_qv;
        let w = store.tensor_mut(head.weight);
        for i in 0..cfg.dim {
            for j in 0..c {
                w.data_mut()[i * c + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        if let Some(b) = head.bias {
            store.tensor_mut(b).data_mut().fill(0.0);
        }
        let mut tape = Tape::new(&store);
        let hq = model.question.encode(&mut tape, &model.question_ids(&sample.question)).unwrap();
        let hv = model.video.encode(&mut tape, &sample.clip).unwrap();
        let h = model.shared.encode_qv(&mut tape, &hq, &hv).unwrap();
        let q_cls = tape.value(hq.tokens).row(0)[..c].to_vec();
        assert_eq!(tape.value(h).data(), q_cls.as_slice(), "seed {seed}");
    }
}

#[test]
fn loss_gradient_is_softmax_minus_one_hot() {
    let mut r = rng(5);
    for _ in 0..50 {
        let c = r.random_range(2..=10);
        let target = r.random_range(0..c);
        let h = random_tensor(&[1, c], &mut r);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(h.clone(), true);
        let l = qa_loss(&mut tape, x, target).unwrap();
        let loss = tape.value(l).data()[0];
        let g = tape.backward(l).unwrap();
        let grad = g.leaf(x).unwrap();
        let m = h.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = h.data().iter().map(|v| (v - m).exp()).sum();
        let want: Vec<f64> = (0..c)
            .map(|i| (h.data()[i] - m).exp() / z - if i == target { 1.0 } else { 0.0 })
            .collect();
        assert!(max_abs_diff(grad, &want) <= 1e-10);
        assert!((loss - (z.ln() + m - h.data()[target])).abs() <= 1e-10);
    }
}

#[test]
fn loss_examples() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let u = tape.constant(Tensor::zeros(&[1, 8]));
    let l = qa_loss(&mut tape, u, 3).unwrap();
    assert!((tape.value(l).data()[0] - 8f64.ln()).abs() < 1e-12);
    let mut row = vec![0.0; 8];
    row[2] = 20.0;
    let s = tape.constant(Tensor::new(vec![1, 8], row).unwrap());
    let l = qa_loss(&mut tape, s, 2).unwrap();
    assert!(tape.value(l).data()[0] < 1e-3);
    assert!(qa_loss(&mut tape, s, 8).is_err());
}

#[test]
fn no_clip_mode_ignores_the_clip_branch() {
    for seed in 0..5 {
        let (model, store, sample, _, _) = instance(seed);
        let logits = |s: &ParamStore<f64>| {
            let mut tape = Tape::new(s);
            let out = model.forward(&mut tape, &sample, Mode::NoClip, None).unwrap();
            assert!(out.tokens.qk.is_none() && out.tokens.tv.is_none() && out.tokens.tk.is_none());
            let used: Vec<_> = tape.params_used().collect();
            (tape.value(out.logits).clone(), used)
        };
        let (base, used) = logits(&store);
        let clip_ids = ClipModel::param_ids(&store);
        assert!(!clip_ids.is_empty());
        assert!(used.iter().all(|id| !clip_ids.contains(id)));
        let mut bumped = store.clone();
        randomize(&mut bumped, &clip_ids, &mut rng(seed));
        let (after, _) = logits(&bumped);
        assert_eq!(base.data(), after.data(), "seed {seed}");
    }
}

#[test]
fn no_crossdomain_mode_keeps_question_video_token_independent_of_keyframes() {
    for seed in 0..5 {
        let (model, store, mut sample, cfg, _) = instance(seed);
        let run = |sample: &ccvqa::model::QaSample| {
            let mut tape = Tape::new(&store);
            let out = model.forward(&mut tape, sample, Mode::NoCrossdomain, None).unwrap();
            assert!(out.tokens.qk.is_none() && out.tokens.tv.is_none());
            (
                tape.value(out.tokens.qv).clone(),
                tape.value(out.tokens.tk.expect("h_tk present")).clone(),
            )
        };
        let (qv, tk) = run(&sample);
        let mut r = rng(seed + 100);
        for f in &mut sample.keyframes {
            *f = ccvqa::harness::verify::random_frame(cfg.image_size, f.index, &mut r);
        }
        let (qv2, tk2) = run(&sample);
        assert_eq!(qv.data(), qv2.data());
        assert!(tk.max_abs_diff(&tk2) > 0.0);
    }
}
