//! Oracles and fixtures shared by the integration tests. Every oracle here
//! recomputes its quantity from scratch with plain loops over tensor data,
//! never through the tape.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ccvqa::clip::{ClipConfig, ClipModel};
use ccvqa::encoders::{VideoClip, Vocabulary};
use ccvqa::frame::Frame;
use ccvqa::fusion::{qa_loss, FusionTokens, FusionWeights, Projections};
use ccvqa::harness::config::TrainConfig;
use ccvqa::harness::verify::{random_geometry, random_instance};
use ccvqa::keyframe::{rgb_histogram, select_keyframes};
use ccvqa::model::{Ccvqa, Mode, ModelConfig, QaSample};
use ccvqa::synth::{build_dataset, DatasetConfig, PALETTE};
use ccvqa::tensor::{ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], rng: &mut ChaCha8Rng) {
    for &id in ids {
        for x in store.tensor_mut(id).data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
}

/// `x W` with `x: 1 x n`, `W: n x m`, as an explicit double loop.
pub fn naive_vec_mat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (n, m) = w.matrix_dims();
    assert_eq!(x.len(), n);
    (0..m).map(|j| (0..n).map(|i| x[i] * w.get(&[i, j])).sum()).collect()
}

/// `h[c] = <P_t t_c, P_v v>` computed per candidate with loops.
pub fn naive_interaction(t_cls: &Tensor<f64>, p_t: &Tensor<f64>, v_cls: &[f64], p_v: &Tensor<f64>) -> Vec<f64> {
    let pv = naive_vec_mat(v_cls, p_v);
    (0..t_cls.shape()[0])
        .map(|c| {
            let pt = naive_vec_mat(t_cls.row(c), p_t);
            pt.iter().zip(&pv).map(|(a, b)| a * b).sum()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation of `interact_tv` and `interact_tk` from the loop oracle
/// over `instances` random geometries.
pub fn interaction_max_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = r.random_range(2..=8);
        let w = r.random_range(1..=6);
        let d = r.random_range(1..=8);
        let mut store = ParamStore::<f64>::new();
        let mut init = rng(r.random());
        let proj = Projections::new(&mut ParamBuilder::new(&mut store, &mut init), "proj", d, w).unwrap();
        let t = random_tensor(&[c, w], &mut r);
        let v = random_tensor(&[1, d], &mut r);
        let k = random_tensor(&[1, d], &mut r);
        let mut tape = Tape::new(&store);
        let (tv, vv, kv) = (tape.constant(t.clone()), tape.constant(v.clone()), tape.constant(k.clone()));
        let h_tv = proj.interact_tv(&mut tape, tv, vv).unwrap();
        let h_tk = proj.interact_tk(&mut tape, tv, kv).unwrap();
        let p_t = store.tensor(proj.p_t.weight);
        let want_tv = naive_interaction(&t, p_t, v.data(), store.tensor(proj.p_v.weight));
        let want_tk = naive_interaction(&t, p_t, k.data(), store.tensor(proj.p_k.weight));
        assert_eq!(tape.shape(h_tv), [1, c]);
        worst = worst
            .max(max_abs_diff(tape.value(h_tv).data(), &want_tv))
            .max(max_abs_diff(tape.value(h_tk).data(), &want_tk));
    }
    worst
}

/// Fused logits for four given token rows (any of the last three may be
/// absent).
pub fn fuse_values(weights: &FusionWeights, store: &ParamStore<f64>, tokens: [Option<&[f64]>; 4]) -> Vec<f64> {
    let a = weights.answers;
    let mut tape = Tape::new(store);
    let mut vars = tokens.map(|t| t.map(|t| tape.constant(Tensor::new(vec![1, a], t.to_vec()).unwrap())));
    let qv = vars[0].take().expect("h_qv is required");
    let out = weights
        .fuse(
            &mut tape,
            &FusionTokens {
                qv,
                qk: vars[1],
                tv: vars[2],
                tk: vars[3],
            },
        )
        .unwrap();
    tape.value(out).data().to_vec()
}

/// Worst violation of `fuse(ax + by) = a fuse(x) + b fuse(y) - (a + b - 1) b0`
/// over random weights, token quadruples and coefficients.
pub fn affine_max_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let a = r.random_range(2..=7);
        let diagonal = r.random_bool(0.3);
        let mut store = ParamStore::<f64>::new();
        let mut init = rng(r.random());
        let fw = FusionWeights::new(&mut ParamBuilder::new(&mut store, &mut init), "fusion", a, diagonal).unwrap();
        randomize(&mut store, &fw.params(), &mut r);
        let x: Vec<Vec<f64>> = (0..4).map(|_| random_tensor(&[a], &mut r).into_data()).collect();
        let y: Vec<Vec<f64>> = (0..4).map(|_| random_tensor(&[a], &mut r).into_data()).collect();
        let (al, be) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let mix: Vec<Vec<f64>> = x
            .iter()
            .zip(&y)
            .map(|(xi, yi)| xi.iter().zip(yi).map(|(p, q)| al * p + be * q).collect())
            .collect();
        let as_tokens = |v: &Vec<Vec<f64>>| -> [Option<Vec<f64>>; 4] { [0, 1, 2, 3].map(|i| Some(v[i].clone())) };
        let eval = |v: &Vec<Vec<f64>>| {
            let t = as_tokens(v);
            fuse_values(&fw, &store, [t[0].as_deref(), t[1].as_deref(), t[2].as_deref(), t[3].as_deref()])
        };
        let (fm, fx, fy) = (eval(&mix), eval(&x), eval(&y));
        let b0 = store.tensor(fw.b).data();
        let rhs: Vec<f64> = (0..a).map(|i| al * fx[i] + be * fy[i] - (al + be - 1.0) * b0[i]).collect();
        worst = worst.max(max_abs_diff(&fm, &rhs));
    }
    worst
}

/// True when identity weights and a zero offset return the plain token sum,
/// compared bit for bit.
pub fn identity_fusion_sums_exactly(trials: usize, seed: u64) -> bool {
    let mut r = rng(seed);
    (0..trials).all(|_| {
        let a = r.random_range(2..=9);
        let mut store = ParamStore::<f64>::new();
        let mut init = rng(0);
        let fw = FusionWeights::new(&mut ParamBuilder::new(&mut store, &mut init), "fusion", a, false).unwrap();
        let t: Vec<Vec<f64>> = (0..4).map(|_| random_tensor(&[a], &mut r).into_data()).collect();
        let got = fuse_values(&fw, &store, [Some(&t[0]), Some(&t[1]), Some(&t[2]), Some(&t[3])]);
        let want: Vec<f64> = (0..a).map(|i| t[0][i] + t[1][i] + t[2][i] + t[3][i]).collect();
        got.iter().zip(&want).all(|(g, w)| g.to_bits() == w.to_bits())
    })
}

/// A random f64 model instance with its parameters.
pub fn instance(seed: u64) -> (Ccvqa, ParamStore<f64>, QaSample, ModelConfig, usize) {
    let mut r = rng(seed);
    let cfg = random_geometry(&mut r);
    let c = r.random_range(2..=6);
    let (model, store, sample) = random_instance::<f64>(cfg.clone(), c, &mut r).unwrap();
    (model, store, sample, cfg, c)
}

type BranchRun<'s> = (Tape<'s, f64>, Vec<Var>, [BTreeSet<ParamId>; 2]);

/// Runs the encoders and the selected shared-transformer branches, noting
/// which parameters each branch read for the first time.
fn encode_branches<'s>(model: &Ccvqa, sample: &QaSample, store: &'s ParamStore<f64>, which: [bool; 2]) -> BranchRun<'s> {
    let shared = &model.shared;
    let mut tape = Tape::new(store);
    let hq = model.question.encode(&mut tape, &model.question_ids(&sample.question)).unwrap();
    let hv = model.video.encode(&mut tape, &sample.clip).unwrap();
    let hk = model.encode_keyframes(&mut tape, &sample.keyframes).unwrap();
    let mut outs = Vec::new();
    let mut used = [BTreeSet::new(), BTreeSet::new()];
    for (branch, on) in which.iter().enumerate() {
        if !on {
            continue;
        }
        let before: BTreeSet<ParamId> = tape.params_used().collect();
        let h = if branch == 0 {
            shared.encode_qv(&mut tape, &hq, &hv).unwrap()
        } else {
            shared.encode_qk(&mut tape, &hq, &hk).unwrap()
        };
        used[branch] = tape.params_used().filter(|p| !before.contains(p)).collect();
        outs.push(h);
    }
    (tape, outs, used)
}

/// Shared-body checks for one random instance: the parameters reached by the
/// two branches differ only by their heads, an in-place body perturbation
/// moves both outputs, and the joint gradient equals the sum of the two
/// single-branch gradients. Returns the largest gradient discrepancy.
pub fn shared_weight_check(seed: u64) -> Result<f64, String> {
    let (model, store, sample, _, _) = instance(seed);
    let shared = &model.shared;
    let encode = |store, which| encode_branches(&model, &sample, store, which);

    let (tape, outs, used) = encode(&store, [true, true]);
    let heads_qv: BTreeSet<ParamId> = [Some(shared.head_qv.weight), shared.head_qv.bias].into_iter().flatten().collect();
    let heads_qk: BTreeSet<ParamId> = [Some(shared.head_qk.weight), shared.head_qk.bias].into_iter().flatten().collect();
    let body: BTreeSet<ParamId> = shared.body_params().into_iter().collect();
    let qv_body: BTreeSet<ParamId> = used[0].difference(&heads_qv).copied().collect();
    // the qk pass re-reads everything the qv pass touched, so only its heads are new
    let qk_new: BTreeSet<ParamId> = used[1].clone();
    if qv_body != body {
        return Err(format!("qv branch reaches {} body parameters, expected {}", qv_body.len(), body.len()));
    }
    if qk_new != heads_qk {
        return Err("qk branch introduced parameters beyond its own head".into());
    }
    let base = [tape.value(outs[0]).clone(), tape.value(outs[1]).clone()];
    drop(tape);

    let target = shared.body.params()[0];
    let mut bumped = store.clone();
    bumped.tensor_mut(target).data_mut()[0] += 0.5;
    let (t2, o2, _) = encode(&bumped, [true, true]);
    if t2.value(o2[0]).max_abs_diff(&base[0]) == 0.0 || t2.value(o2[1]).max_abs_diff(&base[1]) == 0.0 {
        return Err(format!("perturbing {} left a branch unchanged", store.get(target).name));
    }
    drop(t2);

    let mut r = rng(seed ^ 0xA5);
    let a = shared.answers;
    let weights = [random_tensor(&[1, a], &mut r), random_tensor(&[1, a], &mut r)];
    let grads_of = |which: [bool; 2]| {
        let (mut tape, outs, _) = encode(&store, which);
        let active: Vec<usize> = (0..2).filter(|&i| which[i]).collect();
        let mut loss = None;
        for (h, &i) in outs.iter().zip(&active) {
            let w = tape.constant(weights[i].clone());
            let p = tape.mul(*h, w).unwrap();
            let s = tape.sum(p);
            loss = Some(match loss {
                None => s,
                Some(l) => tape.add(l, s).unwrap(),
            });
        }
        tape.backward(loss.unwrap()).unwrap()
    };
    let joint = grads_of([true, true]);
    let only_qv = grads_of([true, false]);
    let only_qk = grads_of([false, true]);
    let mut worst: f64 = 0.0;
    for id in &body {
        let j = joint.param(*id).ok_or("body parameter without joint gradient")?;
        let a = only_qv.param(*id).ok_or("body parameter without qv gradient")?;
        let b = only_qk.param(*id).ok_or("body parameter without qk gradient")?;
        for i in 0..j.len() {
            worst = worst.max((j[i] - (a[i] + b[i])).abs() / (1.0 + j[i].abs()));
        }
    }
    Ok(worst)
}

/// Independent central-difference check of `qa_loss(forward)`: sampled
/// coordinates of every trainable parameter are bumped by `h` in a copy of
/// the store. Returns the largest `|a - n| / (|a| + |n| + 1e-5)`.
pub fn central_difference_error(seed: u64, mode: Mode, per_param: usize) -> f64 {
    let (model, store, sample, _, c) = instance(seed);
    let target = rng(seed).random_range(0..c);
    let loss = |s: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new(s);
        let out = model.forward(&mut tape, &sample, mode, None).unwrap();
        let l = qa_loss(&mut tape, out.logits, target).unwrap();
        tape.value(l).data()[0]
    };
    let grads = {
        let mut tape = Tape::new(&store);
        let out = model.forward(&mut tape, &sample, mode, None).unwrap();
        let l = qa_loss(&mut tape, out.logits, target).unwrap();
        tape.backward(l).unwrap()
    };
    let h = 1e-5;
    let mut r = rng(seed.wrapping_mul(31));
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let analytic = grads.param(id);
        for _ in 0..per_param.min(n) {
            let i = r.random_range(0..n);
            let orig = store.tensor(id).data()[i];
            work.tensor_mut(id).data_mut()[i] = orig + h;
            let plus = loss(&work);
            work.tensor_mut(id).data_mut()[i] = orig - h;
            let minus = loss(&work);
            work.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[i]);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-5));
        }
    }
    worst
}

/// Shape contract of one random configuration, as an error message.
pub fn shape_check(seed: u64) -> Result<(), String> {
    let (model, store, sample, cfg, c) = instance(seed);
    let mut tape = Tape::new(&store);
    let out = model.forward(&mut tape, &sample, Mode::Full, None).map_err(|e| e.to_string())?;
    let n_v = (cfg.image_size / cfg.patch).pow(2);
    let d = cfg.dim;
    let expect = |what: &str, got: &[usize], want: &[usize]| {
        if got == want {
            Ok(())
        } else {
            Err(format!("{what}: got {got:?}, want {want:?} in {cfg:?}"))
        }
    };
    expect("H_q", tape.shape(out.question.tokens), &[1 + cfg.question_len, d])?;
    expect("H_v", tape.shape(out.video.tokens), &[1 + n_v, d])?;
    let hk = out.keyframe.as_ref().ok_or("no H_k in full mode")?;
    expect("H_k", tape.shape(hk.tokens), &[1 + n_v, d])?;
    let ht = out.prompts.as_ref().ok_or("no H_t without a cache")?;
    expect("H_t", ht.to_tensor(&tape).shape(), &[c, cfg.prompt_len, cfg.clip_width])?;
    let t = out.tokens;
    for (name, v) in [("h_qv", Some(t.qv)), ("h_qk", t.qk), ("h_tv", t.tv), ("h_tk", t.tk), ("H", Some(out.logits))] {
        expect(name, tape.shape(v.ok_or(format!("{name} missing"))?), &[1, c])?;
    }
    Ok(())
}

/// Frames `0..n` filled with one color each.
pub fn solid_frames(colors: &[[f32; 3]], size: usize) -> Vec<Frame> {
    colors
        .iter()
        .enumerate()
        .map(|(i, &c)| Frame::filled(size, size, c, i))
        .collect()
}

/// All two-cluster partitions of `hists`, scored by total L1 distance to the
/// per-cluster mean; returns the minimizing labelings.
pub fn best_two_partitions(frames: &[Frame]) -> Vec<Vec<bool>> {
    let h: Vec<Vec<f64>> = frames.iter().map(|f| rgb_histogram(f).unwrap().bins).collect();
    let n = h.len();
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 1u32..(1 << n) - 1 {
        let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let mut cost = 0.0;
        for side in [false, true] {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == side).map(|i| &h[i]).collect();
            let mean: Vec<f64> = (0..h[0].len())
                .map(|b| members.iter().map(|m| m[b]).sum::<f64>() / members.len() as f64)
                .collect();
            cost += members
                .iter()
                .map(|m| m.iter().zip(&mean).map(|(x, y)| (x - y).abs()).sum::<f64>())
                .sum::<f64>();
        }
        if cost < best.0 - 1e-12 {
            best = (cost, vec![labels]);
        } else if (cost - best.0).abs() <= 1e-12 {
            best.1.push(labels);
        }
    }
    best.1
}

/// Key-frame checks: bit-identical reruns and, on five red then five blue
/// frames, one selection from each side of an optimal two-way partition.
pub fn keyframe_check(seed: u64) -> Result<(), String> {
    let red = PALETTE[0].1;
    let blue = PALETTE[2].1;
    let mut colors = vec![red; 5];
    colors.extend(vec![blue; 5]);
    let frames = solid_frames(&colors, 8);
    let sel = select_keyframes(&frames, 2, seed).map_err(|e| e.to_string())?;
    let again = select_keyframes(&frames, 2, seed).map_err(|e| e.to_string())?;
    let bits = |s: &ccvqa::keyframe::KeyframeSelection| s.scores.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if sel.indices != again.indices || bits(&sel) != bits(&again) {
        return Err("selection differs between identical runs".into());
    }
    let partitions = best_two_partitions(&frames);
    let ok = partitions.iter().any(|labels| {
        sel.indices.len() == 2 && labels[sel.indices[0]] != labels[sel.indices[1]]
    });
    if !ok {
        return Err(format!("selection {:?} does not cover both optimal clusters", sel.indices));
    }

    let mut r = rng(seed);
    let noisy: Vec<Frame> = (0..12)
        .map(|i| {
            let rgb = (0..8 * 8 * 3).map(|_| r.random::<f32>()).collect();
            Frame::new(8, 8, rgb, i).unwrap()
        })
        .collect();
    for k in 1..=4 {
        let a = select_keyframes(&noisy, k, seed).map_err(|e| e.to_string())?;
        let b = select_keyframes(&noisy, k, seed).map_err(|e| e.to_string())?;
        if a.indices != b.indices || bits(&a) != bits(&b) {
            return Err(format!("random video, k={k}: reruns differ"));
        }
    }
    Ok(())
}

/// A CLIP branch at the desk geometry with its own parameter store.
pub fn desk_clip(vocab: &Vocabulary, seed: u64) -> (ClipModel, ParamStore<f64>) {
    let m = ModelConfig::default();
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let clip = ClipModel::new(
        &mut ParamBuilder::new(&mut store, &mut r),
        ClipConfig {
            image_width: m.dim,
            image_heads: m.heads,
            image_layers: m.clip_layers,
            width: m.clip_width,
            text_heads: m.clip_heads,
            text_layers: m.clip_layers,
            mlp_ratio: m.mlp_ratio,
            image_size: m.image_size,
            patch: m.patch,
            prompt_len: m.prompt_len,
            vocab_size: vocab.len(),
        },
    )
    .unwrap();
    (clip, store)
}

/// Eight solid-color frames paired with captions naming the color.
pub fn color_pairs() -> Vec<(Frame, String)> {
    PALETTE
        .iter()
        .enumerate()
        .map(|(i, (name, rgb))| (Frame::filled(32, 32, *rgb, i), format!("a {name} frame")))
        .collect()
}

/// A small model and training setup over a freshly generated dataset.
pub fn tiny_setup(dir: &Path, videos: usize) -> (TrainConfig, PathBuf) {
    let data = DatasetConfig {
        videos,
        frames_per_video: 4,
        size: 16,
        ..Default::default()
    };
    build_dataset(&data, dir).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 2,
        model: ModelConfig {
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            frames: 2,
            image_size: 16,
            patch: 8,
            question_len: 6,
            video_layers: 1,
            text_layers: 1,
            fusion_layers: 1,
            clip_width: 8,
            clip_heads: 2,
            clip_layers: 1,
            prompt_len: 10,
            keyframes: 1,
            diagonal_fusion: false,
        },
        ..Default::default()
    };
    (cfg, dir.to_path_buf())
}

pub fn clip_frames(frames: Vec<Frame>) -> VideoClip {
    VideoClip::new(frames).unwrap()
}

/// Outcome of contrastive pretraining on [`color_pairs`].
pub struct PretrainOutcome {
    pub losses: Vec<f64>,
    pub seconds: f64,
    /// Fraction of images whose matched caption beats the mean mismatched
    /// similarity.
    pub matched_rows: f64,
}

pub fn pretrain_colors(steps: usize, seed: u64) -> PretrainOutcome {
    use ccvqa::clip::{contrastive_pretrain, PretrainConfig};
    let pairs = color_pairs();
    let vocab = Vocabulary::from_texts(pairs.iter().map(|p| p.1.as_str()));
    let (clip, mut store) = desk_clip(&vocab, seed);
    let start = std::time::Instant::now();
    let losses = contrastive_pretrain(
        &clip,
        &mut store,
        &pairs,
        &vocab,
        &PretrainConfig {
            steps,
            batch: 8,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let emb: Vec<_> = pairs
        .iter()
        .map(|(f, c)| clip.joint_embedding(&store, f, &clip.tokenize_prompt(c, &vocab)).unwrap())
        .collect();
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let n = emb.len();
    let good = (0..n)
        .filter(|&i| {
            let matched = dot(&emb[i].image, &emb[i].text);
            let others: f64 = (0..n).filter(|&j| j != i).map(|j| dot(&emb[i].image, &emb[j].text)).sum::<f64>() / (n - 1) as f64;
            matched > others
        })
        .count();
    PretrainOutcome {
        losses,
        seconds,
        matched_rows: good as f64 / n as f64,
    }
}

/// `|info_nce(constant B x B logits) - ln B|`, worst over batch sizes and
/// constants.
pub fn info_nce_uniform_error() -> f64 {
    use ccvqa::clip::info_nce;
    let mut r = rng(0);
    let mut worst: f64 = 0.0;
    for b in 2..=16 {
        let v = r.random_range(-5.0..5.0);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let logits = tape.constant(Tensor::full(&[b, b], v));
        let l = info_nce(&mut tape, logits).unwrap();
        worst = worst.max((tape.value(l).data()[0] - (b as f64).ln()).abs());
    }
    worst
}

pub fn same_bits(a: &ParamStore<f64>, b: &ParamStore<f64>) -> bool {
    a.len() == b.len()
        && a.ids().all(|id| {
            let (x, y) = (a.tensor(id), b.tensor(id));
            a.get(id).name == b.get(id).name
                && x.shape() == y.shape()
                && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn tiny_trainer(data: &ccvqa::harness::experiment::PreparedData, cfg: &TrainConfig, seed: u64) -> ccvqa::harness::train::Trainer<f64> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let (model, store) = data.build_model::<f64>(&cfg, seed).unwrap();
    ccvqa::harness::train::Trainer::new(cfg, model, store).unwrap()
}

/// Save after one step, reload, and train one more epoch both ways; the
/// parameters, moments and losses must agree bit for bit.
pub fn checkpoint_roundtrip_check(dir: &Path) -> Result<(), String> {
    use ccvqa::harness::checkpoint::Checkpoint;
    use ccvqa::harness::experiment::PreparedData;
    let (cfg, root) = tiny_setup(&dir.join("data"), 24);
    let data = PreparedData::load(&root, &cfg).map_err(|e| e.to_string())?;
    let mut a = tiny_trainer(&data, &cfg, 5);
    let total = a.total_steps(data.train.len());
    a.train_step(&data.train, &[0, 1, 2], total).map_err(|e| e.to_string())?;

    let ckpt = a.checkpoint();
    let bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
    let again = Checkpoint::<f64>::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if again.to_bytes().map_err(|e| e.to_string())? != bytes {
        return Err("bytes differ after a decode/encode cycle".into());
    }
    let path = dir.join("step1.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::<f64>::load(&path).map_err(|e| e.to_string())?;
    if !same_bits(&loaded.params, &a.store) {
        return Err("parameters changed through save/load".into());
    }
    if loaded.moments != a.opt {
        return Err("optimizer moments changed through save/load".into());
    }
    let mut b = ccvqa::harness::train::Trainer::from_checkpoint(a.model.clone(), loaded).map_err(|e| e.to_string())?;

    let (_, la) = a.train_epoch(&data.train).map_err(|e| e.to_string())?;
    let (_, lb) = b.train_epoch(&data.train).map_err(|e| e.to_string())?;
    if bits(&la) != bits(&lb) {
        return Err("resumed losses differ".into());
    }
    if !same_bits(&a.store, &b.store) || a.opt != b.opt {
        return Err("resumed parameters or moments differ".into());
    }
    Ok(())
}

/// Two fresh trainings from the same seed produce identical metric streams
/// and parameters; a different seed does not.
pub fn reproducibility_check(dir: &Path) -> Result<(), String> {
    use ccvqa::harness::experiment::PreparedData;
    let (cfg, root) = tiny_setup(&dir.join("data"), 24);
    let data = PreparedData::load(&root, &cfg).map_err(|e| e.to_string())?;
    let run = |seed| -> Result<(Vec<u64>, ParamStore<f64>), String> {
        let mut t = tiny_trainer(&data, &cfg, seed);
        let hist = t.fit(&data.train, &data.val, |_| {}).map_err(|e| e.to_string())?;
        let mut stream: Vec<f64> = Vec::new();
        for m in &hist {
            stream.push(m.mean_loss);
            stream.push(m.top1);
        }
        Ok((bits(&stream), t.store))
    };
    let (h1, s1) = run(1)?;
    let (h2, s2) = run(1)?;
    if h1 != h2 || !same_bits(&s1, &s2) {
        return Err("same seed, different training".into());
    }
    let (h3, _) = run(2)?;
    if h3 == h1 {
        return Err("different seeds gave identical training".into());
    }
    Ok(())
}
