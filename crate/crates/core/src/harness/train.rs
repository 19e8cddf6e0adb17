//! QA training and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::data::LoadedSplit;
use super::optim::{adamw_step, lr_schedule, AdamWConfig, AdamWState};
use crate::clip::PREFIX as CLIP_PREFIX;
use crate::error::{Error, Result};
use crate::fusion::{decode_answer, qa_loss};
use crate::model::{Ccvqa, Mode, PromptCache, QaSample};
use crate::synth::QType;
use crate::tensor::{Gradients, ParamStore, Real, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub top1: f64,
    pub per_qtype: BTreeMap<String, f64>,
    pub mean_loss: f64,
    pub count: usize,
    pub wall_time_s: f64,
}

/// Overall and per-question-type top-1 accuracy.
pub fn score_predictions(predictions: &[usize], targets: &[usize], qtypes: &[QType]) -> (f64, BTreeMap<String, f64>) {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for ((&p, &t), q) in predictions.iter().zip(targets).zip(qtypes) {
        let e = per.entry(q.as_str().to_string()).or_default();
        e.1 += 1;
        if p == t {
            hits += 1;
            e.0 += 1;
        }
    }
    let n = predictions.len().max(1) as f64;
    let per = per
        .into_iter()
        .map(|(k, (h, c))| (k, h as f64 / c as f64))
        .collect();
    (hits as f64 / n, per)
}

/// Loss and prediction of one sample, with gradients when requested.
fn run_sample<T: Real>(
    model: &Ccvqa,
    store: &ParamStore<T>,
    sample: &QaSample,
    target: usize,
    mode: Mode,
    cache: Option<&PromptCache<T>>,
    with_grad: bool,
) -> Result<(f64, usize, Option<Gradients<T>>)> {
    let mut tape = Tape::new(store);
    let out = model.forward(&mut tape, sample, mode, cache)?;
    let pred = decode_answer(tape.value(out.logits).data());
    let loss = qa_loss(&mut tape, out.logits, target)?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = if with_grad { Some(tape.backward(loss)?) } else { None };
    Ok((value, pred, grads))
}

/// Forward passes over a whole split.
pub fn evaluate<T: Real>(
    model: &Ccvqa,
    store: &ParamStore<T>,
    data: &LoadedSplit,
    mode: Mode,
    cache: Option<&PromptCache<T>>,
    epoch: usize,
) -> Result<MetricsRecord> {
    check_answers(model, data)?;
    let start = Instant::now();
    let results: Vec<(f64, usize)> = data
        .samples
        .par_iter()
        .zip(&data.targets)
        .map(|(s, &t)| run_sample(model, store, s, t, mode, cache, false).map(|(l, p, _)| (l, p)))
        .collect::<Result<_>>()?;
    let preds: Vec<usize> = results.iter().map(|r| r.1).collect();
    let (top1, per_qtype) = score_predictions(&preds, &data.targets, &data.qtypes);
    Ok(MetricsRecord {
        epoch,
        split: data.split.clone(),
        top1,
        per_qtype,
        mean_loss: results.iter().map(|r| r.0).sum::<f64>() / results.len().max(1) as f64,
        count: results.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn check_answers(model: &Ccvqa, data: &LoadedSplit) -> Result<()> {
    if data.answers != model.answers {
        return Err(Error::config(format!(
            "{} split has {} answers {:?}, model head has {} {:?}",
            data.split,
            data.answers.len(),
            data.answers,
            model.answers.len(),
            model.answers
        )));
    }
    Ok(())
}

/// Training state: model, parameters, optimizer and data order.
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub model: Ccvqa,
    pub store: ParamStore<T>,
    pub opt: AdamWState<T>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub best: Option<(f64, usize, ParamStore<T>)>,
    cache: PromptCache<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig, model: Ccvqa, mut store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        store.set_trainable_prefix(&format!("{CLIP_PREFIX}."), !cfg.clip_frozen);
        let opt = AdamWState::new(store.len());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            rng,
            epoch: 0,
            step: 0,
            best: None,
            cache: PromptCache::new(),
        })
    }

    pub fn from_checkpoint(model: Ccvqa, ckpt: Checkpoint<T>) -> Result<Self> {
        let rng = match &ckpt.rng {
            Some(r) => r.restore()?,
            None => ChaCha8Rng::seed_from_u64(ckpt.config.seed),
        };
        let mut t = Self::new(ckpt.config, model, ckpt.params)?;
        t.opt = ckpt.moments;
        t.rng = rng;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        if let Some(b) = ckpt.best_val_top1 {
            t.best = Some((b, ckpt.epoch, t.store.clone()));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            answers: self.model.answers.clone(),
            question_vocab: self.model.question_vocab.clone(),
            clip_vocab: self.model.clip_vocab.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: Some(RngState::capture(&self.rng)),
            best_val_top1: self.best.as_ref().map(|b| b.0),
            params: self.store.clone(),
            moments: self.opt.clone(),
        }
    }

    /// The best-validation parameters as a checkpoint (the current ones if no
    /// validation has run).
    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        let mut c = self.checkpoint();
        if let Some((top1, epoch, store)) = &self.best {
            c.params = store.clone();
            c.epoch = *epoch;
            c.best_val_top1 = Some(*top1);
        }
        c
    }

    fn cache(&self) -> Option<&PromptCache<T>> {
        (self.cfg.clip_frozen && self.cfg.mode.uses_clip()).then_some(&self.cache)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.cfg.epochs * train_len.div_ceil(self.cfg.batch_size)
    }

    /// One optimizer step on the given samples. Per-sample gradients are
    /// computed in parallel and summed in index order.
    pub fn train_step(&mut self, data: &LoadedSplit, batch: &[usize], total_steps: usize) -> Result<(f64, Vec<usize>)> {
        let mode = self.cfg.mode;
        let (model, store, cache) = (&self.model, &self.store, self.cache());
        let results: Vec<(f64, usize, Option<Gradients<T>>)> = batch
            .par_iter()
            .map(|&i| run_sample(model, store, &data.samples[i], data.targets[i], mode, cache, true))
            .collect::<Result<_>>()?;
        let mut grads = Gradients::empty(self.store.len());
        let mut loss = 0.0;
        let mut preds = Vec::with_capacity(batch.len());
        for (l, p, g) in &results {
            loss += l;
            preds.push(*p);
            grads.accumulate(g.as_ref().expect("requested"));
        }
        grads.scale(T::lit(1.0 / batch.len() as f64));
        let lr = lr_schedule(self.step, total_steps, self.cfg.learning_rate, self.cfg.lr_floor);
        let opt = AdamWConfig {
            weight_decay: self.cfg.weight_decay,
            ..Default::default()
        };
        adamw_step(&mut self.store, &grads, &mut self.opt, lr, &opt);
        self.step += 1;
        Ok((loss / batch.len() as f64, preds))
    }

    /// One shuffled pass over the training split; returns its metrics and
    /// the per-step losses.
    pub fn train_epoch(&mut self, data: &LoadedSplit) -> Result<(MetricsRecord, Vec<f64>)> {
        check_answers(&self.model, data)?;
        if data.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let start = Instant::now();
        let total = self.total_steps(data.len());
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut losses = Vec::new();
        let mut preds = vec![0; data.len()];
        let mut sum = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let (l, p) = self.train_step(data, batch, total)?;
            losses.push(l);
            sum += l * batch.len() as f64;
            for (&i, &pi) in batch.iter().zip(&p) {
                preds[i] = pi;
            }
        }
        self.epoch += 1;
        let (top1, per_qtype) = score_predictions(&preds, &data.targets, &data.qtypes);
        let rec = MetricsRecord {
            epoch: self.epoch,
            split: data.split.clone(),
            top1,
            per_qtype,
            mean_loss: sum / data.len() as f64,
            count: data.len(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok((rec, losses))
    }

    pub fn evaluate(&self, data: &LoadedSplit) -> Result<MetricsRecord> {
        evaluate(&self.model, &self.store, data, self.cfg.mode, self.cache(), self.epoch)
    }

    /// Trains for the remaining configured epochs, validating after each and
    /// keeping the best validation parameters (earlier epoch on ties).
    pub fn fit(
        &mut self,
        train: &LoadedSplit,
        val: &LoadedSplit,
        mut on_metrics: impl FnMut(&MetricsRecord),
    ) -> Result<Vec<MetricsRecord>> {
        check_answers(&self.model, train)?;
        check_answers(&self.model, val)?;
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let (rec, _) = self.train_epoch(train)?;
            on_metrics(&rec);
            out.push(rec);
            let v = self.evaluate(val)?;
            on_metrics(&v);
            if self.best.as_ref().is_none_or(|b| v.top1 > b.0) {
                self.best = Some((v.top1, self.epoch, self.store.clone()));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Replaces the parameters with the best validation ones.
    pub fn restore_best(&mut self) {
        if let Some((_, _, store)) = &self.best {
            self.store = store.clone();
        }
    }
}
