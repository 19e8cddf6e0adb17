//! End-to-end runs: load a dataset, pretrain the CLIP branch, train, test.

use std::path::{Path, PathBuf};

use log::info;

use super::config::TrainConfig;
use super::data::{clip_vocabulary, load_caption_pairs, load_split, question_vocabulary, LoadedSplit};
use super::train::{MetricsRecord, Trainer};
use crate::clip::{contrastive_pretrain, PretrainConfig};
use crate::encoders::Vocabulary;
use crate::error::Result;
use crate::frame::Frame;
use crate::model::{Ccvqa, Mode};
use crate::synth::{manifest_path, DatasetManifest};
use crate::tensor::{ParamStore, Real};

/// A dataset directory loaded for one model geometry.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dir: PathBuf,
    pub train: LoadedSplit,
    pub val: LoadedSplit,
    pub test: LoadedSplit,
    pub captions: Vec<(Frame, String)>,
    pub question_vocab: Vocabulary,
    pub clip_vocab: Vocabulary,
}

impl PreparedData {
    pub fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let manifests: Vec<DatasetManifest> = ["train", "val", "test"]
            .iter()
            .map(|s| DatasetManifest::load(&manifest_path(dir, s)))
            .collect::<Result<_>>()?;
        let [train_m, val_m, test_m] = <[DatasetManifest; 3]>::try_from(manifests).expect("three splits");
        let captions = load_caption_pairs(dir, &cfg.model, cfg.seed)?;
        let texts: Vec<String> = captions.iter().map(|c| c.1.clone()).collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            question_vocab: question_vocabulary(&train_m),
            clip_vocab: clip_vocabulary(&train_m, &texts),
            train: load_split(dir, &train_m, &cfg.model, cfg.seed)?,
            val: load_split(dir, &val_m, &cfg.model, cfg.seed)?,
            test: load_split(dir, &test_m, &cfg.model, cfg.seed)?,
            captions,
        })
    }

    pub fn build_model<T: Real>(&self, cfg: &TrainConfig, seed: u64) -> Result<(Ccvqa, ParamStore<T>)> {
        Ccvqa::build(
            cfg.model.clone(),
            self.train.answers.clone(),
            self.question_vocab.clone(),
            self.clip_vocab.clone(),
            seed,
        )
    }
}

/// Contrastive pretraining of the model's CLIP branch on the caption pairs.
pub fn pretrain_clip<T: Real>(
    model: &Ccvqa,
    store: &mut ParamStore<T>,
    captions: &[(Frame, String)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = &cfg.clip_pretrain;
    if p.steps == 0 {
        return Ok(Vec::new());
    }
    let pcfg = PretrainConfig {
        steps: p.steps,
        batch: p.batch.min(captions.len()),
        lr: p.learning_rate,
        weight_decay: 0.0,
        seed,
    };
    contrastive_pretrain(&model.clip, store, captions, &model.clip_vocab, &pcfg)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub test: MetricsRecord,
    pub history: Vec<MetricsRecord>,
    pub clip_losses: Vec<f64>,
}

/// Pretrains (unless the mode ignores the CLIP branch), trains with
/// validation-based model selection, and scores the best model on test.
pub fn run_experiment<T: Real>(
    cfg: &TrainConfig,
    data: &PreparedData,
    mode: Mode,
    seed: u64,
    mut on_metrics: impl FnMut(&MetricsRecord),
) -> Result<(RunResult, Trainer<T>)> {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    cfg.seed = seed;
    let (model, mut store) = data.build_model::<T>(&cfg, seed)?;
    let clip_losses = if mode.uses_clip() {
        pretrain_clip(&model, &mut store, &data.captions, &cfg, seed)?
    } else {
        Vec::new()
    };
    if let (Some(first), Some(last)) = (clip_losses.first(), clip_losses.last()) {
        info!("clip pretraining loss {first:.4} -> {last:.4}");
    }
    let mut trainer = Trainer::new(cfg, model, store)?;
    let history = trainer.fit(&data.train, &data.val, &mut on_metrics)?;
    trainer.restore_best();
    let test = trainer.evaluate(&data.test)?;
    on_metrics(&test);
    Ok((
        RunResult {
            mode,
            seed,
            test,
            history,
            clip_losses,
        },
        trainer,
    ))
}
