//! Turns manifests into model-ready samples: loads frames, samples `T` of
//! them, and picks key frames.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::encoders::{sample_frames, Vocabulary};
use crate::error::{Error, Result};
use crate::frame::{load_frames, Frame};
use crate::keyframe::select_keyframes;
use crate::model::{ModelConfig, QaSample};
use crate::synth::{load_captions, manifest_path, DatasetManifest, QType};

/// Frames prepared once per video and shared by its questions.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub sampled: crate::encoders::VideoClip,
    pub keyframes: Vec<Frame>,
}

#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub split: String,
    pub answers: Vec<String>,
    pub samples: Vec<QaSample>,
    pub targets: Vec<usize>,
    pub qtypes: Vec<QType>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-video seed derived from the run seed and the video's position.
pub fn video_seed(seed: u64, video_index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (video_index as u64).wrapping_add(1)
}

pub fn prepare_video(frames: &[Frame], cfg: &ModelConfig, seed: u64) -> Result<PreparedVideo> {
    let sampled = sample_frames(frames, cfg.frames, cfg.image_size, seed)?;
    let sel = select_keyframes(frames, cfg.keyframes, seed)?;
    let keyframes = sel
        .indices
        .iter()
        .map(|&i| {
            frames
                .iter()
                .find(|f| f.index == i)
                .expect("selected index comes from the input")
                .resized(cfg.image_size)
        })
        .collect();
    Ok(PreparedVideo { sampled, keyframes })
}

fn load_videos(root: &Path, dirs: &[&str], cfg: &ModelConfig, seed: u64) -> Result<HashMap<String, PreparedVideo>> {
    dirs.par_iter()
        .enumerate()
        .map(|(i, d)| {
            let path = root.join(d);
            if !path.is_dir() {
                return Err(Error::Ingest {
                    path,
                    reason: format!("frames directory of record {d:?} is missing"),
                });
            }
            let frames = load_frames(&path)?;
            Ok((d.to_string(), prepare_video(&frames, cfg, video_seed(seed, i))?))
        })
        .collect()
}

/// Loads every record of a manifest whose frame paths are relative to `root`.
pub fn load_split(root: &Path, manifest: &DatasetManifest, cfg: &ModelConfig, seed: u64) -> Result<LoadedSplit> {
    let videos = load_videos(root, &manifest.videos(), cfg, seed)?;
    let mut samples = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let v = &videos[&r.frames];
        samples.push(QaSample {
            clip: v.sampled.clone(),
            keyframes: v.keyframes.clone(),
            question: r.question.clone(),
        });
    }
    Ok(LoadedSplit {
        split: manifest.split.clone(),
        answers: manifest.answers.clone(),
        samples,
        targets: manifest.records.iter().map(|r| r.answer).collect(),
        qtypes: manifest.records.iter().map(|r| r.qtype).collect(),
    })
}

/// Reads `{split}.json` from a dataset directory and loads it.
pub fn load_named_split(dir: &Path, split: &str, cfg: &ModelConfig, seed: u64) -> Result<LoadedSplit> {
    let manifest = DatasetManifest::load(&manifest_path(dir, split))?;
    load_split(dir, &manifest, cfg, seed)
}

/// Key frame and caption of every training video.
pub fn load_caption_pairs(dir: &Path, cfg: &ModelConfig, seed: u64) -> Result<Vec<(Frame, String)>> {
    let captions = load_captions(dir)?;
    let dirs: Vec<&str> = captions.iter().map(|c| c.frames.as_str()).collect();
    let videos = load_videos(dir, &dirs, cfg, seed)?;
    Ok(captions
        .iter()
        .map(|c| (videos[&c.frames].keyframes[0].clone(), c.caption.clone()))
        .collect())
}

/// Question vocabulary from the training questions.
pub fn question_vocabulary(train: &DatasetManifest) -> Vocabulary {
    Vocabulary::from_texts(train.records.iter().map(|r| r.question.as_str()))
}

/// Prompt vocabulary: every training prompt plus the captions.
pub fn clip_vocabulary(train: &DatasetManifest, captions: &[String]) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    let mut questions: Vec<&str> = train.records.iter().map(|r| r.question.as_str()).collect();
    questions.sort_unstable();
    questions.dedup();
    for q in questions {
        for a in &train.answers {
            texts.push(crate::clip::prompt_text(q, a));
        }
    }
    texts.extend(captions.iter().cloned());
    Vocabulary::from_texts(texts.iter().map(|s| s.as_str()))
}
