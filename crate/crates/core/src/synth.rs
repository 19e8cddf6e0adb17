//! Procedural VideoQA data: a single colored shape moving over a plain
//! background, with template questions of the five types what, who, when,
//! where and how.
//!
//! Question templates and their answers:
//!
//! | type  | question                                  | answer                      |
//! |-------|-------------------------------------------|-----------------------------|
//! | what  | `what color is the shape`                 | color                       |
//! | what  | `what shape is shown`                     | shape kind                  |
//! | who   | `who is {color}`                          | shape kind                  |
//! | how   | `how does the shape move`                 | motion (`still` if static)  |
//! | where | `where does the shape end up`             | final side or `center`      |
//! | when  | `when is the shape {on the left, ...}`    | `start` or `end`            |
//!
//! The `when` question names one end of the motion axis and asks whether the
//! shape is there at the start or at the end of the clip; static videos have
//! no `when` question. Pretraining captions read `a {color} {shape}`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("magenta", [0.85, 0.1, 0.8]),
    ("orange", [1.0, 0.55, 0.05]),
    ("purple", [0.5, 0.15, 0.7]),
];

pub const BACKGROUNDS: [[f32; 3]; 3] = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 1.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Static,
}

impl Motion {
    /// Answer to the "how" question.
    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Static => "still",
        }
    }

    /// Where the shape is in the last frame.
    pub fn end_word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "top",
            Motion::Down => "bottom",
            Motion::Static => "center",
        }
    }

    /// Where the shape is in the first frame.
    pub fn start_word(self) -> &'static str {
        match self {
            Motion::Left => "right",
            Motion::Right => "left",
            Motion::Up => "bottom",
            Motion::Down => "top",
            Motion::Static => "center",
        }
    }

    /// Unit step direction in image coordinates (y grows downwards).
    fn direction(self) -> (f32, f32) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
            Motion::Static => (0.0, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    What,
    Who,
    When,
    Where,
    How,
}

impl QType {
    pub const ALL: [QType; 5] = [QType::What, QType::Who, QType::When, QType::Where, QType::How];

    pub fn as_str(self) -> &'static str {
        match self {
            QType::What => "what",
            QType::Who => "who",
            QType::When => "when",
            QType::Where => "where",
            QType::How => "how",
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthVideoSpec {
    pub shape: ShapeKind,
    /// Index into [`PALETTE`].
    pub color: usize,
    pub motion: Motion,
    pub background: [f32; 3],
    pub frames: usize,
    pub size: usize,
    /// Which end of the motion axis the "when" question names: false for the
    /// start side, true for the end side.
    pub when_end: bool,
    pub seed: u64,
}

impl SynthVideoSpec {
    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color].0
    }

    pub fn rgb(&self) -> [f32; 3] {
        PALETTE[self.color].1
    }

    pub fn validate(&self) -> Result<()> {
        if self.color >= PALETTE.len() {
            return Err(Error::config(format!("color index {} outside the palette", self.color)));
        }
        if self.rgb() == self.background {
            return Err(Error::config("shape and background colors must differ"));
        }
        if self.frames == 0 {
            return Err(Error::config("a video needs at least one frame"));
        }
        if self.size < 16 {
            return Err(Error::config(format!("frame size {} is too small to draw on", self.size)));
        }
        Ok(())
    }

    fn radius(&self) -> f32 {
        self.size as f32 / 5.0
    }

    /// Shape center in frame `t`; linear from one margin to the other.
    pub fn center(&self, t: usize) -> (f32, f32) {
        let s = self.size as f32;
        let r = self.radius();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let jitter = s / 8.0;
        let off: f32 = rng.random_range(-jitter..jitter);
        let (dx, dy) = self.motion.direction();
        let frac = if self.frames == 1 { 0.0 } else { t as f32 / (self.frames - 1) as f32 };
        let lo = r + 1.0;
        let hi = s - r - 1.0;
        let along = |d: f32| if d > 0.0 { lo + (hi - lo) * frac } else { hi - (hi - lo) * frac };
        let mid = s / 2.0;
        match (dx != 0.0, dy != 0.0) {
            (true, _) => (along(dx), mid + off),
            (_, true) => (mid + off, along(dy)),
            _ => (mid + off, mid - off),
        }
    }

    fn covers(&self, (cx, cy): (f32, f32), x: f32, y: f32) -> bool {
        let r = self.radius();
        let (dx, dy) = (x - cx, y - cy);
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex up, base at cy + r.
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Renders the frames of a video without touching the file system.
pub fn render_video(spec: &SynthVideoSpec) -> Result<Vec<Frame>> {
    spec.validate()?;
    let rgb = spec.rgb();
    Ok((0..spec.frames)
        .map(|t| {
            let mut f = Frame::filled(spec.size, spec.size, spec.background, t);
            let c = spec.center(t);
            for y in 0..spec.size {
                for x in 0..spec.size {
                    if spec.covers(c, x as f32 + 0.5, y as f32 + 0.5) {
                        f.set_pixel(x, y, rgb);
                    }
                }
            }
            f
        })
        .collect())
}

/// Renders a video and writes its frames as `0000.{ext}`, `0001.{ext}`, ...
pub fn generate_video(spec: &SynthVideoSpec, dir: &Path, format: FrameFormat) -> Result<Vec<Frame>> {
    let frames = render_video(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in &frames {
        f.save(&dir.join(format!("{:04}.{}", f.index, format.extension())))?;
    }
    Ok(frames)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub qtype: QType,
}

fn qa(question: impl Into<String>, answer: &str, qtype: QType) -> QaPair {
    QaPair {
        question: question.into(),
        answer: answer.to_string(),
        qtype,
    }
}

/// Template questions about one video. Answers are single words.
pub fn generate_qa(spec: &SynthVideoSpec) -> Vec<QaPair> {
    let kind = spec.shape.word();
    let mut out = vec![
        qa("what color is the shape", spec.color_name(), QType::What),
        qa("what shape is shown", kind, QType::What),
        qa(format!("who is {}", spec.color_name()), kind, QType::Who),
        qa("how does the shape move", spec.motion.word(), QType::How),
        qa("where does the shape end up", spec.motion.end_word(), QType::Where),
    ];
    if spec.motion != Motion::Static {
        let side = if spec.when_end { spec.motion.end_word() } else { spec.motion.start_word() };
        let place = match side {
            "top" | "bottom" => format!("at the {side}"),
            _ => format!("on the {side}"),
        };
        let answer = if spec.when_end { "end" } else { "start" };
        out.push(qa(format!("when is the shape {place}"), answer, QType::When));
    }
    out
}

pub fn caption_for_pretraining(spec: &SynthVideoSpec) -> String {
    format!("a {} {}", spec.color_name(), spec.shape.word())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    #[default]
    Ppm,
    Png,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::Ppm => "ppm",
            FrameFormat::Png => "png",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub videos: usize,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub frames_per_video: usize,
    pub size: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<ShapeKind>,
    pub motions: Vec<Motion>,
    pub format: FrameFormat,
}

impl Default for DatasetConfig {
    /// The desk dataset: two colors, two shapes and horizontal motion, which
    /// gives exactly eight answers.
    fn default() -> Self {
        Self {
            videos: 200,
            fractions: [0.61, 0.13, 0.26],
            seed: 0,
            frames_per_video: 8,
            size: 32,
            colors: vec!["red".into(), "blue".into()],
            shapes: vec![ShapeKind::Square, ShapeKind::Triangle],
            motions: vec![Motion::Left, Motion::Right],
            format: FrameFormat::Ppm,
        }
    }
}

impl DatasetConfig {
    fn color_indices(&self) -> Result<Vec<usize>> {
        self.colors
            .iter()
            .map(|c| {
                PALETTE
                    .iter()
                    .position(|(n, _)| n == c)
                    .ok_or_else(|| Error::config(format!("unknown color {c:?}")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::config(format!("split fractions {:?} must be non-negative and sum to 1", self.fractions)));
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.motions.is_empty() {
            return Err(Error::config("colors, shapes and motions must be non-empty"));
        }
        self.color_indices()?;
        if self.frames_per_video == 0 {
            return Err(Error::config("frames_per_video must be positive"));
        }
        Ok(())
    }

    /// Video counts per split. Train and validation are rounded, test takes
    /// the remainder.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.videos as f64;
        let train = (n * self.fractions[0]).round() as usize;
        let val = ((n * self.fractions[1]).round() as usize).min(self.videos - train.min(self.videos));
        let train = train.min(self.videos);
        [train, val, self.videos - train - val]
    }

    /// Deterministic, stratified video specs: every combination of color,
    /// shape, motion and "when" side is visited once per cycle, in a shuffled
    /// order.
    pub fn specs(&self) -> Result<Vec<SynthVideoSpec>> {
        self.validate()?;
        let colors = self.color_indices()?;
        let mut combos = Vec::new();
        for &c in &colors {
            for &s in &self.shapes {
                for &m in &self.motions {
                    for when_end in [false, true] {
                        combos.push((c, s, m, when_end));
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.videos);
        let mut cycle = Vec::new();
        for i in 0..self.videos {
            if cycle.is_empty() {
                cycle = combos.clone();
                cycle.shuffle(&mut rng);
            }
            let (color, shape, motion, when_end) = cycle.pop().expect("refilled above");
            let rgb = PALETTE[color].1;
            let backs: Vec<[f32; 3]> = BACKGROUNDS.iter().copied().filter(|b| *b != rgb).collect();
            out.push(SynthVideoSpec {
                shape,
                color,
                motion,
                background: backs[rng.random_range(0..backs.len())],
                frames: self.frames_per_video,
                size: self.size,
                when_end,
                seed: rng.random::<u64>() ^ i as u64,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Frame directory, relative to the manifest's directory.
    pub frames: String,
    pub question: String,
    pub answer: usize,
    pub qtype: QType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub answers: Vec<String>,
    pub records: Vec<Record>,
    pub split: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&raw)?;
        if let Some(r) = m.records.iter().find(|r| r.answer >= m.answers.len()) {
            return Err(Error::config(format!(
                "{}: record for {} has answer {} outside {} answers",
                path.display(),
                r.frames,
                r.answer,
                m.answers.len()
            )));
        }
        Ok(m)
    }

    /// Distinct frame directories, in first-seen order.
    pub fn videos(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .map(|r| r.frames.as_str())
            .filter(|f| seen.insert(*f))
            .collect()
    }
}

/// A caption for one video's frames, used for contrastive pretraining.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub frames: String,
    pub caption: String,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const CAPTIONS_FILE: &str = "captions.json";

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.json"))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub specs: Vec<SynthVideoSpec>,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub captions: Vec<CaptionRecord>,
}

fn video_dir(i: usize) -> String {
    format!("videos/{i:05}")
}

/// Builds the three manifests in memory. The answer vocabulary is every
/// training answer, ordered by first appearance in the template list.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let specs = cfg.specs()?;
    let [n_train, n_val, _] = cfg.split_sizes();
    let qas: Vec<Vec<QaPair>> = specs.iter().map(generate_qa).collect();

    let mut answers: Vec<String> = Vec::new();
    for q in qas[..n_train].iter().flatten() {
        if !answers.contains(&q.answer) {
            answers.push(q.answer.clone());
        }
    }
    let ranges = [0..n_train, n_train..n_train + n_val, n_train + n_val..specs.len()];
    let mut manifests = Vec::with_capacity(3);
    for (split, range) in SPLITS.iter().zip(ranges) {
        let mut records = Vec::new();
        for i in range {
            for q in &qas[i] {
                let answer = answers.iter().position(|a| *a == q.answer).ok_or_else(|| {
                    Error::config(format!(
                        "answer {:?} of {split} video {i} never occurs in training; use more videos",
                        q.answer
                    ))
                })?;
                records.push(Record {
                    frames: video_dir(i),
                    question: q.question.clone(),
                    answer,
                    qtype: q.qtype,
                });
            }
        }
        manifests.push(DatasetManifest {
            answers: answers.clone(),
            records,
            split: split.to_string(),
        });
    }
    let captions = specs[..n_train]
        .iter()
        .enumerate()
        .map(|(i, s)| CaptionRecord {
            frames: video_dir(i),
            caption: caption_for_pretraining(s),
        })
        .collect();
    let test = manifests.pop().expect("three splits");
    let val = manifests.pop().expect("three splits");
    let train = manifests.pop().expect("three splits");
    Ok(Dataset {
        specs,
        train,
        val,
        test,
        captions,
    })
}

/// Generates every video under `out/videos/` and writes `train.json`,
/// `val.json`, `test.json` and the caption list.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Dataset> {
    let ds = plan_dataset(cfg)?;
    ds.specs
        .par_iter()
        .enumerate()
        .try_for_each(|(i, s)| generate_video(s, &out.join(video_dir(i)), cfg.format).map(|_| ()))?;
    for m in [&ds.train, &ds.val, &ds.test] {
        m.save(&manifest_path(out, &m.split))?;
    }
    let path = out.join(CAPTIONS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&ds.captions)?).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

pub fn load_captions(dir: &Path) -> Result<Vec<CaptionRecord>> {
    let path = dir.join(CAPTIONS_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&raw)?)
}
