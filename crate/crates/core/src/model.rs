//! The full CCVQA model: target-domain encoders, the CLIP branch, and the
//! cross-domain fusion head, wired according to the ablation mode.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{build_prompts, ClipConfig, ClipModel, PromptFeatures};
use crate::encoders::text::TextEncoderConfig;
use crate::encoders::video::VideoEncoderConfig;
use crate::encoders::{tokenize, QuestionEncoder, SequenceFeatures, TimeSformer, VideoClip, Vocabulary};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::fusion::{FusionTokens, FusionWeights, Projections, SharedTransformer};
use crate::tensor::{ParamBuilder, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width `d` of the video, question, keyframe and fusion transformers.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// `T`, frames sampled per video.
    pub frames: usize,
    pub image_size: usize,
    pub patch: usize,
    /// `N_q`, question words after `[CLS]`.
    pub question_len: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    /// `w`, the prompt and joint-space width.
    pub clip_width: usize,
    pub clip_heads: usize,
    pub clip_layers: usize,
    /// `N_t`, prompt length including `[CLS]`.
    pub prompt_len: usize,
    pub keyframes: usize,
    pub diagonal_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            mlp_ratio: 4,
            frames: 4,
            image_size: 32,
            patch: 8,
            question_len: 12,
            video_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            clip_width: 16,
            clip_heads: 4,
            clip_layers: 2,
            prompt_len: 16,
            keyframes: 1,
            diagonal_fusion: false,
        }
    }
}

impl ModelConfig {
    /// Full-size geometry: 16 frames at 224x224, a 12-layer video encoder, a
    /// 6-layer question encoder and shared transformer, and a 512-wide CLIP
    /// joint space.
    pub fn full_size() -> Self {
        Self {
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            frames: 16,
            image_size: 224,
            patch: 16,
            question_len: 32,
            video_layers: 12,
            text_layers: 6,
            fusion_layers: 6,
            clip_width: 512,
            clip_heads: 8,
            clip_layers: 12,
            prompt_len: 48,
            keyframes: 1,
            diagonal_fusion: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("frames", self.frames),
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("clip_width", self.clip_width),
            ("clip_heads", self.clip_heads),
            ("keyframes", self.keyframes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.clip_width % self.clip_heads != 0 {
            return Err(Error::config(format!(
                "clip_width {} is not divisible by {} heads",
                self.clip_width, self.clip_heads
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(format!(
                "image_size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.prompt_len < 2 {
            return Err(Error::config("prompt_len must leave room for [CLS] and one word"));
        }
        Ok(())
    }
}

/// Which fusion paths are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// All four tokens.
    #[default]
    Full,
    /// Only the question-video token; the CLIP branch is never evaluated.
    NoClip,
    /// Within-domain pairs only: question-video and prompt-keyframe.
    NoCrossdomain,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoClip, Mode::NoCrossdomain];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoClip => "no_clip",
            Mode::NoCrossdomain => "no_crossdomain",
        }
    }

    pub fn uses_clip(self) -> bool {
        self != Mode::NoClip
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}; expected full, no_clip or no_crossdomain")))
    }
}

/// One question about one video, with frames already sampled and resized.
#[derive(Clone, Debug)]
pub struct QaSample {
    pub clip: VideoClip,
    pub keyframes: Vec<Frame>,
    pub question: String,
}

/// Prompt class tokens keyed by prompt text. Only valid while the CLIP
/// branch is frozen.
#[derive(Debug, Default)]
pub struct PromptCache<T> {
    rows: Mutex<HashMap<String, Vec<T>>>,
}

impl<T: Real> PromptCache<T> {
    pub fn new() -> Self {
        Self {
            rows: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.rows.lock().expect("cache lock").clear();
    }
}

/// Every intermediate the fusion head consumes.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `H`, `1 x C` answer logits.
    pub logits: Var,
    pub tokens: FusionTokens,
    pub question: SequenceFeatures,
    pub video: SequenceFeatures,
    pub keyframe: Option<SequenceFeatures>,
    /// Full prompt encodings; absent when class tokens came from the cache.
    pub prompts: Option<PromptFeatures>,
    /// `C x w` prompt class tokens.
    pub prompt_cls: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Ccvqa {
    pub cfg: ModelConfig,
    pub answers: Vec<String>,
    pub question_vocab: Vocabulary,
    pub clip_vocab: Vocabulary,
    pub video: TimeSformer,
    pub question: QuestionEncoder,
    pub clip: ClipModel,
    pub shared: SharedTransformer,
    pub proj: Projections,
    pub fusion: FusionWeights,
}

impl Ccvqa {
    /// Builds the model and a freshly initialized parameter store.
    pub fn build<T: Real>(
        cfg: ModelConfig,
        answers: Vec<String>,
        question_vocab: Vocabulary,
        clip_vocab: Vocabulary,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        if answers.len() < 2 {
            return Err(Error::config("an answer space needs at least two candidates"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &mut ParamBuilder::new(&mut store, &mut rng);
        let d = cfg.dim;
        let c = answers.len();
        let video = TimeSformer::new(
            b,
            "video",
            VideoEncoderConfig {
                dim: d,
                heads: cfg.heads,
                layers: cfg.video_layers,
                mlp_hidden: cfg.mlp_ratio * d,
                frames: cfg.frames,
                image_size: cfg.image_size,
                patch: cfg.patch,
            },
        )?;
        let question = QuestionEncoder::new(
            b,
            "question",
            TextEncoderConfig {
                vocab_size: question_vocab.len(),
                dim: d,
                heads: cfg.heads,
                layers: cfg.text_layers,
                mlp_hidden: cfg.mlp_ratio * d,
                max_len: 1 + cfg.question_len,
            },
        )?;
        let clip = ClipModel::new(
            b,
            ClipConfig {
                image_width: d,
                image_heads: cfg.heads,
                image_layers: cfg.clip_layers,
                width: cfg.clip_width,
                text_heads: cfg.clip_heads,
                text_layers: cfg.clip_layers,
                mlp_ratio: cfg.mlp_ratio,
                image_size: cfg.image_size,
                patch: cfg.patch,
                prompt_len: cfg.prompt_len,
                vocab_size: clip_vocab.len(),
            },
        )?;
        // video and key frame share one patch grid
        let visual_len = 1 + (cfg.image_size / cfg.patch).pow(2);
        let shared = SharedTransformer::new(b, "shared", d, cfg.heads, cfg.fusion_layers, cfg.mlp_ratio * d, c, visual_len)?;
        let proj = Projections::new(b, "proj", d, cfg.clip_width)?;
        let fusion = FusionWeights::new(b, "fusion", c, cfg.diagonal_fusion)?;
        let model = Self {
            cfg,
            answers,
            question_vocab,
            clip_vocab,
            video,
            question,
            clip,
            shared,
            proj,
            fusion,
        };
        Ok((model, store))
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn question_ids(&self, question: &str) -> Vec<usize> {
        tokenize(question, &self.question_vocab, self.cfg.question_len)
    }

    /// Tokenized prompts, one per answer, in answer order.
    pub fn prompt_ids(&self, question: &str) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(build_prompts(question, &self.answers)?
            .into_iter()
            .map(|p| {
                let ids = self.clip.tokenize_prompt(&p.text, &self.clip_vocab);
                (p.text, ids)
            })
            .collect())
    }

    /// `H_k`, averaged over the key frames when there are several.
    pub fn encode_keyframes<T: Real>(&self, tape: &mut Tape<'_, T>, keyframes: &[Frame]) -> Result<SequenceFeatures> {
        if keyframes.is_empty() {
            return Err(Error::contract("sample has no key frame"));
        }
        let mut seqs = Vec::with_capacity(keyframes.len());
        for f in keyframes {
            seqs.push(self.clip.encode_image(tape, f)?);
        }
        if seqs.len() == 1 {
            return Ok(seqs.pop().expect("one sequence"));
        }
        let vars: Vec<Var> = seqs.iter().map(|s| s.tokens).collect();
        let tokens = tape.mean_of(&vars)?;
        Ok(SequenceFeatures { tokens, ..seqs[0].clone() })
    }

    fn cached_prompt_cls<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        prompts: &[(String, Vec<usize>)],
        cache: &PromptCache<T>,
    ) -> Result<Var> {
        let missing: Vec<&(String, Vec<usize>)> = {
            let rows = cache.rows.lock().expect("cache lock");
            prompts.iter().filter(|(t, _)| !rows.contains_key(t)).collect()
        };
        if !missing.is_empty() {
            let mut side = Tape::new(tape.params());
            let ids: Vec<Vec<usize>> = missing.iter().map(|(_, i)| i.clone()).collect();
            let h = self.clip.encode_prompts(&mut side, &ids)?;
            let cls = side.value(h.cls);
            let mut rows = cache.rows.lock().expect("cache lock");
            for (r, (text, _)) in missing.iter().enumerate() {
                rows.insert(text.clone(), cls.row(r).to_vec());
            }
        }
        let rows = cache.rows.lock().expect("cache lock");
        let w = self.cfg.clip_width;
        let mut data = Vec::with_capacity(prompts.len() * w);
        for (text, _) in prompts {
            data.extend_from_slice(&rows[text]);
        }
        drop(rows);
        Ok(tape.constant(Tensor::new(vec![prompts.len(), w], data)?))
    }

    /// Logits `H` for one sample. Passing a cache reuses prompt class tokens
    /// across questions and treats them as constants.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        sample: &QaSample,
        mode: Mode,
        cache: Option<&PromptCache<T>>,
    ) -> Result<ForwardOutput> {
        let question = self.question.encode(tape, &self.question_ids(&sample.question))?;
        let video = self.video.encode(tape, &sample.clip)?;
        let qv = self.shared.encode_qv(tape, &question, &video)?;
        let mut tokens = FusionTokens {
            qv,
            qk: None,
            tv: None,
            tk: None,
        };
        let mut keyframe = None;
        let mut prompts = None;
        let mut prompt_cls = None;
        if mode.uses_clip() {
            let hk = self.encode_keyframes(tape, &sample.keyframes)?;
            let k_cls = hk.cls(tape)?;
            let pids = self.prompt_ids(&sample.question)?;
            let t_cls = match cache {
                Some(c) => self.cached_prompt_cls(tape, &pids, c)?,
                None => {
                    let ids: Vec<Vec<usize>> = pids.into_iter().map(|(_, i)| i).collect();
                    let h = self.clip.encode_prompts(tape, &ids)?;
                    let cls = h.cls;
                    prompts = Some(h);
                    cls
                }
            };
            tokens.tk = Some(self.proj.interact_tk(tape, t_cls, k_cls)?);
            if mode == Mode::Full {
                let v_cls = video.cls(tape)?;
                tokens.qk = Some(self.shared.encode_qk(tape, &question, &hk)?);
                tokens.tv = Some(self.proj.interact_tv(tape, t_cls, v_cls)?);
            }
            keyframe = Some(hk);
            prompt_cls = Some(t_cls);
        }
        let logits = self.fusion.fuse(tape, &tokens)?;
        Ok(ForwardOutput {
            logits,
            tokens,
            question,
            video,
            keyframe,
            prompts,
            prompt_cls,
        })
    }
}
