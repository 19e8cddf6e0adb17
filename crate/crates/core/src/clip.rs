//! General-domain branch: a small CLIP-style dual encoder.
//!
//! The image tower turns a key frame into `H_k` (at the video width `d`, so it
//! can be paired with questions) and projects `k_cls` into the joint space.
//! The text tower encodes one templated prompt per candidate answer into
//! `H_t` at width `w`. Both towers are trained contrastively on image-caption
//! pairs with a learned temperature.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::text::{tokenize, TextEncoderConfig, Vocabulary};
use crate::encoders::video::{extract_patches, patches_per_frame};
use crate::encoders::{QuestionEncoder, SequenceFeatures};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::harness::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::nn::{LayerNorm, Linear, TransformerStack};
use crate::tensor::{Init, ParamBuilder, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Parameter-name prefix of everything in this branch.
pub const PREFIX: &str = "clip";

const MIN_TEMPERATURE: f64 = 1e-2;
const MAX_TEMPERATURE: f64 = 1e2;

#[derive(Clone, Debug)]
pub struct ClipConfig {
    /// Width of the image tower; equals the video width `d`.
    pub image_width: usize,
    pub image_heads: usize,
    pub image_layers: usize,
    /// Width `w` of the text tower and the joint space.
    pub width: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub patch: usize,
    /// `N_t`, prompt length including `[CLS]`.
    pub prompt_len: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug)]
pub struct ClipImageEncoder {
    pub patches: usize,
    image_size: usize,
    patch: usize,
    width: usize,
    patch_proj: Linear,
    cls: ParamId,
    pos: ParamId,
    ln_pre: LayerNorm,
    stack: TransformerStack,
}

impl ClipImageEncoder {
    fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &ClipConfig) -> Result<Self> {
        let patches = patches_per_frame(cfg.image_size, cfg.patch)?;
        let d = cfg.image_width;
        b.scoped("image", |b| {
            Ok(Self {
                patches,
                image_size: cfg.image_size,
                patch: cfg.patch,
                width: d,
                patch_proj: Linear::with_init(
                    b,
                    "patch_proj",
                    3 * cfg.patch * cfg.patch,
                    d,
                    Init::FanIn(3 * cfg.patch * cfg.patch),
                    false,
                )?,
                cls: b.add("cls", &[1, d], Init::Normal(0.02))?,
                pos: b.add("pos", &[1 + patches, d], Init::Normal(0.02))?,
                ln_pre: LayerNorm::new(b, "ln_pre", d)?,
                stack: TransformerStack::new(b, "encoder", cfg.image_layers, d, cfg.image_heads, cfg.mlp_ratio * d)?,
            })
        })
    }

    /// `H_k = [k_cls, k_1, .., k_{N_k}]`, `(1 + N_k) x d`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, frame: &Frame) -> Result<SequenceFeatures> {
        if frame.width != self.image_size || frame.height != self.image_size {
            return Err(Error::config(format!(
                "key frame is {}x{}, image tower expects {2}x{2}",
                frame.width, frame.height, self.image_size
            )));
        }
        let raw = tape.constant(extract_patches(std::slice::from_ref(frame), self.patch)?);
        let x = self.patch_proj.forward(tape, raw)?;
        let cls = tape.param(self.cls);
        let x = tape.concat_rows(&[cls, x])?;
        let pos = tape.param(self.pos);
        let x = tape.add(x, pos)?;
        let x = self.ln_pre.forward(tape, x)?;
        let tokens = self.stack.forward(tape, x, None)?;
        Ok(SequenceFeatures {
            tokens,
            len: 1 + self.patches,
            width: self.width,
            key_mask: None,
        })
    }
}

/// `H_t`: one encoded prompt per candidate answer.
#[derive(Clone, Debug)]
pub struct PromptFeatures {
    /// Per-prompt `N_t x w` sequences, ordered by answer index.
    pub tokens: Vec<Var>,
    /// The `C x w` class-token slice.
    pub cls: Var,
    pub seq_len: usize,
    pub width: usize,
}

impl PromptFeatures {
    pub fn count(&self) -> usize {
        self.tokens.len()
    }

    /// The full `C x N_t x w` tensor.
    pub fn to_tensor<T: Real>(&self, tape: &Tape<'_, T>) -> Tensor<T> {
        let data: Vec<T> = self
            .tokens
            .iter()
            .flat_map(|&v| tape.value(v).data().iter().copied())
            .collect();
        Tensor::new(vec![self.count(), self.seq_len, self.width], data).expect("consistent prompt shapes")
    }
}

/// Unit-norm image and text vectors of one pair, with the temperature that
/// scales their similarity.
#[derive(Clone, Debug)]
pub struct JointEmbedding<T> {
    pub image: Tensor<T>,
    pub text: Tensor<T>,
    pub temperature: T,
}

#[derive(Clone, Debug)]
pub struct ClipModel {
    pub cfg: ClipConfig,
    pub image: ClipImageEncoder,
    pub text: QuestionEncoder,
    pub image_proj: Linear,
    pub text_proj: Linear,
    pub logit_scale: ParamId,
}

impl ClipModel {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: ClipConfig) -> Result<Self> {
        b.scoped(PREFIX, |b| {
            let text = QuestionEncoder::new(
                b,
                "text",
                TextEncoderConfig {
                    vocab_size: cfg.vocab_size,
                    dim: cfg.width,
                    heads: cfg.text_heads,
                    layers: cfg.text_layers,
                    mlp_hidden: cfg.mlp_ratio * cfg.width,
                    max_len: cfg.prompt_len,
                },
            )?;
            Ok(Self {
                image: ClipImageEncoder::new(b, &cfg)?,
                text,
                image_proj: Linear::with_init(b, "image_proj", cfg.image_width, cfg.width, Init::FanIn(cfg.image_width), false)?,
                text_proj: Linear::with_init(b, "text_proj", cfg.width, cfg.width, Init::FanIn(cfg.width), false)?,
                logit_scale: b.add("logit_scale", &[1], Init::Zeros)?,
                cfg,
            })
        })
    }

    pub fn encode_image<T: Real>(&self, tape: &mut Tape<'_, T>, frame: &Frame) -> Result<SequenceFeatures> {
        self.image.encode(tape, frame)
    }

    /// Encodes tokenized prompts (each `N_t` ids) into `H_t`.
    pub fn encode_prompts<T: Real>(&self, tape: &mut Tape<'_, T>, prompts: &[Vec<usize>]) -> Result<PromptFeatures> {
        if prompts.is_empty() {
            return Err(Error::contract("no prompts to encode"));
        }
        let mut tokens = Vec::with_capacity(prompts.len());
        let mut cls = Vec::with_capacity(prompts.len());
        for ids in prompts {
            if ids.len() != self.cfg.prompt_len {
                return Err(Error::config(format!(
                    "prompt has {} ids, expected {}",
                    ids.len(),
                    self.cfg.prompt_len
                )));
            }
            let seq = self.text.encode(tape, ids)?;
            cls.push(seq.cls(tape)?);
            tokens.push(seq.tokens);
        }
        let cls = if cls.len() == 1 { cls[0] } else { tape.concat_rows(&cls)? };
        Ok(PromptFeatures {
            tokens,
            cls,
            seq_len: self.cfg.prompt_len,
            width: self.cfg.width,
        })
    }

    pub fn tokenize_prompt(&self, text: &str, vocab: &Vocabulary) -> Vec<usize> {
        tokenize(text, vocab, self.cfg.prompt_len - 1)
    }

    /// `exp(clamp(logit_scale))`, a `1`-element temperature.
    pub fn temperature<T: Real>(&self, tape: &mut Tape<'_, T>) -> Var {
        let s = tape.param(self.logit_scale);
        let s = tape.clamp(s, T::lit(MIN_TEMPERATURE.ln()), T::lit(MAX_TEMPERATURE.ln()));
        tape.exp(s)
    }

    /// Unit-norm joint-space rows for a batch of frames.
    pub fn image_embedding<T: Real>(&self, tape: &mut Tape<'_, T>, frames: &[&Frame]) -> Result<Var> {
        let mut rows = Vec::with_capacity(frames.len());
        for f in frames {
            let h = self.encode_image(tape, f)?;
            rows.push(h.cls(tape)?);
        }
        let cls = tape.concat_rows(&rows)?;
        let z = self.image_proj.forward(tape, cls)?;
        tape.l2_normalize_rows(z)
    }

    /// Unit-norm joint-space rows for a batch of tokenized texts.
    pub fn text_embedding<T: Real>(&self, tape: &mut Tape<'_, T>, ids: &[Vec<usize>]) -> Result<Var> {
        let h = self.encode_prompts(tape, ids)?;
        let z = self.text_proj.forward(tape, h.cls)?;
        tape.l2_normalize_rows(z)
    }

    pub fn joint_embedding<T: Real>(
        &self,
        store: &ParamStore<T>,
        frame: &Frame,
        ids: &[usize],
    ) -> Result<JointEmbedding<T>> {
        let mut tape = Tape::new(store);
        let img = self.image_embedding(&mut tape, &[frame])?;
        let txt = self.text_embedding(&mut tape, &[ids.to_vec()])?;
        let t = self.temperature(&mut tape);
        Ok(JointEmbedding {
            image: tape.value(img).clone(),
            text: tape.value(txt).clone(),
            temperature: tape.value(t).data()[0],
        })
    }

    /// Symmetric InfoNCE loss of a batch of `(frame, tokenized caption)` pairs.
    pub fn contrastive_loss<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        frames: &[&Frame],
        captions: &[Vec<usize>],
    ) -> Result<Var> {
        if frames.len() < 2 || frames.len() != captions.len() {
            return Err(Error::config(format!(
                "contrastive batch needs at least 2 matched pairs, got {} frames and {} captions",
                frames.len(),
                captions.len()
            )));
        }
        let img = self.image_embedding(tape, frames)?;
        let txt = self.text_embedding(tape, captions)?;
        let scale = self.temperature(tape);
        let logits = similarity_logits(tape, img, txt, scale)?;
        info_nce(tape, logits)
    }

    /// Every parameter of the branch, for freezing checks.
    pub fn param_ids<T: Real>(store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with(PREFIX) && p.name[PREFIX.len()..].starts_with('.'))
            .map(|(id, _)| id)
            .collect()
    }
}

/// `temperature * image_i . text_j` for unit-norm rows. Non-normalized rows
/// are a contract error in debug builds.
pub fn similarity_matrix<T: Real>(image: &Tensor<T>, text: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let (bi, wi) = image.matrix_dims();
    let (bt, wt) = text.matrix_dims();
    if wi != wt {
        return Err(Error::Shape {
            op: "similarity_matrix",
            lhs: image.shape().to_vec(),
            rhs: text.shape().to_vec(),
        });
    }
    if cfg!(debug_assertions) {
        for r in (0..bi).map(|r| image.row(r)).chain((0..bt).map(|r| text.row(r))) {
            let norm = r.iter().map(|&x| x * x).sum::<T>().sqrt().as_f64();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::contract(format!("similarity rows must be unit norm, got {norm}")));
            }
        }
    }
    let mut out = Vec::with_capacity(bi * bt);
    for i in 0..bi {
        for j in 0..bt {
            let dot: T = image.row(i).iter().zip(text.row(j)).map(|(&a, &b)| a * b).sum();
            out.push(temperature * dot);
        }
    }
    Tensor::new(vec![bi, bt], out)
}

/// Taped similarity logits `scale * I T^T`.
pub fn similarity_logits<T: Real>(tape: &mut Tape<'_, T>, image: Var, text: Var, scale: Var) -> Result<Var> {
    let sims = tape.matmul_bt(image, text)?;
    tape.scale_by(sims, scale)
}

/// Mean of the image-to-text and text-to-image cross-entropies of a square
/// logit matrix whose diagonal holds the matched pairs.
pub fn info_nce<T: Real>(tape: &mut Tape<'_, T>, logits: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
        return Err(Error::config(format!("InfoNCE needs a square batch of at least 2, got {s:?}")));
    }
    let targets: Vec<usize> = (0..s[0]).collect();
    let i2t = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let t2i = tape.cross_entropy(lt, &targets)?;
    let both = tape.add(i2t, t2i)?;
    Ok(tape.scale(both, T::lit(0.5)))
}

/// One templated sentence per candidate answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub answer_index: usize,
}

pub fn prompt_text(question: &str, answer: &str) -> String {
    format!("question: {question} answer: {answer}.")
}

/// `"question: {q} answer: {a}."` for every answer, in answer-index order.
pub fn build_prompts(question: &str, answers: &[String]) -> Result<Vec<Prompt>> {
    if answers.len() < 2 {
        return Err(Error::config("an answer space needs at least two candidates"));
    }
    Ok(answers
        .iter()
        .enumerate()
        .map(|(answer_index, a)| Prompt {
            text: prompt_text(question, a),
            answer_index,
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 8,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Picks `batch` pairs, preferring pairs whose captions differ so that every
/// off-diagonal entry is a true negative.
fn draw_batch(captions: &[String], batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..captions.len()).collect();
    order.shuffle(rng);
    let mut picked: Vec<usize> = Vec::with_capacity(batch);
    let mut rest = Vec::new();
    for i in order {
        if picked.len() < batch && !picked.iter().any(|&p| captions[p] == captions[i]) {
            picked.push(i);
        } else {
            rest.push(i);
        }
    }
    picked.extend(rest.into_iter().take(batch - picked.len().min(batch)));
    picked
}

/// Contrastive training of the CLIP branch on `(frame, caption)` pairs.
/// Returns the loss of every step.
pub fn contrastive_pretrain<T: Real>(
    clip: &ClipModel,
    store: &mut ParamStore<T>,
    pairs: &[(Frame, String)],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if cfg.batch < 2 {
        return Err(Error::config("contrastive pretraining needs a batch of at least 2"));
    }
    if pairs.len() < cfg.batch {
        return Err(Error::config(format!(
            "{} pairs cannot fill a batch of {}",
            pairs.len(),
            cfg.batch
        )));
    }
    let frames: Vec<Frame> = pairs.iter().map(|(f, _)| f.resized(clip.cfg.image_size)).collect();
    let captions: Vec<String> = pairs.iter().map(|(_, c)| c.clone()).collect();
    let ids: Vec<Vec<usize>> = captions.iter().map(|c| clip.tokenize_prompt(c, vocab)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamWState::new(store.len());
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = draw_batch(&captions, cfg.batch, &mut rng);
        let bf: Vec<&Frame> = batch.iter().map(|&i| &frames[i]).collect();
        let bc: Vec<Vec<usize>> = batch.iter().map(|&i| ids[i].clone()).collect();
        let grads = {
            let mut tape = Tape::new(store);
            let loss = clip.contrastive_loss(&mut tape, &bf, &bc)?;
            losses.push(tape.value(loss).data()[0].as_f64());
            tape.backward(loss)?
        };
        adamw_step(store, &grads, &mut state, cfg.lr, &opt);
    }
    Ok(losses)
}
