//! Video encoder with divided space-time attention.
//!
//! Each layer runs temporal attention (one token per frame at the same patch
//! position), then spatial attention (the patches of one frame plus the class
//! token), then an MLP. All three are pre-norm residual blocks. After the last
//! layer the patch tokens are averaged over time and the class token is
//! prepended.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SequenceFeatures;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::tensor::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{Init, ParamBuilder, ParamId, Real, Tape, Tensor, Var};

/// `T` frames of equal square size, in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("a clip needs at least one frame"))?;
        if first.width != first.height {
            return Err(Error::config(format!(
                "clip frames must be square, got {}x{}",
                first.width, first.height
            )));
        }
        if frames.iter().any(|f| (f.width, f.height) != (first.width, first.height)) {
            return Err(Error::config("clip frames differ in size"));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> usize {
        self.frames[0].width
    }
}

/// Draws `t` frames (without replacement when the video is long enough),
/// keeps them in temporal order and resizes them to `size x size`.
pub fn sample_frames(video: &[Frame], t: usize, size: usize, seed: u64) -> Result<VideoClip> {
    if video.is_empty() {
        return Err(Error::contract("cannot sample from an empty video"));
    }
    if t == 0 {
        return Err(Error::config("frame count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = if video.len() >= t {
        sample(&mut rng, video.len(), t).into_vec()
    } else {
        (0..t).map(|_| rng.random_range(0..video.len())).collect()
    };
    let mut order: Vec<usize> = (0..video.len()).collect();
    order.sort_by_key(|&i| video[i].index);
    picks.iter_mut().for_each(|p| *p = order[*p]);
    picks.sort_by_key(|&i| video[i].index);
    VideoClip::new(picks.iter().map(|&i| video[i].resized(size)).collect())
}

/// Flattens every `patch x patch` tile of every frame into a row of length
/// `3 * patch^2` (row-major pixels, RGB interleaved). Output rows are ordered
/// frame-major: `[frame 0 patches.., frame 1 patches.., ..]`.
pub fn extract_patches<T: Real>(frames: &[Frame], patch: usize) -> Result<Tensor<T>> {
    let size = frames.first().map(|f| f.width).unwrap_or(0);
    if patch == 0 || size == 0 || size % patch != 0 {
        return Err(Error::config(format!(
            "frame size {size} is not divisible by patch size {patch}"
        )));
    }
    let per_side = size / patch;
    let width = 3 * patch * patch;
    let mut data = Vec::with_capacity(frames.len() * per_side * per_side * width);
    for f in frames {
        if f.width != size || f.height != size {
            return Err(Error::config("frames must share one square size"));
        }
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..patch {
                    let row = (py * patch + y) * size + px * patch;
                    data.extend(f.rgb[row * 3..(row + patch) * 3].iter().map(|&v| T::lit(2.0 * v as f64 - 1.0)));
                }
            }
        }
    }
    Tensor::new(vec![frames.len() * per_side * per_side, width], data)
}

pub fn patches_per_frame(image_size: usize, patch: usize) -> Result<usize> {
    if patch == 0 || image_size % patch != 0 {
        return Err(Error::config(format!(
            "image size {image_size} is not divisible by patch size {patch}"
        )));
    }
    Ok((image_size / patch).pow(2))
}

#[derive(Clone, Debug)]
pub struct VideoEncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub frames: usize,
    pub image_size: usize,
    pub patch: usize,
}

#[derive(Clone, Debug)]
struct DividedBlock {
    ln_time: LayerNorm,
    attn_time: MultiHeadAttention,
    ln_space: LayerNorm,
    attn_space: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TimeSformer {
    pub cfg: VideoEncoderConfig,
    pub patches: usize,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub spatial_pos: ParamId,
    pub temporal_pos: ParamId,
    blocks: Vec<DividedBlock>,
    ln_final: LayerNorm,
}

impl TimeSformer {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: VideoEncoderConfig) -> Result<Self> {
        let patches = patches_per_frame(cfg.image_size, cfg.patch)?;
        let d = cfg.dim;
        b.scoped(name, |b| {
            let patch_in = 3 * cfg.patch * cfg.patch;
            let blocks = (0..cfg.layers)
                .map(|i| {
                    b.scoped(&format!("layer{i}"), |b| {
                        Ok(DividedBlock {
                            ln_time: LayerNorm::new(b, "ln_time", d)?,
                            attn_time: MultiHeadAttention::new(b, "attn_time", d, cfg.heads)?,
                            ln_space: LayerNorm::new(b, "ln_space", d)?,
                            attn_space: MultiHeadAttention::new(b, "attn_space", d, cfg.heads)?,
                            ln_mlp: LayerNorm::new(b, "ln_mlp", d)?,
                            mlp: Mlp::new(b, "mlp", d, cfg.mlp_hidden)?,
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Self {
                patches,
                patch_proj: Linear::new(b, "patch_proj", patch_in, d)?,
                cls: b.add("cls", &[1, d], Init::Normal(0.02))?,
                spatial_pos: b.add("spatial_pos", &[patches, d], Init::Normal(0.02))?,
                temporal_pos: b.add("temporal_pos", &[cfg.frames, d], Init::Normal(0.02))?,
                blocks,
                ln_final: LayerNorm::new(b, "ln_final", d)?,
                cfg,
            })
        })
    }

    /// Linear patch embedding plus learned spatial and temporal positions.
    /// Returns `(T * N_v) x d`, frame-major.
    pub fn embed_patches<T: Real>(&self, tape: &mut Tape<'_, T>, clip: &VideoClip) -> Result<Var> {
        let t = clip.len();
        if t > self.cfg.frames {
            return Err(Error::config(format!(
                "clip has {t} frames but the encoder was built for {}",
                self.cfg.frames
            )));
        }
        if clip.size() != self.cfg.image_size {
            return Err(Error::config(format!(
                "clip frames are {0}x{0}, encoder expects {1}x{1}",
                clip.size(),
                self.cfg.image_size
            )));
        }
        let n = self.patches;
        let raw = tape.constant(extract_patches(&clip.frames, self.cfg.patch)?);
        let x = self.patch_proj.forward(tape, raw)?;
        let sp = tape.param(self.spatial_pos);
        let tp = tape.param(self.temporal_pos);
        let sp_idx: Vec<usize> = (0..t * n).map(|i| i % n).collect();
        let tp_idx: Vec<usize> = (0..t * n).map(|i| i / n).collect();
        let sp = tape.gather_rows(sp, &sp_idx)?;
        let tp = tape.gather_rows(tp, &tp_idx)?;
        let x = tape.add(x, sp)?;
        tape.add(x, tp)
    }

    /// Encodes a clip into `H_v = [v_cls, v_1, .., v_N]`, `(1 + N_v) x d`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, clip: &VideoClip) -> Result<SequenceFeatures> {
        let t = clip.len();
        let n = self.patches;
        let mut x = self.embed_patches(tape, clip)?;
        let mut cls = tape.param(self.cls);

        // frame-major row f*n + p  <->  patch-major row p*t + f
        let to_patch_major: Vec<usize> = (0..n * t).map(|i| (i % t) * n + i / t).collect();
        let to_frame_major: Vec<usize> = (0..n * t).map(|i| (i % n) * t + i / n).collect();

        for block in &self.blocks {
            let h = block.ln_time.forward(tape, x)?;
            let h = tape.gather_rows(h, &to_patch_major)?;
            let h = block.attn_time.forward_blocks(tape, h, t)?;
            let h = tape.gather_rows(h, &to_frame_major)?;
            x = tape.add(x, h)?;

            let mut cls_per_frame = Vec::with_capacity(t);
            let mut patches = Vec::with_capacity(t);
            for f in 0..t {
                let frame_tokens = tape.rows(x, f * n, n)?;
                let seq = tape.concat_rows(&[cls, frame_tokens])?;
                let h = block.ln_space.forward(tape, seq)?;
                let h = block.attn_space.forward(tape, h, None)?;
                let seq = tape.add(seq, h)?;
                cls_per_frame.push(tape.rows(seq, 0, 1)?);
                patches.push(tape.rows(seq, 1, n)?);
            }
            cls = tape.mean_of(&cls_per_frame)?;
            x = if t == 1 { patches[0] } else { tape.concat_rows(&patches)? };

            let full = tape.concat_rows(&[cls, x])?;
            let h = block.ln_mlp.forward(tape, full)?;
            let h = block.mlp.forward(tape, h)?;
            let full = tape.add(full, h)?;
            cls = tape.rows(full, 0, 1)?;
            x = tape.rows(full, 1, t * n)?;
        }

        let per_frame: Vec<Var> = (0..t).map(|f| tape.rows(x, f * n, n)).collect::<Result<_>>()?;
        let fused = tape.mean_of(&per_frame)?;
        let seq = tape.concat_rows(&[cls, fused])?;
        let tokens = self.ln_final.forward(tape, seq)?;
        Ok(SequenceFeatures {
            tokens,
            len: 1 + n,
            width: self.cfg.dim,
            key_mask: None,
        })
    }
}
