//! Cross-domain learning: the shared-weight transformer heads, the prompt
//! dot-product interactions, the weighted fusion of the four tokens and
//! answer decoding.

use crate::encoders::SequenceFeatures;
use crate::error::{Error, Result};
use crate::tensor::nn::{Linear, TransformerStack};
use crate::tensor::{Init, ParamBuilder, ParamId, Real, Tape, Var};

/// One transformer body shared by the question-video and question-keyframe
/// branches, with a separate affine head per branch.
#[derive(Clone, Debug)]
pub struct SharedTransformer {
    pub dim: usize,
    pub answers: usize,
    /// Row 0 marks question tokens, row 1 visual tokens.
    pub segment: ParamId,
    /// Learned positions of the visual rows, `max_visual x d`.
    pub visual_pos: ParamId,
    pub body: TransformerStack,
    pub head_qv: Linear,
    pub head_qk: Linear,
    /// Test hook: skip the body and read the class token straight from the
    /// input (after segment embedding).
    pub bypass_body: bool,
}

/// Which branch head to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    QuestionVideo,
    QuestionKeyframe,
}

impl SharedTransformer {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        mlp_hidden: usize,
        answers: usize,
        max_visual: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                dim,
                answers,
                segment: b.add("segment", &[2, dim], Init::Normal(0.02))?,
                visual_pos: b.add("visual_pos", &[max_visual, dim], Init::Normal(0.02))?,
                body: TransformerStack::new(b, "body", layers, dim, heads, mlp_hidden)?,
                head_qv: Linear::new(b, "head_qv", dim, answers)?,
                head_qk: Linear::new(b, "head_qk", dim, answers)?,
                bypass_body: false,
            })
        })
    }

    /// Class token of `T(H_q; H_x)`, before any head.
    pub fn class_token<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        hq: &SequenceFeatures,
        hx: &SequenceFeatures,
    ) -> Result<Var> {
        if hq.width != self.dim || hx.width != self.dim {
            return Err(Error::config(format!(
                "shared transformer has width {}, got question {} and visual {}",
                self.dim, hq.width, hx.width
            )));
        }
        let seg = tape.param(self.segment);
        let seg_q = tape.rows(seg, 0, 1)?;
        let seg_x = tape.rows(seg, 1, 1)?;
        let q = tape.add_row(hq.tokens, seg_q)?;
        let pos = tape.param(self.visual_pos);
        if hx.len > tape.shape(pos)[0] {
            return Err(Error::config(format!(
                "visual sequence of {} tokens exceeds the {} learned positions",
                hx.len,
                tape.shape(pos)[0]
            )));
        }
        let pos = tape.rows(pos, 0, hx.len)?;
        let x = tape.add(hx.tokens, pos)?;
        let x = tape.add_row(x, seg_x)?;
        let joint = tape.concat_rows(&[q, x])?;
        let out = if self.bypass_body {
            joint
        } else {
            let mask: Option<Vec<bool>> = match (&hq.key_mask, &hx.key_mask) {
                (None, None) => None,
                (a, b) => Some(
                    a.clone()
                        .unwrap_or_else(|| vec![true; hq.len])
                        .into_iter()
                        .chain(b.clone().unwrap_or_else(|| vec![true; hx.len]))
                        .collect(),
                ),
            };
            self.body.forward(tape, joint, mask.as_deref())?
        };
        tape.rows(out, 0, 1)
    }

    /// `W * T(H_q; H_x) + b` for the chosen branch, a `1 x a` row.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        branch: Branch,
        hq: &SequenceFeatures,
        hx: &SequenceFeatures,
    ) -> Result<Var> {
        let cls = self.class_token(tape, hq, hx)?;
        match branch {
            Branch::QuestionVideo => self.head_qv.forward(tape, cls),
            Branch::QuestionKeyframe => self.head_qk.forward(tape, cls),
        }
    }

    pub fn encode_qv<T: Real>(&self, tape: &mut Tape<'_, T>, hq: &SequenceFeatures, hv: &SequenceFeatures) -> Result<Var> {
        self.encode(tape, Branch::QuestionVideo, hq, hv)
    }

    pub fn encode_qk<T: Real>(&self, tape: &mut Tape<'_, T>, hq: &SequenceFeatures, hk: &SequenceFeatures) -> Result<Var> {
        self.encode(tape, Branch::QuestionKeyframe, hq, hk)
    }

    /// Parameters of the shared body (segment embeddings included).
    pub fn body_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.segment, self.visual_pos];
        p.extend(self.body.params());
        p
    }
}

/// Linear maps of the prompt, video and keyframe class tokens into the
/// `w`-dimensional space where they are compared.
#[derive(Clone, Debug)]
pub struct Projections {
    pub p_t: Linear,
    pub p_v: Linear,
    pub p_k: Linear,
}

impl Projections {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, width: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                p_t: Linear::with_init(b, "p_t", width, width, Init::FanIn(width), false)?,
                p_v: Linear::with_init(b, "p_v", dim, width, Init::FanIn(dim), false)?,
                p_k: Linear::with_init(b, "p_k", dim, width, Init::FanIn(dim), false)?,
            })
        })
    }

    /// `h_tv`: prompt class slice `C x w` against the video class token.
    pub fn interact_tv<T: Real>(&self, tape: &mut Tape<'_, T>, t_cls: Var, v_cls: Var) -> Result<Var> {
        let t = self.p_t.forward(tape, t_cls)?;
        let v = self.p_v.forward(tape, v_cls)?;
        interact(tape, t, v)
    }

    /// `h_tk`: prompt class slice `C x w` against the keyframe class token.
    pub fn interact_tk<T: Real>(&self, tape: &mut Tape<'_, T>, t_cls: Var, k_cls: Var) -> Result<Var> {
        let t = self.p_t.forward(tape, t_cls)?;
        let k = self.p_k.forward(tape, k_cls)?;
        interact(tape, t, k)
    }
}

/// Row-wise dot products of already projected prompts (`C x w`) with one
/// projected visual token (`1 x w`), returned as a `1 x C` row.
pub fn interact<T: Real>(tape: &mut Tape<'_, T>, prompts: Var, visual: Var) -> Result<Var> {
    let (pw, vw) = (tape.shape(prompts)[1], tape.shape(visual)[1]);
    if pw != vw || tape.shape(visual)[0] != 1 {
        return Err(Error::config(format!(
            "projected widths differ: prompts {:?}, visual {:?}",
            tape.shape(prompts),
            tape.shape(visual)
        )));
    }
    tape.matmul_bt(visual, prompts)
}

/// The four `1 x a` tokens. Absent tokens are dropped from the fusion, which
/// is how the ablation modes remove paths.
#[derive(Clone, Copy, Debug)]
pub struct FusionTokens {
    pub qv: Var,
    pub qk: Option<Var>,
    pub tv: Option<Var>,
    pub tk: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub answers: usize,
    /// `W1..W4`; `a x a`, or `1 x a` when diagonal.
    pub w: [ParamId; 4],
    pub b: ParamId,
    pub diagonal: bool,
}

impl FusionWeights {
    /// Weights start at the identity so the initial logits are the plain sum
    /// of the tokens.
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, answers: usize, diagonal: bool) -> Result<Self> {
        b.scoped(name, |b| {
            let mut w = Vec::with_capacity(4);
            for i in 1..=4 {
                w.push(if diagonal {
                    b.add(&format!("W{i}"), &[1, answers], Init::Ones)?
                } else {
                    b.add(&format!("W{i}"), &[answers, answers], Init::Eye)?
                });
            }
            Ok(Self {
                answers,
                w: [w[0], w[1], w[2], w[3]],
                b: b.add("b", &[answers], Init::Zeros)?,
                diagonal,
            })
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.w.to_vec();
        p.push(self.b);
        p
    }

    fn term<T: Real>(&self, tape: &mut Tape<'_, T>, i: usize, h: Var) -> Result<Var> {
        let w = tape.param(self.w[i]);
        if self.diagonal {
            tape.mul(h, w)
        } else {
            tape.matmul_bt(h, w)
        }
    }

    /// `H = W1 h_qv + W2 h_qk + W3 h_tv + W4 h_tk + b`, a `1 x a` row.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<'_, T>, tokens: &FusionTokens) -> Result<Var> {
        let slots = [Some(tokens.qv), tokens.qk, tokens.tv, tokens.tk];
        let mut acc: Option<Var> = None;
        for (i, h) in slots.iter().enumerate() {
            let Some(h) = *h else { continue };
            if tape.shape(h) != [1, self.answers] {
                return Err(Error::Shape {
                    op: "fuse",
                    lhs: tape.shape(h).to_vec(),
                    rhs: vec![1, self.answers],
                });
            }
            let t = self.term(tape, i, h)?;
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        let b = tape.param(self.b);
        tape.add_row(acc.expect("h_qv is always present"), b)
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn decode_answer<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy of `1 x C` logits against the answer index.
pub fn qa_loss<T: Real>(tape: &mut Tape<'_, T>, logits: Var, target: usize) -> Result<Var> {
    tape.cross_entropy(logits, &[target])
}
