//! Layers assembled from tape primitives.

use super::{Init, ParamBuilder, ParamId, Real, Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(b, name, in_dim, out_dim, Init::FanIn(in_dim), true)
    }

    pub fn with_init<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.add("weight", &[in_dim, out_dim], init)?;
            let bias = if bias {
                Some(b.add("bias", &[out_dim], Init::Zeros)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let bv = tape.param(b);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gamma: b.add("gamma", &[dim], Init::Ones)?,
                beta: b.add("beta", &[dim], Init::Zeros)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, T::lit(LN_EPS))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Scaled dot-product attention for already-projected `q, k, v` (`L x d`),
/// split into `heads` column groups. Returns the concatenated head outputs
/// before the output projection.
pub fn attend<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (lq, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    let lk = tape.shape(k)[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let hd = d / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 0, lq, h * hd, hd)?;
        let kh = tape.slice(k, 0, lk, h * hd, hd)?;
        let vh = tape.slice(v, 0, lk, h * hd, hd)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, key_mask)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Multi-head attention with learned Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        b.scoped(name, |b| {
            Ok(Self {
                query: Linear::new(b, "query", dim, dim)?,
                key: Linear::new(b, "key", dim, dim)?,
                value: Linear::new(b, "value", dim, dim)?,
                out: Linear::new(b, "out", dim, dim)?,
                heads,
            })
        })
    }

    /// Self-attention over the rows of `x`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let mixed = attend(tape, q, k, v, self.heads, key_mask)?;
        self.out.forward(tape, mixed)
    }

    /// Self-attention restricted to consecutive blocks of `block_len` rows;
    /// rows in different blocks never see each other. Projections are shared.
    pub fn forward_blocks<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, block_len: usize) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if block_len == 0 || rows % block_len != 0 {
            return Err(Error::config(format!(
                "{rows} rows do not split into blocks of {block_len}"
            )));
        }
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let mut blocks = Vec::with_capacity(rows / block_len);
        for start in (0..rows).step_by(block_len) {
            let qb = tape.rows(q, start, block_len)?;
            let kb = tape.rows(k, start, block_len)?;
            let vb = tape.rows(v, start, block_len)?;
            blocks.push(attend(tape, qb, kb, vb, self.heads, None)?);
        }
        let mixed = if blocks.len() == 1 {
            blocks[0]
        } else {
            tape.concat_rows(&blocks)?
        };
        self.out.forward(tape, mixed)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.out]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                fc1: Linear::new(b, "fc1", dim, hidden)?,
                fc2: Linear::new(b, "fc2", hidden, dim)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                ln_attn: LayerNorm::new(b, "ln_attn", dim)?,
                attn: MultiHeadAttention::new(b, "attn", dim, heads)?,
                ln_mlp: LayerNorm::new(b, "ln_mlp", dim)?,
                mlp: Mlp::new(b, "mlp", dim, mlp_hidden)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln_attn.forward(tape, x)?;
        let h = self.attn.forward(tape, h, key_mask)?;
        let x = tape.add(x, h)?;
        self.mlp_residual(tape, x)
    }

    pub fn mlp_residual<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln_mlp.forward(tape, x)?;
        let h = self.mlp.forward(tape, h)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln_attn.params();
        p.extend(self.attn.params());
        p.extend(self.ln_mlp.params());
        p.extend(self.mlp.params());
        p
    }
}

/// Stack of [`TransformerBlock`]s followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
}

impl TransformerStack {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let blocks = (0..layers)
                .map(|i| TransformerBlock::new(b, &format!("layer{i}"), dim, heads, mlp_hidden))
                .collect::<Result<_>>()?;
            Ok(Self {
                blocks,
                ln_final: LayerNorm::new(b, "ln_final", dim)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, mut x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, x, key_mask)?;
        }
        self.ln_final.forward(tape, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.ln_final.params());
        p
    }
}
