//! Parameterized building blocks recorded on a [`Tape`].
//!
//! Each layer only stores parameter names; values live in a [`ParamSet`]
//! so that the same layer description works for training, inference and
//! finite-difference probing.

use rand::Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        ps.init_uniform(&w, &[d_in, d_out], d_in, d_out, rng)?;
        let b = if bias {
            let b = format!("{name}.b");
            ps.init_const(&b, &[d_out], 0.0)?;
            Some(b)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = t.param(ps, &self.w)?;
        let y = t.linear(x, w)?;
        match &self.b {
            Some(b) => {
                let b = t.param(ps, b)?;
                t.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two linear maps with a sigmoid-weighted gate: `W_out (u ∘ σ(g))`, `[u; g] = W_in x`.
#[derive(Debug, Clone)]
pub struct GatedMlp {
    pub input: Linear,
    pub output: Linear,
    pub hidden: usize,
}

impl GatedMlp {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GatedMlp {
            input: Linear::init(ps, &format!("{name}.in"), d_in, 2 * hidden, true, rng)?,
            output: Linear::init(ps, &format!("{name}.out"), hidden, d_out, true, rng)?,
            hidden,
        })
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let h = self.input.forward(t, ps, x)?;
        let axis = t.shape(h).len() - 1;
        let up = t.narrow(h, axis, 0, self.hidden)?;
        let gate = t.narrow(h, axis, self.hidden, self.hidden)?;
        let s = t.sigmoid(gate);
        let g = t.mul(up, s)?;
        self.output.forward(t, ps, g)
    }
}

/// Multi-head self-attention over `[batch, seq, d]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        Ok(SelfAttention {
            q: Linear::init(ps, &format!("{name}.q"), width, width, false, rng)?,
            k: Linear::init(ps, &format!("{name}.k"), width, width, false, rng)?,
            v: Linear::init(ps, &format!("{name}.v"), width, width, false, rng)?,
            o: Linear::init(ps, &format!("{name}.o"), width, width, true, rng)?,
            heads,
            width,
        })
    }

    /// Queries come from every token of `x`; keys and values from the first
    /// `key_len` tokens (all tokens when `None`).
    pub fn forward(
        &self,
        t: &mut Tape,
        ps: &ParamSet,
        x: Var,
        key_len: Option<usize>,
    ) -> Result<Var> {
        let seq = t.shape(x)[1];
        let q = self.q.forward(t, ps, x)?;
        let k = self.k.forward(t, ps, x)?;
        let v = self.v.forward(t, ps, x)?;
        let (k, v) = match key_len {
            Some(n) if n < seq => (t.narrow(k, 1, 0, n)?, t.narrow(v, 1, 0, n)?),
            _ => (k, v),
        };
        let dk = self.width / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    t.narrow(q, 2, h * dk, dk)?,
                    t.narrow(k, 2, h * dk, dk)?,
                    t.narrow(v, 2, h * dk, dk)?,
                )
            };
            let scores = t.bmm(qh, kh, true)?;
            let scores = t.scale(scores, scale);
            let probs = t.softmax(scores)?;
            outs.push(t.bmm(probs, vh, false)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat(&outs, 2)?
        };
        self.o.forward(t, ps, merged)
    }
}

/// Pre-norm block: `x + Attn(N₁x)`, then `+ MLP(N₂·)`.
#[derive(Debug, Clone)]
pub struct PreNormBlock {
    pub norm1: String,
    pub attn: SelfAttention,
    pub norm2: String,
    pub mlp: GatedMlp,
}

impl PreNormBlock {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let norm1 = format!("{name}.norm1");
        ps.init_const(&norm1, &[width], 1.0)?;
        let norm2 = format!("{name}.norm2");
        ps.init_const(&norm2, &[width], 1.0)?;
        Ok(PreNormBlock {
            norm1,
            attn: SelfAttention::init(ps, &format!("{name}.attn"), width, heads, rng)?,
            norm2,
            mlp: GatedMlp::init(ps, &format!("{name}.mlp"), width, hidden, width, rng)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let g1 = t.param(ps, &self.norm1)?;
        let n1 = t.rmsnorm(x, Some(g1), NORM_EPS)?;
        let a = self.attn.forward(t, ps, n1, None)?;
        let x = t.add(x, a)?;
        let g2 = t.param(ps, &self.norm2)?;
        let n2 = t.rmsnorm(x, Some(g2), NORM_EPS)?;
        let m = self.mlp.forward(t, ps, n2)?;
        t.add(x, m)
    }
}
