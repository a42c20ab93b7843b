//! Two-level fusion of the shallowest and deepest fused stages through
//! class-token cross-attention.
//!
//! Each level gets a class token (mean of its layer-normalized tokens), a
//! learned position embedding and its own self-attention encoders. The
//! class tokens are then swapped: each one, projected to the other level's
//! width, queries that level's tokens alone, so the score matrix is a
//! single row and the cost is linear in token count.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::body::TokenGrid;
use crate::error::{Error, Result};
use crate::nn::{attention, Builder, LayerNorm, Linear, Mlp};
use crate::params::ParamId;
use crate::tensor::Real;

/// How the fused class token re-enters its level's token map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Inject {
    /// Broadcast-add to every token.
    #[default]
    Add,
    /// Concatenate to every token and project back to the level width.
    ConcatProject,
}

impl fmt::Display for Inject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inject::Add => "add",
            Inject::ConcatProject => "concat-project",
        })
    }
}

impl FromStr for Inject {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "add" => Ok(Inject::Add),
            "concat-project" => Ok(Inject::ConcatProject),
            other => Err(Error::config(format!("unknown inject mode `{other}` (expected add or concat-project)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DlfConfig {
    /// Encoder depth of the small (shallow, fine) level.
    pub depth_s: usize,
    /// Encoder depth of the large (deep, coarse) level.
    pub depth_l: usize,
    pub heads_s: usize,
    pub heads_l: usize,
    pub mlp_ratio: usize,
    pub inject: Inject,
}

impl Default for DlfConfig {
    fn default() -> Self {
        DlfConfig {
            depth_s: 1,
            depth_l: 1,
            heads_s: 1,
            heads_l: 8,
            mlp_ratio: 4,
            inject: Inject::Add,
        }
    }
}

/// Pre-norm multi-head self-attention encoder over a `[n, D]` sequence.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(&mut b.scope("norm1"), dim)?,
            qkv: Linear::new(&mut b.scope("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&mut b.scope("proj"), dim, dim, true)?,
            norm2: LayerNorm::new(&mut b.scope("norm2"), dim)?,
            mlp: Mlp::new(&mut b.scope("mlp"), dim, mlp_ratio)?,
            heads,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let [n, d] = *tape.shape(x) else {
            return Err(Error::dim("encoder_block", format!("expected [n,D], got {:?}", tape.shape(x))));
        };
        let h = self.norm1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let qkv = tape.reshape(qkv, &[1, n, 3 * d])?;
        let q = tape.slice(qkv, 2, 0, d)?;
        let k = tape.slice(qkv, 2, d, d)?;
        let v = tape.slice(qkv, 2, 2 * d, d)?;
        let a = attention(tape, q, k, v, self.heads, None, None)?;
        let a = tape.reshape(a.out, &[n, d])?;
        let a = self.proj.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.mlp.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// `GAP(Norm(P))` as a `[1, D]` row.
pub fn make_class_token<T: Real>(tape: &mut Tape<'_, T>, norm: &LayerNorm, tokens: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let Some(&d) = shape.last() else {
        return Err(Error::Contract("class token of a scalar".into()));
    };
    if shape.len() < 2 {
        return Err(Error::Contract(format!("class token needs a token set, got shape {shape:?}")));
    }
    let n = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(tokens, &[n, d])?;
    let normed = norm.forward(tape, flat)?;
    let cls = tape.mean_leading(normed);
    tape.reshape(cls, &[1, d])
}

/// One direction of the class-token exchange: a class token of width
/// `d_own` visits a token set of width `d_other`.
#[derive(Clone, Debug)]
pub struct CrossPath {
    /// `d_own -> d_other`
    pub f: Linear,
    pub norm: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    /// `d_other -> d_own`
    pub g: Linear,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossOutput {
    /// `f(cls) + MCA(LN([f(cls) ∥ P]))`, `[1, d_other]`.
    pub y: Var,
    /// `g(y)`, `[1, d_own]`.
    pub back: Var,
    /// `[heads, 1, n_other + 1]`
    pub probs: Var,
}

impl CrossPath {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, d_own: usize, d_other: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_other.is_multiple_of(heads) {
            return Err(Error::config(format!("dim {d_other} not divisible by {heads} heads")));
        }
        Ok(CrossPath {
            f: Linear::new(&mut b.scope("f"), d_own, d_other, true)?,
            norm: LayerNorm::new(&mut b.scope("norm"), d_other)?,
            wq: Linear::new(&mut b.scope("wq"), d_other, d_other, false)?,
            wk: Linear::new(&mut b.scope("wk"), d_other, d_other, false)?,
            wv: Linear::new(&mut b.scope("wv"), d_other, d_other, false)?,
            wo: Linear::new(&mut b.scope("wo"), d_other, d_other, true)?,
            g: Linear::new(&mut b.scope("g"), d_other, d_own, true)?,
            heads,
        })
    }

    /// `cls: [1, d_own]`, `other: [n, d_other]`.
    pub fn attend<T: Real>(&self, tape: &mut Tape<'_, T>, cls: Var, other: Var) -> Result<CrossOutput> {
        let cs = tape.shape(cls).to_vec();
        if cs != [1, self.f.in_dim] {
            return Err(Error::config(format!("class token {cs:?} does not match projection width {}", self.f.in_dim)));
        }
        let [n, d] = *tape.shape(other) else {
            return Err(Error::dim("cross_attend", format!("expected [n,D] tokens, got {:?}", tape.shape(other))));
        };
        if d != self.f.out_dim {
            return Err(Error::config(format!("token width {d} does not match projection width {}", self.f.out_dim)));
        }
        let fc = self.f.forward(tape, cls)?;
        let seq = tape.concat(&[fc, other], 0)?;
        let seq = self.norm.forward(tape, seq)?;
        let query = tape.slice(seq, 0, 0, 1)?;
        let q = self.wq.forward(tape, query)?;
        let k = self.wk.forward(tape, seq)?;
        let v = self.wv.forward(tape, seq)?;
        let q = tape.reshape(q, &[1, 1, d])?;
        let k = tape.reshape(k, &[1, n + 1, d])?;
        let v = tape.reshape(v, &[1, n + 1, d])?;
        let a = attention(tape, q, k, v, self.heads, None, None)?;
        let out = tape.reshape(a.out, &[1, d])?;
        let out = self.wo.forward(tape, out)?;
        let y = tape.add(fc, out)?;
        let back = self.g.forward(tape, y)?;
        Ok(CrossOutput { y, back, probs: a.probs })
    }
}

/// Per-level state: class-token norm, position embedding, encoders and the
/// cross path its class token takes.
#[derive(Clone, Debug)]
pub struct Level {
    pub norm: LayerNorm,
    /// `[n + 1, D]`, row 0 for the class token.
    pub pos: ParamId,
    pub encoders: Vec<EncoderBlock>,
    pub cross: CrossPath,
    pub project: Option<Linear>,
}

impl Level {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        b: &mut Builder<'_, T>,
        n: usize,
        d: usize,
        d_other: usize,
        depth: usize,
        heads: usize,
        heads_other: usize,
        cfg: &DlfConfig,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("each level needs at least one encoder"));
        }
        Ok(Level {
            norm: LayerNorm::new(&mut b.scope("cls_norm"), d)?,
            pos: b.zeros("pos", &[n + 1, d])?,
            encoders: (0..depth)
                .map(|i| EncoderBlock::new(&mut b.scope(format!("encoder{i}")), d, heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            cross: CrossPath::new(&mut b.scope("cross"), d, d_other, heads_other)?,
            project: match cfg.inject {
                Inject::Add => None,
                Inject::ConcatProject => Some(Linear::new(&mut b.scope("inject"), 2 * d, d, true)?),
            },
        })
    }

    /// Class token, position embedding and encoders; returns `[n + 1, D]`.
    fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, grid: TokenGrid) -> Result<Var> {
        let cls = make_class_token(tape, &self.norm, grid.tokens)?;
        let flat = tape.reshape(grid.tokens, &[grid.len(), grid.dim])?;
        let seq = tape.concat(&[cls, flat], 0)?;
        let pos = tape.param(self.pos);
        let mut seq = tape.add(seq, pos)?;
        for enc in &self.encoders {
            seq = enc.forward(tape, seq)?;
        }
        Ok(seq)
    }

    fn inject<T: Real>(&self, tape: &mut Tape<'_, T>, tokens: Var, back: Var, grid: TokenGrid) -> Result<Var> {
        let d = grid.dim;
        let z = match &self.project {
            None => {
                let row = tape.reshape(back, &[d])?;
                tape.add_broadcast(tokens, row)?
            }
            Some(proj) => {
                let n = grid.len();
                let rep = tape.gather(back, (0..n).flat_map(|_| 0..d).collect(), &[n, d])?;
                let both = tape.concat(&[tokens, rep], 1)?;
                proj.forward(tape, both)?
            }
        };
        tape.reshape(z, &[grid.h, grid.w, d])
    }
}

#[derive(Clone, Debug)]
pub struct Dlf {
    pub small: Level,
    pub large: Level,
}

#[derive(Clone, Copy, Debug)]
pub struct DlfOutput {
    pub z_s: TokenGrid,
    pub z_l: TokenGrid,
    /// Post-encoder tokens (class token removed), `[n, D]`.
    pub encoded_s: Var,
    pub encoded_l: Var,
    pub cross_s: CrossOutput,
    pub cross_l: CrossOutput,
}

impl Dlf {
    /// `small` and `large` are `(h, w, dim)` of the two fused levels.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, small: (usize, usize, usize), large: (usize, usize, usize), cfg: &DlfConfig) -> Result<Self> {
        let (ns, ds) = (small.0 * small.1, small.2);
        let (nl, dl) = (large.0 * large.1, large.2);
        Ok(Dlf {
            small: Level::new(&mut b.scope("small"), ns, ds, dl, cfg.depth_s, cfg.heads_s, cfg.heads_l, cfg)?,
            large: Level::new(&mut b.scope("large"), nl, dl, ds, cfg.depth_l, cfg.heads_l, cfg.heads_s, cfg)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, p_s: TokenGrid, p_l: TokenGrid) -> Result<DlfOutput> {
        let seq_s = self.small.encode(tape, p_s)?;
        let seq_l = self.large.encode(tape, p_l)?;
        let cls_s = tape.slice(seq_s, 0, 0, 1)?;
        let cls_l = tape.slice(seq_l, 0, 0, 1)?;
        let encoded_s = tape.slice(seq_s, 0, 1, p_s.len())?;
        let encoded_l = tape.slice(seq_l, 0, 1, p_l.len())?;
        let cross_s = self.small.cross.attend(tape, cls_s, encoded_l)?;
        let cross_l = self.large.cross.attend(tape, cls_l, encoded_s)?;
        let zs = self.small.inject(tape, encoded_s, cross_s.back, p_s)?;
        let zl = self.large.inject(tape, encoded_l, cross_l.back, p_l)?;
        Ok(DlfOutput {
            z_s: TokenGrid { tokens: zs, ..p_s },
            z_l: TokenGrid { tokens: zl, ..p_l },
            encoded_s,
            encoded_l,
            cross_s,
            cross_l,
        })
    }
}
