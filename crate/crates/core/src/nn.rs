//! Parameterized layers shared by the encoders, fusion modules and decoder.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{fan_in_uniform, SeededRng};
use crate::tensor::{Real, Tensor};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut SeededRng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl AsRef<str>) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.register(full, tensor)
    }

    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = fan_in_uniform(self.rng, shape, fan_in);
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::full(shape, T::one()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Ok(Linear {
            weight: b.fan_in("weight", &[in_dim, out_dim], in_dim)?,
            bias: if bias { Some(b.zeros("bias", &[out_dim])?) } else { None },
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: b.ones("gamma", &[dim])?,
            beta: b.zeros("beta", &[dim])?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Square-kernel convolution over `[H,W,C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        Ok(Conv2d {
            weight: b.fan_in("weight", &[k, k, c_in, c_out], k * k * c_in)?,
            bias: if bias { Some(b.zeros("bias", &[c_out])?) } else { None },
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&mut b.scope("fc1"), dim, dim * ratio, true)?,
            fc2: Linear::new(&mut b.scope("fc2"), dim * ratio, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Output of [`attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[B, nq, D]`
    pub out: Var,
    /// Attention weights, `[heads * B, nq, nk]`, head-major.
    pub probs: Var,
}

/// Scaled dot-product attention over `heads` subspaces.
///
/// `q: [B, nq, D]`, `k, v: [B, nk, D]`. `mask` is a constant `[B, nq, nk]`
/// (or any trailing shape of it) added to the scores; `bias` is a recorded
/// `[heads, B, nq, nk]` tensor added to the scores.
pub fn attention<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor<T>>,
    bias: Option<Var>,
) -> Result<Attended> {
    let [batch, nq, d] = *tape.shape(q) else {
        return Err(Error::dim("attention", format!("query must be [B,n,D], got {:?}", tape.shape(q))));
    };
    let ks = tape.shape(k).to_vec();
    if ks.len() != 3 || ks[0] != batch || ks[2] != d || tape.shape(v) != ks.as_slice() {
        return Err(Error::dim(
            "attention",
            format!("query {:?}, key {ks:?}, value {:?}", tape.shape(q), tape.shape(v)),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("dim {d} not divisible by {heads} heads")));
    }
    let nk = ks[1];
    let dh = d / heads;
    let split = |tape: &mut Tape<'_, T>, x: Var, n: usize| -> Result<Var> {
        let x = tape.reshape(x, &[batch, n, heads, dh])?;
        let x = tape.permute(x, &[2, 0, 1, 3])?;
        tape.reshape(x, &[heads * batch, n, dh])
    };
    let qh = split(tape, q, nq)?;
    let kh = split(tape, k, nk)?;
    let vh = split(tape, v, nk)?;
    let scores = tape.bmm(qh, kh, true)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(b) = bias {
        let b = tape.reshape(b, &[heads * batch, nq, nk])?;
        scores = tape.add(scores, b)?;
    }
    if let Some(m) = mask {
        let s4 = tape.reshape(scores, &[heads, batch, nq, nk])?;
        let s4 = tape.add_const(s4, m)?;
        scores = tape.reshape(s4, &[heads * batch, nq, nk])?;
    }
    let probs = tape.softmax(scores);
    let ctx = tape.bmm(probs, vh, false)?;
    let ctx = tape.reshape(ctx, &[heads, batch, nq, dh])?;
    let ctx = tape.permute(ctx, &[1, 2, 0, 3])?;
    let out = tape.reshape(ctx, &[batch, nq, d])?;
    Ok(Attended { out, probs })
}
