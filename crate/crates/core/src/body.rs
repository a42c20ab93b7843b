//! Body branch: a hierarchical shifted-window transformer.
//!
//! Tokens are stored as `[H', W', D]` maps, so the row-major token list
//! `[H'·W', D]` and the spatial map are the same buffer.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{attention, Attended, Builder, Conv2d, LayerNorm, Linear, Mlp};
use crate::params::ParamId;
use crate::tensor::{Real, Tensor};

/// Score offset for token pairs that must not attend to each other.
pub const MASKED: f64 = -1e9;

/// A `[h, w, dim]` token map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl TokenGrid {
    pub fn from_var<T: Real>(tape: &Tape<'_, T>, tokens: Var) -> Result<Self> {
        match *tape.shape(tokens) {
            [h, w, dim] => Ok(TokenGrid { tokens, h, w, dim }),
            ref s => Err(Error::dim("token_grid", format!("expected [H,W,D], got {s:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Window geometry after clamping the configured size `m` to the grid.
/// Returns `(window, shift)`; shifting is disabled when one window covers
/// the grid.
pub fn window_geometry(h: usize, w: usize, m: usize, shifted: bool) -> Result<(usize, usize)> {
    if m == 0 {
        return Err(Error::config("window size must be positive"));
    }
    let eff = m.min(h).min(w);
    if !h.is_multiple_of(eff) || !w.is_multiple_of(eff) {
        return Err(Error::config(format!("grid {h}x{w} is not divisible into {eff}x{eff} windows")));
    }
    let shift = if shifted && h.min(w) > m { eff / 2 } else { 0 };
    Ok((eff, shift))
}

/// Gather indices taking a `[h,w,d]` map, cyclically shifted up-left by
/// `s`, to `[nW, mh·mw, d]` windows of `(mh, mw)` tokens.
pub fn partition_index(h: usize, w: usize, d: usize, (mh, mw): (usize, usize), s: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * d);
    for wy in 0..h / mh {
        for wx in 0..w / mw {
            for py in 0..mh {
                for px in 0..mw {
                    let y = (wy * mh + py + s) % h;
                    let x = (wx * mw + px + s) % w;
                    let base = (y * w + x) * d;
                    index.extend(base..base + d);
                }
            }
        }
    }
    index
}

/// Inverse of [`partition_index`]: windows back to the unshifted `[h,w,d]` map.
pub fn reverse_index(h: usize, w: usize, d: usize, (mh, mw): (usize, usize), s: usize) -> Vec<usize> {
    let nwx = w / mw;
    let mut index = Vec::with_capacity(h * w * d);
    for y in 0..h {
        let ys = (y + h - s) % h;
        for x in 0..w {
            let xs = (x + w - s) % w;
            let win = (ys / mh) * nwx + xs / mw;
            let pos = (ys % mh) * mw + xs % mw;
            let base = (win * mh * mw + pos) * d;
            index.extend(base..base + d);
        }
    }
    index
}

/// Additive `[nW, m², m²]` mask keeping attention inside the regions that
/// were contiguous before the cyclic shift.
pub fn shift_mask<T: Real>(h: usize, w: usize, m: usize, s: usize) -> Tensor<T> {
    let region = |c: usize, n: usize| -> usize {
        if c < n - m {
            0
        } else if c < n - s {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (h / m, w / m);
    let mm = m * m;
    let mut data = Vec::with_capacity(nwy * nwx * mm * mm);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let labels: Vec<usize> = (0..mm)
                .map(|p| region(wy * m + p / m, h) * 3 + region(wx * m + p % m, w))
                .collect();
            for &a in &labels {
                for &b in &labels {
                    data.push(T::from_f64(if a == b { 0.0 } else { MASKED }));
                }
            }
        }
    }
    Tensor::new(&[nwy * nwx, mm, mm], data).expect("mask shape")
}

/// Multi-head self-attention inside windows, with an optional learned
/// relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub window: usize,
    /// `[(2M-1)², heads]`
    pub bias_table: Option<ParamId>,
}

impl WindowAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, heads: usize, window: usize, relative_bias: bool) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let side = 2 * window - 1;
        Ok(WindowAttention {
            qkv: Linear::new(&mut b.scope("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&mut b.scope("proj"), dim, dim, true)?,
            heads,
            window,
            bias_table: if relative_bias {
                Some(b.zeros("bias_table", &[side * side, heads])?)
            } else {
                None
            },
        })
    }

    fn relative_bias<T: Real>(&self, tape: &mut Tape<'_, T>, windows: usize, m: usize) -> Result<Option<Var>> {
        let Some(table) = self.bias_table else { return Ok(None) };
        let side = 2 * self.window - 1;
        let mm = m * m;
        let mut index = Vec::with_capacity(self.heads * windows * mm * mm);
        for h in 0..self.heads {
            for _ in 0..windows {
                for i in 0..mm {
                    for j in 0..mm {
                        let dy = i / m + self.window - 1 - j / m;
                        let dx = i % m + self.window - 1 - j % m;
                        index.push((dy * side + dx) * self.heads + h);
                    }
                }
            }
        }
        let t = tape.param(table);
        tape.gather(t, index, &[self.heads, windows, mm, mm]).map(Some)
    }

    /// `x: [nW, m², D]` windows.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, mask: Option<&Tensor<T>>) -> Result<Attended> {
        let [windows, mm, d] = *tape.shape(x) else {
            return Err(Error::dim("window_attention", format!("expected [nW,m²,D], got {:?}", tape.shape(x))));
        };
        let m = (mm as f64).sqrt() as usize;
        let qkv = self.qkv.forward(tape, x)?;
        let q = tape.slice(qkv, 2, 0, d)?;
        let k = tape.slice(qkv, 2, d, d)?;
        let v = tape.slice(qkv, 2, 2 * d, d)?;
        let bias = self.relative_bias(tape, windows, m)?;
        let a = attention(tape, q, k, v, self.heads, mask, bias)?;
        let out = self.proj.forward(tape, a.out)?;
        Ok(Attended { out, probs: a.probs })
    }
}

/// Pre-norm transformer block over (optionally shifted) windows.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shifted: bool,
}

/// Block output plus the attention weights of its window attention.
#[derive(Clone, Copy, Debug)]
pub struct SwinBlockOutput {
    pub grid: TokenGrid,
    pub probs: Var,
}

impl SwinBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, cfg: &BodyConfig, heads: usize, shifted: bool) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(&mut b.scope("norm1"), dim)?,
            attn: WindowAttention::new(&mut b.scope("attn"), dim, heads, cfg.window, cfg.relative_bias)?,
            norm2: LayerNorm::new(&mut b.scope("norm2"), dim)?,
            mlp: Mlp::new(&mut b.scope("mlp"), dim, cfg.mlp_ratio)?,
            shifted,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, grid: TokenGrid) -> Result<SwinBlockOutput> {
        let TokenGrid { tokens, h, w, dim } = grid;
        let (m, s) = window_geometry(h, w, self.attn.window, self.shifted)?;
        let normed = self.norm1.forward(tape, tokens)?;
        let windows = tape.gather(normed, partition_index(h, w, dim, (m, m), s), &[(h / m) * (w / m), m * m, dim])?;
        let mask = (s > 0).then(|| shift_mask::<T>(h, w, m, s));
        let a = self.attn.forward(tape, windows, mask.as_ref())?;
        let attended = tape.gather(a.out, reverse_index(h, w, dim, (m, m), s), &[h, w, dim])?;
        let x = tape.add(tokens, attended)?;
        let normed = self.norm2.forward(tape, x)?;
        let y = self.mlp.forward(tape, normed)?;
        let tokens = tape.add(x, y)?;
        Ok(SwinBlockOutput {
            grid: TokenGrid { tokens, ..grid },
            probs: a.probs,
        })
    }
}

/// Non-overlapping `P×P` patch projection plus a learned position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub pos: Option<ParamId>,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<TokenGrid> {
        let x = self.proj.forward(tape, image)?;
        let x = match self.pos {
            Some(pos) => {
                let p = tape.param(pos);
                tape.add(x, p)?
            }
            None => x,
        };
        TokenGrid::from_var(tape, x)
    }
}

/// Concatenates each 2×2 token neighbourhood and projects `4D -> 2D`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(PatchMerge {
            norm: LayerNorm::new(&mut b.scope("norm"), 4 * dim)?,
            reduction: Linear::new(&mut b.scope("reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, grid: TokenGrid) -> Result<TokenGrid> {
        let TokenGrid { tokens, h, w, dim } = grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("patch_merge", format!("odd grid {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut index = Vec::with_capacity(h * w * dim);
        for y in 0..ho {
            for x in 0..wo {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((2 * y + dy) * w + 2 * x + dx) * dim;
                    index.extend(base..base + dim);
                }
            }
        }
        let x = tape.gather(tokens, index, &[ho, wo, 4 * dim])?;
        let x = self.norm.forward(tape, x)?;
        let x = self.reduction.forward(tape, x)?;
        TokenGrid::from_var(tape, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub base_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: usize,
    pub absolute_pos: bool,
    pub relative_bias: bool,
}

impl Default for BodyConfig {
    fn default() -> Self {
        BodyConfig {
            image_h: 64,
            image_w: 64,
            patch: 4,
            base_dim: 16,
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            window: 2,
            mlp_ratio: 4,
            absolute_pos: true,
            relative_bias: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BodyStage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
pub struct BodyEncoder {
    pub embed: PatchEmbed,
    pub stages: Vec<BodyStage>,
}

impl BodyEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &BodyConfig) -> Result<Self> {
        let p = cfg.patch;
        if p == 0 || !cfg.image_h.is_multiple_of(p * 8) || !cfg.image_w.is_multiple_of(p * 8) {
            return Err(Error::config(format!(
                "image {}x{} must be divisible by 8 x patch size {p}",
                cfg.image_h, cfg.image_w
            )));
        }
        let c = cfg.base_dim;
        let mut eb = b.scope("embed");
        let embed = PatchEmbed {
            proj: Conv2d::new(&mut eb.scope("proj"), 3, c, p, p, 0, true)?,
            pos: if cfg.absolute_pos {
                Some(eb.zeros("pos", &[cfg.image_h / p, cfg.image_w / p, c])?)
            } else {
                None
            },
            patch: p,
        };
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let dim = c << s;
            let mut sb = b.scope(format!("stage{}", s + 1));
            let merge = if s == 0 {
                None
            } else {
                Some(PatchMerge::new(&mut sb.scope("merge"), dim / 2)?)
            };
            let blocks = (0..cfg.depths[s])
                .map(|i| SwinBlock::new(&mut sb.scope(format!("block{i}")), dim, cfg, cfg.heads[s], i % 2 == 1))
                .collect::<Result<_>>()?;
            stages.push(BodyStage { merge, blocks });
        }
        Ok(BodyEncoder { embed, stages })
    }

    /// Per-stage token maps for `image: [H,W,3]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<[TokenGrid; 4]> {
        let mut grid = self.embed.forward(tape, image)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(merge) = &stage.merge {
                grid = merge.forward(tape, grid)?;
            }
            for block in &stage.blocks {
                grid = block.forward(tape, grid)?.grid;
            }
            outs.push(grid);
        }
        Ok(outs.try_into().expect("four stages"))
    }
}
