//! Edge branch: a four-stage CNN of pixel-difference convolution (PDC)
//! blocks with a supervised side edge map per stage.
//!
//! A PDC kernel sums weighted differences of pixel pairs,
//! `y = Σ_{(i,i')∈P} w_i (x_i - x_i')`, instead of weighted pixel values.
//! Because that is linear in the input, every PDC is computed as an
//! ordinary convolution with a kernel rebuilt from the weights: the pair
//! `(i, i')` adds `+w_i` at footprint position `i` and `-w_i` at `i'`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::body::TokenGrid;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d};
use crate::params::ParamId;
use crate::tensor::Real;

/// Pixel-pair pattern of a PDC kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PdcVariant {
    /// Each pixel minus the window centre.
    Central,
    /// Each ring pixel minus its clockwise neighbour.
    Angular,
    /// Outer-ring pixel of a 5×5 footprint minus the inner-ring pixel on the same ray.
    Radial,
    /// Plain convolution, no differences.
    Vanilla,
}

impl PdcVariant {
    pub const ALL: [PdcVariant; 4] = [Self::Central, Self::Angular, Self::Radial, Self::Vanilla];

    pub fn pair_set(self) -> PairSet {
        // 3×3 positions, row-major; 4 is the centre.
        const RING_CLOCKWISE: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];
        let pairs = match self {
            Self::Vanilla => Vec::new(),
            Self::Central => (0..9)
                .filter(|&i| i != 4)
                .map(|i| PixelPair { weight: i, plus: i, minus: 4 })
                .collect(),
            Self::Angular => (0..8)
                .map(|j| {
                    let i = RING_CLOCKWISE[j];
                    PixelPair {
                        weight: i,
                        plus: i,
                        minus: RING_CLOCKWISE[(j + 1) % 8],
                    }
                })
                .collect(),
            Self::Radial => (0..9)
                .filter(|&i| i != 4)
                .map(|i| {
                    let (dr, dc) = (i as isize / 3 - 1, i as isize % 3 - 1);
                    let at = |s: isize| ((2 + s * dr) * 5 + 2 + s * dc) as usize;
                    PixelPair {
                        weight: i,
                        plus: at(2),
                        minus: at(1),
                    }
                })
                .collect(),
        };
        PairSet {
            k: 3,
            footprint: if self == Self::Radial { 5 } else { 3 },
            pairs,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Self::Central => "cd",
            Self::Angular => "ad",
            Self::Radial => "rd",
            Self::Vanilla => "cv",
        }
    }
}

impl fmt::Display for PdcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PdcVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown PDC variant `{s}` (expected cd, ad, rd or cv)")))
    }
}

/// One difference term: weight index `weight` times `x[plus] - x[minus]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelPair {
    pub weight: usize,
    pub plus: usize,
    pub minus: usize,
}

/// Pairs of a PDC kernel. `k` is the weight kernel size; pair positions
/// index a `footprint × footprint` window (row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    pub k: usize,
    pub footprint: usize,
    pub pairs: Vec<PixelPair>,
}

impl PairSet {
    pub fn is_vanilla(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Rebuilds the equivalent plain-convolution kernel from `w: [k,k,...]`.
    pub fn effective_kernel<T: Real>(&self, tape: &mut Tape<'_, T>, w: Var) -> Result<Var> {
        let shape = tape.shape(w).to_vec();
        if shape.len() < 3 || shape[0] != self.k || shape[1] != self.k {
            return Err(Error::dim("pdc", format!("kernel {shape:?} for {0}x{0} pair set", self.k)));
        }
        if self.is_vanilla() {
            return Ok(w);
        }
        let rest = &shape[2..];
        let mut flat_shape = vec![self.k * self.k];
        flat_shape.extend_from_slice(rest);
        let flat = tape.reshape(w, &flat_shape)?;
        let terms = self
            .pairs
            .iter()
            .flat_map(|p| [(p.plus, p.weight, 1.0), (p.minus, p.weight, -1.0)])
            .collect();
        let f = self.footprint;
        let k = tape.combine_rows(flat, f * f, terms)?;
        let mut out_shape = vec![f, f];
        out_shape.extend_from_slice(rest);
        tape.reshape(k, &out_shape)
    }
}

/// Border handling for [`pdc_conv`] and [`pdc_depthwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdcPadding {
    /// No padding; output shrinks by `footprint - 1`.
    Valid,
    /// Replicate border pixels so constant regions, borders included,
    /// produce exactly zero difference response.
    Replicate,
}

fn pad_input<T: Real>(tape: &mut Tape<'_, T>, x: Var, set: &PairSet, padding: PdcPadding) -> Result<Var> {
    match padding {
        PdcPadding::Valid => Ok(x),
        PdcPadding::Replicate => tape.pad_replicate(x, set.footprint / 2),
    }
}

/// Full PDC over `x: [H,W,Cin]` with weights `w: [k,k,Cin,Cout]`.
pub fn pdc_conv<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: Var, variant: PdcVariant, padding: PdcPadding) -> Result<Var> {
    let set = variant.pair_set();
    let (xs, ws) = (tape.shape(x), tape.shape(w));
    if xs.len() != 3 || ws.len() != 4 || xs[2] != ws[2] {
        return Err(Error::dim("pdc_conv", format!("input {xs:?} vs kernel {ws:?}")));
    }
    let kernel = set.effective_kernel(tape, w)?;
    let x = pad_input(tape, x, &set, padding)?;
    tape.conv2d(x, kernel, 1, 0)
}

/// Depthwise PDC over `x: [H,W,C]` with weights `w: [k,k,C]`.
pub fn pdc_depthwise<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    w: Var,
    variant: PdcVariant,
    padding: PdcPadding,
) -> Result<Var> {
    let set = variant.pair_set();
    let (xs, ws) = (tape.shape(x), tape.shape(w));
    if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[2] {
        return Err(Error::dim("pdc_depthwise", format!("input {xs:?} vs kernel {ws:?}")));
    }
    let kernel = set.effective_kernel(tape, w)?;
    let x = pad_input(tape, x, &set, padding)?;
    tape.depthwise_conv2d(x, kernel, 1, 0)
}

/// `x + conv1x1(relu(pdc_depthwise(x)))`.
#[derive(Clone, Debug)]
pub struct PdcBlock {
    pub depthwise: ParamId,
    pub variant: PdcVariant,
    pub pointwise: Conv2d,
}

impl PdcBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, variant: PdcVariant) -> Result<Self> {
        Ok(PdcBlock {
            depthwise: b.fan_in("depthwise", &[3, 3, channels], 9)?,
            variant,
            pointwise: Conv2d::new(&mut b.scope("pointwise"), channels, channels, 1, 1, 0, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.depthwise);
        let y = pdc_depthwise(tape, x, w, self.variant, PdcPadding::Replicate)?;
        let y = tape.relu(y);
        let y = self.pointwise.forward(tape, y)?;
        tape.add(x, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConfig {
    pub base_dim: usize,
    pub blocks_per_stage: usize,
    /// Variant of each block within a stage, cycled if shorter.
    pub variants: Vec<PdcVariant>,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            base_dim: 16,
            blocks_per_stage: 4,
            variants: vec![PdcVariant::Central, PdcVariant::Angular, PdcVariant::Radial, PdcVariant::Central],
        }
    }
}

#[derive(Clone, Debug)]
pub struct EdgeStage {
    /// Channel expansion after pooling (stages 2-4).
    pub expand: Option<Conv2d>,
    pub blocks: Vec<PdcBlock>,
    pub side_head: Conv2d,
}

/// Output of one edge stage.
#[derive(Clone, Copy, Debug)]
pub struct EdgeStageOutput {
    pub features: TokenGrid,
    /// `[H, W, 1]` sigmoid map at input resolution.
    pub side_edge_map: Var,
}

#[derive(Clone, Debug)]
pub struct EdgeEncoder {
    pub stem1: Conv2d,
    pub stem2: Conv2d,
    pub stages: Vec<EdgeStage>,
}

impl EdgeEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &EdgeConfig) -> Result<Self> {
        if cfg.variants.is_empty() {
            return Err(Error::config("edge encoder needs at least one PDC variant"));
        }
        let c = cfg.base_dim;
        let stem1 = Conv2d::new(&mut b.scope("stem1"), 3, c, 3, 2, 1, true)?;
        let stem2 = Conv2d::new(&mut b.scope("stem2"), c, c, 3, 2, 1, true)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let dim = c << s;
            let mut sb = b.scope(format!("stage{}", s + 1));
            let expand = if s == 0 {
                None
            } else {
                Some(Conv2d::new(&mut sb.scope("expand"), dim / 2, dim, 1, 1, 0, true)?)
            };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|i| PdcBlock::new(&mut sb.scope(format!("block{i}")), dim, cfg.variants[i % cfg.variants.len()]))
                .collect::<Result<_>>()?;
            let side_head = Conv2d::new(&mut sb.scope("side"), dim, 1, 1, 1, 0, true)?;
            stages.push(EdgeStage { expand, blocks, side_head });
        }
        Ok(EdgeEncoder { stem1, stem2, stages })
    }

    /// Runs the branch on `image: [H,W,3]`; `H` and `W` must be multiples of 32.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<[EdgeStageOutput; 4]> {
        let (h, w) = match *tape.shape(image) {
            [h, w, 3] if h % 32 == 0 && w % 32 == 0 => (h, w),
            ref s => return Err(Error::config(format!("edge encoder needs [H,W,3] with H,W divisible by 32, got {s:?}"))),
        };
        let x = self.stem1.forward(tape, image)?;
        let x = tape.relu(x);
        let mut x = self.stem2.forward(tape, x)?;
        let mut outs = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(expand) = &stage.expand {
                x = tape.max_pool2d(x)?;
                x = expand.forward(tape, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(tape, x)?;
            }
            let logit = stage.side_head.forward(tape, x)?;
            let prob = tape.sigmoid(logit);
            let factor = 4 << s;
            let side_edge_map = tape.upsample_nearest(prob, factor)?;
            debug_assert_eq!(tape.shape(side_edge_map), &[h, w, 1]);
            outs.push(EdgeStageOutput {
                features: TokenGrid::from_var(tape, x)?,
                side_edge_map,
            });
        }
        Ok(outs.try_into().expect("four stages"))
    }
}
