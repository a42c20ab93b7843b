//! Training objectives: the annotator-robust edge loss on the side edge
//! maps, cross-entropy plus Dice on the segmentation logits, and their
//! weighted sum.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before any log.
pub const CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// λ₁, cross-entropy weight.
    pub bce: f64,
    /// λ₂, Dice weight.
    pub dice: f64,
    /// γ, edge loss weight.
    pub edge: f64,
    /// λ, scale of the negative-pixel weight `α = λ(1 - β)`.
    pub lambda: f64,
    /// η, edge targets in `(0, η)` are ignored.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 0.6,
            dice: 0.4,
            edge: 0.2,
            lambda: 1.1,
            eta: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v.is_finite() && (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("bce weight", self.bce)?;
        unit("dice weight", self.dice)?;
        unit("edge weight", self.edge)?;
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(format!("lambda = {} must be positive", self.lambda)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::config(format!("eta = {} must lie in (0, 1)", self.eta)));
        }
        Ok(())
    }
}

/// Role of one pixel in the edge loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeLabel {
    Negative,
    Ignored,
    Positive,
}

pub fn edge_label(target: f64, eta: f64) -> EdgeLabel {
    if target <= 0.0 {
        EdgeLabel::Negative
    } else if target < eta {
        EdgeLabel::Ignored
    } else {
        EdgeLabel::Positive
    }
}

/// Class-balancing weights: `beta` is the fraction of negatives among
/// labelled (non-ignored) pixels, `alpha = lambda (1 - beta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeBalance {
    pub alpha: f64,
    pub beta: f64,
}

impl EdgeBalance {
    pub fn from_targets(targets: impl IntoIterator<Item = f64>, lambda: f64, eta: f64) -> Self {
        let (mut neg, mut pos) = (0usize, 0usize);
        for t in targets {
            match edge_label(t, eta) {
                EdgeLabel::Negative => neg += 1,
                EdgeLabel::Positive => pos += 1,
                EdgeLabel::Ignored => {}
            }
        }
        let beta = if neg + pos == 0 { 0.0 } else { neg as f64 / (neg + pos) as f64 };
        EdgeBalance {
            alpha: lambda * (1.0 - beta),
            beta,
        }
    }
}

fn constant<T: Real>(tape: &mut Tape<'_, T>, shape: &[usize], values: impl Iterator<Item = f64>) -> Result<Var> {
    let t = Tensor::new(shape, values.map(T::from_f64).collect())?;
    Ok(tape.input(&t))
}

/// `-Σ_maps Σ_pixels [α·ln(1-y) on negatives, β·ln(y) on positives]`,
/// ignored pixels contribute nothing.
pub fn edge_loss<T: Real>(tape: &mut Tape<'_, T>, maps: &[Var], target: &[f64], balance: EdgeBalance, eta: f64) -> Result<Var> {
    let Some(&first) = maps.first() else {
        return Err(Error::Contract("edge loss needs at least one map".into()));
    };
    let shape = tape.shape(first).to_vec();
    let numel: usize = shape.iter().product();
    if numel != target.len() {
        return Err(Error::dim("edge_loss", format!("map {shape:?} vs {} targets", target.len())));
    }
    let labels: Vec<EdgeLabel> = target.iter().map(|&t| edge_label(t, eta)).collect();
    let neg_w = constant(tape, &shape, labels.iter().map(|l| if *l == EdgeLabel::Negative { balance.alpha } else { 0.0 }))?;
    let pos_w = constant(tape, &shape, labels.iter().map(|l| if *l == EdgeLabel::Positive { balance.beta } else { 0.0 }))?;
    let mut total: Option<Var> = None;
    for &map in maps {
        if tape.shape(map) != shape.as_slice() {
            return Err(Error::dim("edge_loss", format!("map {:?} vs {shape:?}", tape.shape(map))));
        }
        let y = tape.clamp(map, CLAMP, 1.0 - CLAMP);
        let ln_y = tape.ln(y);
        let one_minus = tape.scale(y, -1.0);
        let one_minus = tape.add_scalar(one_minus, 1.0);
        let ln_1my = tape.ln(one_minus);
        let a = tape.mul(ln_y, pos_w)?;
        let b = tape.mul(ln_1my, neg_w)?;
        let s = tape.add(a, b)?;
        let s = tape.sum(s);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("at least one map"), -1.0))
}

/// Mean of `-[(1-t)·ln(1-p) + t·ln(p)]`.
pub fn bce_loss<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim("bce_loss", format!("pred {:?} vs target {:?}", tape.shape(pred), tape.shape(target))));
    }
    if let Some(bad) = tape.value(pred).iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::Contract(format!("bce prediction {bad:?} outside [0, 1]")));
    }
    let p = tape.clamp(pred, CLAMP, 1.0 - CLAMP);
    let ln_p = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let ln_q = tape.ln(q);
    let nt = tape.scale(target, -1.0);
    let nt = tape.add_scalar(nt, 1.0);
    let a = tape.mul(target, ln_p)?;
    let b = tape.mul(nt, ln_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// `1 - (2Σ p·t + ε) / (Σp + Σt + ε)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim("dice_loss", format!("pred {:?} vs target {:?}", tape.shape(pred), tape.shape(target))));
    }
    let inter = tape.mul(pred, target)?;
    let inter = tape.sum(inter);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let sp = tape.sum(pred);
    let st = tape.sum(target);
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let inv = tape.recip(den);
    let ratio = tape.mul(num, inv)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Components of the segmentation loss.
#[derive(Clone, Copy, Debug)]
pub struct BodyLoss {
    /// Mean softmax cross-entropy.
    pub ce: Var,
    /// One-vs-rest Dice loss averaged over all classes.
    pub dice: Var,
    /// `λ₁·ce + λ₂·dice`
    pub total: Var,
}

/// Softmax cross-entropy and class-averaged Dice on `logits: [H,W,K]`
/// against class indices `mask` (row-major `H·W`).
pub fn body_loss<T: Real>(tape: &mut Tape<'_, T>, logits: Var, mask: &[u8], weights: &LossWeights) -> Result<BodyLoss> {
    let shape = tape.shape(logits).to_vec();
    let [h, w, k] = shape[..] else {
        return Err(Error::dim("body_loss", format!("logits must be [H,W,K], got {shape:?}")));
    };
    if mask.len() != h * w {
        return Err(Error::dim("body_loss", format!("logits {shape:?} vs {} mask pixels", mask.len())));
    }
    if let Some(&c) = mask.iter().find(|&&c| c as usize >= k) {
        return Err(Error::config(format!("mask class {c} out of range for {k} classes")));
    }
    let probs = tape.softmax(logits);
    let picked = tape.gather(probs, mask.iter().enumerate().map(|(i, &c)| i * k + c as usize).collect(), &[h, w])?;
    let picked = tape.clamp(picked, CLAMP, 1.0);
    let ln = tape.ln(picked);
    let ce = tape.mean(ln);
    let ce = tape.scale(ce, -1.0);

    let mut dice_sum: Option<Var> = None;
    for class in 0..k {
        let p = tape.slice(probs, 2, class, 1)?;
        let p = tape.reshape(p, &[h, w])?;
        let t = constant(tape, &[h, w], mask.iter().map(|&c| if c as usize == class { 1.0 } else { 0.0 }))?;
        let d = dice_loss(tape, p, t)?;
        dice_sum = Some(match dice_sum {
            Some(s) => tape.add(s, d)?,
            None => d,
        });
    }
    let dice = tape.scale(dice_sum.expect("k >= 1"), 1.0 / k as f64);
    let a = tape.scale(ce, weights.bce);
    let b = tape.scale(dice, weights.dice);
    let total = tape.add(a, b)?;
    Ok(BodyLoss { ce, dice, total })
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub body: BodyLoss,
    /// Unweighted edge loss, absent when there are no side maps or `γ = 0`.
    pub edge: Option<Var>,
    /// `body + γ·edge`
    pub total: Var,
}

/// Full objective. `edge` is needed only when side maps are present and
/// `γ > 0`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    side_maps: Option<&[Var]>,
    mask: &[u8],
    edge: Option<(&[f64], EdgeBalance)>,
    weights: &LossWeights,
) -> Result<LossParts> {
    let body = body_loss(tape, logits, mask, weights)?;
    let edge_term = match side_maps {
        Some(maps) if weights.edge > 0.0 => {
            let (target, balance) =
                edge.ok_or_else(|| Error::Contract("edge targets required when the edge loss is active".into()))?;
            Some(edge_loss(tape, maps, target, balance, weights.eta)?)
        }
        _ => None,
    };
    let total = match edge_term {
        Some(e) => {
            let e = tape.scale(e, weights.edge);
            tape.add(body.total, e)?
        }
        None => body.total,
    };
    Ok(LossParts { body, edge: edge_term, total })
}
