//! Mini-batch training with per-sample gradient accumulation.

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{total_loss, EdgeBalance};
use crate::metrics::{self, ConfusionCounts, MetricTable};
use crate::model::Model;
use crate::optim::{AdamW, ReduceOnPlateau};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 42,
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `train` or `val`.
    pub split: &'static str,
    pub loss: f64,
    /// Mean foreground Dice.
    pub dice: f64,
}

impl EpochRecord {
    /// `epoch,split,loss,dice`
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.split, metrics::sig6(self.loss), metrics::sig6(self.dice))
    }
}

/// Argmax class per pixel of `[H, W, K]` logits.
pub fn argmax(logits: &[f32], k: usize) -> Vec<u8> {
    logits
        .chunks(k)
        .map(|row| row.iter().enumerate().fold((0, row[0]), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0 as u8)
        .collect()
}

/// Average Dice over foreground classes `1..k`.
pub fn mean_dice(pred: &[u8], gt: &[u8], k: usize) -> Result<f64> {
    let mut s = 0.0;
    for c in 1..k {
        s += ConfusionCounts::for_class(pred, gt, c as u8)?.dice();
    }
    Ok(s / (k - 1) as f64)
}

/// Loss and predicted mask of one sample. With `grads`, also accumulates
/// `scale · ∂loss/∂θ` into the model's gradient buffers.
pub fn sample_step(model: &mut Model<f32>, sample: &Sample, balance: EdgeBalance, grads: Option<f32>) -> Result<(f64, Vec<u8>)> {
    let cfg = model.cfg().clone();
    let mut tape = Tape::with_params(&model.params);
    let x = tape.input(&sample.image);
    let out = model.arch.forward(&mut tape, x)?;
    let maps = out.side_edge_maps.map(|m| m.to_vec());
    let parts = total_loss(&mut tape, out.logits, maps.as_deref(), &sample.mask, Some((&sample.edge, balance)), &cfg.loss)?;
    let loss = tape.item(parts.total) as f64;
    let pred = argmax(tape.value(out.logits), cfg.num_classes);
    if let Some(scale) = grads {
        let g = tape.backward(parts.total)?;
        model.params.accumulate(&g, scale)?;
    }
    Ok((loss, pred))
}

fn balance_of<'a>(samples: impl IntoIterator<Item = &'a Sample>, model: &Model<f32>) -> EdgeBalance {
    let w = &model.cfg().loss;
    EdgeBalance::from_targets(samples.into_iter().flat_map(|s| s.edge.iter().copied()), w.lambda, w.eta)
}

fn check_finite(loss: f64, what: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("loss {loss} {}", what())))
    }
}

/// Mean loss and mean foreground Dice without updating parameters. Edge
/// balancing uses the whole set.
pub fn validate(model: &mut Model<f32>, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty validation set".into()));
    }
    let balance = balance_of(samples, model);
    let k = model.cfg().num_classes;
    let (mut loss, mut dice) = (0.0, 0.0);
    for s in samples {
        let (l, pred) = sample_step(model, s, balance, None)?;
        loss += l;
        dice += mean_dice(&pred, &s.mask, k)?;
    }
    let n = samples.len() as f64;
    Ok((loss / n, dice / n))
}

/// Runs one optimizer step on `batch`; returns the mean loss before the
/// update and the mean Dice of the batch predictions.
pub fn train_batch(model: &mut Model<f32>, opt: &mut AdamW, batch: &[&Sample]) -> Result<(f64, f64)> {
    let balance = balance_of(batch.iter().copied(), model);
    let k = model.cfg().num_classes;
    let scale = 1.0 / batch.len() as f32;
    let (mut loss, mut dice) = (0.0, 0.0);
    for s in batch {
        let (l, pred) = sample_step(model, s, balance, Some(scale))?;
        loss += l;
        dice += mean_dice(&pred, &s.mask, k)?;
    }
    let n = batch.len() as f64;
    opt.step(&mut model.params);
    Ok((loss / n, dice / n))
}

pub struct Outcome {
    /// Parameters of the epoch with the best validation Dice.
    pub best: Model<f32>,
    pub best_val_dice: f64,
    pub log: Vec<EpochRecord>,
}

/// Trains `model` with AdamW and a plateau schedule on validation loss.
/// `on_epoch` sees each epoch's records and whether validation Dice
/// improved, together with the current model.
pub fn train(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&[EpochRecord], bool, &Model<f32>) -> Result<()>,
) -> Result<Outcome> {
    if train_set.is_empty() || cfg.batch_size == 0 {
        return Err(Error::config("training needs samples and a positive batch size"));
    }
    let mut rng = seeded(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut plateau = ReduceOnPlateau::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::NEG_INFINITY, model.clone());
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut dice, mut seen) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (l, d) = train_batch(model, &mut opt, &batch)?;
            check_finite(l, || format!("at epoch {epoch}, step {}", step + 1))?;
            loss += l * batch.len() as f64;
            dice += d * batch.len() as f64;
            seen += batch.len();
        }
        let train_rec = EpochRecord {
            epoch,
            split: "train",
            loss: loss / seen as f64,
            dice: dice / seen as f64,
        };
        let mut records = vec![train_rec];
        let mut improved = false;
        if !val_set.is_empty() {
            let (vl, vd) = validate(model, val_set)?;
            check_finite(vl, || format!("on validation after epoch {epoch}"))?;
            opt.lr = plateau.observe(vl, opt.lr);
            if vd > best.0 {
                best = (vd, model.clone());
                improved = true;
            }
            records.push(EpochRecord {
                epoch,
                split: "val",
                loss: vl,
                dice: vd,
            });
        }
        on_epoch(&records, improved, model)?;
        log.extend(records);
    }
    if val_set.is_empty() {
        best = (f64::NAN, model.clone());
    }
    Ok(Outcome {
        best: best.1,
        best_val_dice: best.0,
        log,
    })
}

/// Full metric table of `model` on `samples`.
pub fn evaluate_model(model: &Model<f32>, samples: &[Sample]) -> Result<MetricTable> {
    let k = model.cfg().num_classes;
    metrics::evaluate_dataset(samples, k, |s| model.segment(&s.image))
}
