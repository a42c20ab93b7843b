//! Named finite-difference checks covering every differentiable operation
//! and module, grouped by module for the command-line driver.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::body::{BodyConfig, PatchMerge, SwinBlock, TokenGrid};
use crate::dlf::{Dlf, DlfConfig, Inject};
use crate::edge::{pdc_depthwise, EdgeConfig, EdgeEncoder, PdcBlock, PdcPadding, PdcVariant};
use crate::error::{Error, Result};
use crate::gradcheck::{check_inputs, check_params, GradReport};
use crate::lcaf::{Lcaf, LcafConfig};
use crate::losses::{body_loss, bce_loss, dice_loss, edge_loss, total_loss, EdgeBalance, LossWeights};
use crate::model::{Ablation, Model, ModelConfig};
use crate::nn::Builder;
use crate::params::ParamStore;
use crate::rng::{seeded, uniform, SeededRng};
use crate::tensor::Tensor;

pub const MODULES: [&str; 7] = ["tensor", "edge", "body", "lcaf", "dlf", "losses", "model"];

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub module: &'static str,
    pub name: String,
    pub report: GradReport,
}

impl SuiteResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.passed(tol)
    }
}

type Gen = fn(&mut SeededRng) -> Vec<Tensor<f64>>;
type OpFn = fn(&mut Tape<'_, f64>, &[Var], &mut SeededRng) -> Result<Var>;

// Shape first, so shapes can be drawn from the same generator.
fn r(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

fn un(shape: &[usize], rng: &mut SeededRng, lo: f64, hi: f64) -> Tensor<f64> {
    uniform(rng, shape, lo, hi)
}

fn away(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let mut x = r(shape, rng);
    x.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    x
}

fn d(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn square_sum(t: &mut Tape<'_, f64>, y: Var) -> Result<Var> {
    let sq = t.mul(y, y)?;
    Ok(t.sum(sq))
}

/// Random projection so every output element reaches the scalar.
fn project(t: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let p = r(t.shape(out), &mut seeded(seed ^ 0x5eed));
    let p = t.input(&p);
    let y = t.mul(out, p)?;
    Ok(t.sum(y))
}

fn op_table() -> Vec<(&'static str, Gen, OpFn)> {
    vec![
        ("add", |g| { let s = [d(g, 1, 4), d(g, 1, 4)]; vec![r(&s, g), r(&s, g)] }, |t, v, _| t.add(v[0], v[1])),
        ("sub", |g| { let s = [d(g, 1, 4), d(g, 1, 4)]; vec![r(&s, g), r(&s, g)] }, |t, v, _| t.sub(v[0], v[1])),
        ("mul", |g| { let s = [d(g, 1, 4), d(g, 1, 4)]; vec![r(&s, g), r(&s, g)] }, |t, v, _| t.mul(v[0], v[1])),
        ("add_broadcast", |g| { let n = d(g, 1, 4); vec![r(&[d(g, 1, 4), n], g), r(&[n], g)] }, |t, v, _| t.add_broadcast(v[0], v[1])),
        ("mul_broadcast", |g| { let n = d(g, 1, 4); vec![r(&[d(g, 1, 4), n], g), r(&[n], g)] }, |t, v, _| t.mul_broadcast(v[0], v[1])),
        ("scale", |g| vec![r(&[d(g, 1, 6)], g)], |t, v, _| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", |g| vec![r(&[d(g, 1, 6)], g)], |t, v, _| Ok(t.add_scalar(v[0], 0.3))),
        ("relu", |g| vec![away(&[d(g, 1, 6)], g)], |t, v, _| Ok(t.relu(v[0]))),
        ("gelu", |g| vec![r(&[d(g, 1, 6)], g)], |t, v, _| Ok(t.gelu(v[0]))),
        ("sigmoid", |g| vec![r(&[d(g, 1, 6)], g)], |t, v, _| Ok(t.sigmoid(v[0]))),
        ("ln", |g| vec![un(&[d(g, 1, 6)], g, 0.5, 2.0)], |t, v, _| Ok(t.ln(v[0]))),
        ("recip", |g| vec![un(&[d(g, 1, 6)], g, 0.5, 2.0)], |t, v, _| Ok(t.recip(v[0]))),
        ("clamp", |g| vec![un(&[d(g, 1, 6)], g, -0.4, 0.4)], |t, v, _| Ok(t.clamp(v[0], -0.5, 0.5))),
        (
            "matmul",
            |g| { let (m, k, n) = (d(g, 1, 5), d(g, 1, 5), d(g, 1, 5)); vec![r(&[m, k], g), r(&[k, n], g)] },
            |t, v, _| t.matmul(v[0], v[1]),
        ),
        (
            "linear",
            |g| { let (m, k, n) = (d(g, 1, 5), d(g, 1, 5), d(g, 1, 5)); vec![r(&[m, k], g), r(&[k, n], g), r(&[n], g)] },
            |t, v, _| t.linear(v[0], v[1], Some(v[2])),
        ),
        (
            "bmm",
            |g| { let (b, m, k, n) = (d(g, 1, 3), d(g, 1, 4), d(g, 1, 4), d(g, 1, 4)); vec![r(&[b, m, k], g), r(&[b, n, k], g)] },
            |t, v, _| t.bmm(v[0], v[1], true),
        ),
        ("softmax", |g| vec![un(&[d(g, 1, 4), d(g, 1, 6)], g, -3.0, 3.0)], |t, v, _| Ok(t.softmax(v[0]))),
        (
            "layer_norm",
            |g| { let n = d(g, 2, 6); vec![un(&[d(g, 1, 4), n], g, -2.0, 2.0), r(&[n], g), r(&[n], g)] },
            |t, v, _| t.layer_norm(v[0], v[1], v[2]),
        ),
        ("sum", |g| vec![r(&[d(g, 1, 4), d(g, 1, 4)], g)], |t, v, _| Ok(t.sum(v[0]))),
        ("mean", |g| vec![r(&[d(g, 1, 4), d(g, 1, 4)], g)], |t, v, _| Ok(t.mean(v[0]))),
        ("mean_leading", |g| vec![r(&[d(g, 1, 4), d(g, 1, 4)], g)], |t, v, _| Ok(t.mean_leading(v[0]))),
        (
            "conv2d",
            |g| { let (ci, co) = (d(g, 1, 3), d(g, 1, 3)); vec![r(&[d(g, 3, 6), d(g, 3, 6), ci], g), r(&[3, 3, ci, co], g)] },
            |t, v, g| { let s = d(g, 1, 2); t.conv2d(v[0], v[1], s, 1) },
        ),
        (
            "depthwise_conv2d",
            |g| { let c = d(g, 1, 3); vec![r(&[d(g, 3, 6), d(g, 3, 6), c], g), r(&[3, 3, c], g)] },
            |t, v, _| t.depthwise_conv2d(v[0], v[1], 1, 1),
        ),
        ("max_pool2d", |g| vec![r(&[2 * d(g, 1, 3), 2 * d(g, 1, 3), d(g, 1, 2)], g)], |t, v, _| t.max_pool2d(v[0])),
        ("upsample_nearest", |g| vec![r(&[d(g, 1, 3), d(g, 1, 3), d(g, 1, 2)], g)], |t, v, _| t.upsample_nearest(v[0], 2)),
        ("pad_replicate", |g| vec![r(&[d(g, 1, 3), d(g, 1, 3), d(g, 1, 2)], g)], |t, v, _| t.pad_replicate(v[0], 1)),
        ("permute", |g| vec![r(&[d(g, 1, 3), d(g, 1, 3), d(g, 1, 3)], g)], |t, v, _| t.permute(v[0], &[2, 0, 1])),
        ("concat", |g| vec![r(&[2, d(g, 1, 3)], g), r(&[2, d(g, 1, 3)], g)], |t, v, _| t.concat(v, 1)),
        (
            "gather",
            |g| vec![r(&[d(g, 2, 8)], g)],
            |t, v, g| {
                let n = t.value(v[0]).len();
                let idx = (0..5).map(|_| g.random_range(0..n)).collect();
                t.gather(v[0], idx, &[5])
            },
        ),
    ]
}

fn tensor_checks(eps: f64, trials: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (name, gen, f) in op_table() {
        let mut report = GradReport::default();
        for trial in 0..trials {
            let mut rng = seeded(7000 + trial);
            let inputs = gen(&mut rng);
            let op_seed: u64 = rng.random();
            report.merge(check_inputs(&inputs, eps, |t, v| {
                let y = f(t, v, &mut seeded(op_seed))?;
                project(t, y, op_seed)
            })?);
        }
        out.push(SuiteResult { module: "tensor", name: name.into(), report });
    }
    Ok(out)
}

/// Shifts every parameter off its initial value so zero-initialized biases
/// and unit gains are exercised.
fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seeded(seed);
    for (_, _, t) in store.iter_mut() {
        let noise: Tensor<f64> = un(t.shape(), &mut rng, -0.3, 0.3);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
}

fn edge_checks(eps: f64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let mut rng = seeded(11);
    for v in PdcVariant::ALL {
        let inputs = vec![r(&[6, 6, 2], &mut rng), r(&[3, 3, 2], &mut rng)];
        let report = check_inputs(&inputs, eps, |t, x| {
            let y = pdc_depthwise(t, x[0], x[1], v, PdcPadding::Replicate)?;
            square_sum(t, y)
        })?;
        out.push(SuiteResult { module: "edge", name: format!("pdc_{v}"), report });
    }

    let mut store = ParamStore::new();
    let block = PdcBlock::new(&mut Builder::new(&mut store, &mut seeded(12)), 3, PdcVariant::Central)?;
    perturb(&mut store, 13);
    let x = r(&[6, 6, 3], &mut rng);
    let report = check_params(&mut store, eps, None, &mut seeded(0), |t| {
        let xv = t.input(&x);
        let y = block.forward(t, xv)?;
        square_sum(t, y)
    })?;
    out.push(SuiteResult { module: "edge", name: "pdc_block".into(), report });

    let mut store = ParamStore::new();
    let cfg = EdgeConfig { base_dim: 4, blocks_per_stage: 1, ..EdgeConfig::default() };
    let enc = EdgeEncoder::new(&mut Builder::new(&mut store, &mut seeded(14)), &cfg)?;
    let img = un(&[32, 32, 3], &mut rng, 0.0, 1.0);
    let report = check_params(&mut store, eps, Some(3), &mut seeded(0), |t| {
        let xv = t.input(&img);
        let stages = enc.forward(t, xv)?;
        let mut acc = None;
        for s in stages {
            let a = square_sum(t, s.features.tokens)?;
            let b = t.sum(s.side_edge_map);
            let ab = t.add(a, b)?;
            acc = Some(match acc {
                Some(p) => t.add(p, ab)?,
                None => ab,
            });
        }
        Ok(acc.expect("four stages"))
    })?;
    out.push(SuiteResult { module: "edge", name: "encoder".into(), report });
    Ok(out)
}

fn body_checks(eps: f64) -> Result<Vec<SuiteResult>> {
    let mut store = ParamStore::new();
    let cfg = BodyConfig { window: 2, ..BodyConfig::default() };
    let (blocks, merge) = {
        let mut rng = seeded(21);
        let mut b = Builder::new(&mut store, &mut rng);
        let blocks = [
            SwinBlock::new(&mut b.scope("b0"), 4, &cfg, 2, false)?,
            SwinBlock::new(&mut b.scope("b1"), 4, &cfg, 2, true)?,
        ];
        (blocks, PatchMerge::new(&mut b.scope("merge"), 4)?)
    };
    perturb(&mut store, 22);
    let x = r(&[4, 4, 4], &mut seeded(23));
    let report = check_params(&mut store, eps, Some(8), &mut seeded(0), |t| {
        let xv = t.input(&x);
        let mut g = TokenGrid::from_var(t, xv)?;
        for b in &blocks {
            g = b.forward(t, g)?.grid;
        }
        let y = merge.forward(t, g)?.tokens;
        square_sum(t, y)
    })?;
    Ok(vec![SuiteResult { module: "body", name: "swin_pair_and_merge".into(), report }])
}

fn lcaf_checks(eps: f64) -> Result<Vec<SuiteResult>> {
    let mut store = ParamStore::new();
    let cfg = LcafConfig { window: (2, 2), heads: 2, ..LcafConfig::default() };
    let m = Lcaf::new(&mut Builder::new(&mut store, &mut seeded(31)), 4, &cfg)?;
    perturb(&mut store, 32);
    let mut rng = seeded(33);
    let (e, b) = (r(&[4, 4, 4], &mut rng), r(&[4, 4, 4], &mut rng));
    let report = check_params(&mut store, eps, Some(10), &mut seeded(0), |t| {
        let (ev, bv) = (t.input(&e), t.input(&b));
        let (eg, bg) = (TokenGrid::from_var(t, ev)?, TokenGrid::from_var(t, bv)?);
        let y = m.forward(t, eg, bg)?.tokens;
        square_sum(t, y)
    })?;
    Ok(vec![SuiteResult { module: "lcaf", name: "lcaf".into(), report }])
}

fn dlf_checks(eps: f64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for inject in [Inject::Add, Inject::ConcatProject] {
        let mut store = ParamStore::new();
        let cfg = DlfConfig { heads_s: 2, heads_l: 2, inject, ..DlfConfig::default() };
        let dlf = Dlf::new(&mut Builder::new(&mut store, &mut seeded(41)), (4, 4, 4), (2, 2, 8), &cfg)?;
        perturb(&mut store, 42);
        let mut rng = seeded(43);
        let (s, l) = (r(&[4, 4, 4], &mut rng), r(&[2, 2, 8], &mut rng));
        let report = check_params(&mut store, eps, Some(4), &mut seeded(0), |t| {
            let (sv, lv) = (t.input(&s), t.input(&l));
            let (sg, lg) = (TokenGrid::from_var(t, sv)?, TokenGrid::from_var(t, lv)?);
            let o = dlf.forward(t, sg, lg)?;
            let a = square_sum(t, o.z_s.tokens)?;
            let b = square_sum(t, o.z_l.tokens)?;
            t.add(a, b)
        })?;
        out.push(SuiteResult { module: "dlf", name: format!("dlf_{inject}"), report });
    }
    Ok(out)
}

fn loss_checks(eps: f64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let mut rng = seeded(51);
    let (h, w, k) = (6, 5, 3);
    let target: Vec<f64> = (0..h * w).map(|_| [0.0, 0.0, 0.2, 1.0][rng.random_range(0..4)]).collect();
    let bal = EdgeBalance::from_targets(target.iter().copied(), 1.1, 0.3);
    let maps: Vec<Tensor<f64>> = (0..4).map(|_| un(&[h, w, 1], &mut rng, 0.05, 0.95)).collect();
    out.push(SuiteResult {
        module: "losses",
        name: "edge".into(),
        report: check_inputs(&maps, eps, |t, v| edge_loss(t, v, &target, bal, 0.3))?,
    });
    let pair = vec![un(&[h, w], &mut rng, 0.05, 0.95), un(&[h, w], &mut rng, 0.0, 1.0)];
    out.push(SuiteResult {
        module: "losses",
        name: "bce".into(),
        report: check_inputs(&pair, eps, |t, v| bce_loss(t, v[0], v[1]))?,
    });
    out.push(SuiteResult {
        module: "losses",
        name: "dice".into(),
        report: check_inputs(&pair, eps, |t, v| dice_loss(t, v[0], v[1]))?,
    });
    let mask: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k as u8)).collect();
    let wts = LossWeights::default();
    let logits = vec![r(&[h, w, k], &mut rng)];
    out.push(SuiteResult {
        module: "losses",
        name: "body".into(),
        report: check_inputs(&logits, eps, |t, v| Ok(body_loss(t, v[0], &mask, &wts)?.total))?,
    });
    let mut all = logits.clone();
    all.extend(maps.iter().cloned());
    out.push(SuiteResult {
        module: "losses",
        name: "total".into(),
        report: check_inputs(&all, eps, |t, v| Ok(total_loss(t, v[0], Some(&v[1..]), &mask, Some((&target, bal)), &wts)?.total))?,
    });
    Ok(out)
}

/// Small full model: 32×32 input, C = 4.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_h: 32,
        image_w: 32,
        base_dim: 4,
        depths: [2, 2, 2, 2],
        heads: [1, 1, 2, 2],
        pdc_blocks: 2,
        num_classes: 3,
        ablation: Ablation::FULL,
        ..ModelConfig::desk()
    }
}

fn model_checks(eps: f64) -> Result<Vec<SuiteResult>> {
    let cfg = tiny_model_config();
    let mut model = Model::<f64>::new(&cfg, 8)?;
    let mut rng = seeded(9);
    let img: Tensor<f64> = un(&[32, 32, 3], &mut rng, 0.0, 1.0);
    let mask: Vec<u8> = (0..32 * 32).map(|i| ((i / 32) / 11) as u8).collect();
    let edge: Vec<f64> = (0..32 * 32).map(|i| if (i / 32) % 11 == 0 { 1.0 } else { 0.0 }).collect();
    let w = cfg.loss;
    let bal = EdgeBalance::from_targets(edge.iter().copied(), w.lambda, w.eta);
    let arch = model.arch.clone();
    let report = check_params(&mut model.params, eps, Some(2), &mut seeded(0), |t| {
        let x = t.input(&img);
        let out = arch.forward(t, x)?;
        let maps = out.side_edge_maps.map(|m| m.to_vec());
        Ok(total_loss(t, out.logits, maps.as_deref(), &mask, Some((&edge, bal)), &w)?.total)
    })?;
    Ok(vec![SuiteResult { module: "model", name: "end_to_end".into(), report }])
}

/// Runs the checks of `module` (`"all"` for every module). `trials` is the
/// number of random instances per elementary operation.
pub fn run(module: &str, eps: f64, trials: u64) -> Result<Vec<SuiteResult>> {
    let selected: Vec<&str> = match module {
        "all" => MODULES.to_vec(),
        m if MODULES.contains(&m) => vec![m],
        m => {
            return Err(Error::Parse {
                key: "module".into(),
                message: format!("unknown module `{m}`, expected all or one of {}", MODULES.join(", ")),
            })
        }
    };
    let mut out = Vec::new();
    for m in selected {
        out.extend(match m {
            "tensor" => tensor_checks(eps, trials)?,
            "edge" => edge_checks(eps)?,
            "body" => body_checks(eps)?,
            "lcaf" => lcaf_checks(eps)?,
            "dlf" => dlf_checks(eps)?,
            "losses" => loss_checks(eps)?,
            _ => model_checks(eps)?,
        });
    }
    Ok(out)
}
