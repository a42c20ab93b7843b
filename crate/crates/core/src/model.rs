//! Full network: edge and body encoders, per-stage fusion, two-level
//! fusion of the outermost stages and a U-shaped decoder.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::body::{window_geometry, BodyConfig, BodyEncoder, TokenGrid};
use crate::dlf::{Dlf, DlfConfig, Inject};
use crate::edge::{EdgeConfig, EdgeEncoder, PdcVariant};
use crate::error::{Error, Result};
use crate::lcaf::{Lcaf, LcafConfig, Residual};
use crate::losses::LossWeights;
use crate::nn::{Builder, Conv2d};
use crate::params::ParamStore;
use crate::rng::seeded;
use crate::tensor::{Real, Tensor};

/// Which optional modules are present. LCAF fuses edge and body features,
/// so it needs the edge encoder; the edge encoder without LCAF fuses by
/// elementwise sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub edge: bool,
    pub lcaf: bool,
    pub dlf: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation { edge: true, lcaf: true, dlf: true };
    pub const BASELINE: Ablation = Ablation { edge: false, lcaf: false, dlf: false };

    /// The ablation ladder, from the single-branch baseline to the full model.
    pub const LADDER: [Ablation; 5] = [
        Ablation::BASELINE,
        Ablation { edge: false, lcaf: false, dlf: true },
        Ablation { edge: true, lcaf: false, dlf: false },
        Ablation { edge: true, lcaf: true, dlf: false },
        Ablation::FULL,
    ];

    pub fn validate(&self) -> Result<()> {
        if self.lcaf && !self.edge {
            return Err(Error::config("LCAF fusion requires the edge encoder"));
        }
        Ok(())
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("baseline")?;
        for (on, tag) in [(self.edge, "ee"), (self.lcaf, "lcaf"), (self.dlf, "dlf")] {
            if on {
                write!(f, "+{tag}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Parses `baseline[+ee][+lcaf][+dlf]` or `full`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(Ablation::FULL);
        }
        let mut parts = s.split('+');
        if parts.next() != Some("baseline") {
            return Err(Error::config(format!("ablation `{s}` must start with `baseline` or be `full`")));
        }
        let mut a = Ablation::BASELINE;
        for p in parts {
            let flag = match p {
                "ee" => &mut a.edge,
                "lcaf" => &mut a.lcaf,
                "dlf" => &mut a.dlf,
                other => return Err(Error::config(format!("unknown ablation module `{other}`"))),
            };
            *flag = true;
        }
        a.validate()?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Channel width C of the first stage.
    pub base_dim: usize,
    pub patch: usize,
    /// Body window M.
    pub window: usize,
    /// LCAF window `(h_l, w_l)`.
    pub lca_window: (usize, usize),
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
    pub relative_bias: bool,
    pub absolute_pos: bool,
    pub pdc_blocks: usize,
    pub pdc_variants: Vec<PdcVariant>,
    pub residual: Residual,
    /// DLF encoder depths S and L.
    pub dlf_depth_s: usize,
    pub dlf_depth_l: usize,
    pub inject: Inject,
    pub num_classes: usize,
    pub ablation: Ablation,
    pub loss: LossWeights,
}

impl ModelConfig {
    /// Small configuration for CPU training on 64×64 images.
    pub fn desk() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            base_dim: 16,
            patch: 4,
            window: 2,
            lca_window: (2, 2),
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            mlp_ratio: 4,
            relative_bias: false,
            absolute_pos: true,
            pdc_blocks: 4,
            pdc_variants: EdgeConfig::default().variants,
            residual: Residual::Body,
            dlf_depth_s: 1,
            dlf_depth_l: 1,
            inject: Inject::Add,
            num_classes: 3,
            ablation: Ablation::FULL,
            loss: LossWeights::default(),
        }
    }

    /// Full-size configuration: 224×224 input, C = 96, 9 classes.
    pub fn paper() -> Self {
        ModelConfig {
            image_h: 224,
            image_w: 224,
            base_dim: 96,
            window: 7,
            lca_window: (7, 7),
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            num_classes: 9,
            ..Self::desk()
        }
    }

    /// Stage `s` grid `(h, w, dim)` shared by both branches.
    pub fn stage_shape(&self, s: usize) -> (usize, usize, usize) {
        let f = self.patch << s;
        (self.image_h / f, self.image_w / f, self.base_dim << s)
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.loss.validate()?;
        let (h, w) = (self.image_h, self.image_w);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!("image {h}x{w} must be a positive multiple of 32")));
        }
        if self.patch == 0 || h % (8 * self.patch) != 0 || w % (8 * self.patch) != 0 {
            return Err(Error::config(format!("image {h}x{w} must be divisible by 8 x patch {}", self.patch)));
        }
        if self.ablation.edge && self.patch != 4 {
            return Err(Error::config("the edge encoder works at 1/4 resolution, so patch must be 4"));
        }
        if self.base_dim == 0 || self.num_classes < 2 || self.mlp_ratio == 0 {
            return Err(Error::config("base_dim, mlp_ratio must be positive and num_classes at least 2"));
        }
        if self.ablation.edge && (self.pdc_blocks == 0 || self.pdc_variants.is_empty()) {
            return Err(Error::config("the edge encoder needs at least one PDC block and variant"));
        }
        if self.lca_window.0 == 0 || self.lca_window.1 == 0 {
            return Err(Error::config("LCAF window must be positive"));
        }
        for s in 0..4 {
            let (gh, gw, d) = self.stage_shape(s);
            if self.heads[s] == 0 || d % self.heads[s] != 0 {
                return Err(Error::config(format!("stage {} dim {d} not divisible by {} heads", s + 1, self.heads[s])));
            }
            window_geometry(gh, gw, self.window, false)?;
            let (lh, lw) = (self.lca_window.0.min(gh), self.lca_window.1.min(gw));
            if self.ablation.lcaf && (gh % lh != 0 || gw % lw != 0) {
                return Err(Error::config(format!("stage {} grid {gh}x{gw} not divisible into {lh}x{lw} LCAF windows", s + 1)));
            }
        }
        if self.ablation.dlf && (self.dlf_depth_s == 0 || self.dlf_depth_l == 0) {
            return Err(Error::config("DLF encoder depths must be at least 1"));
        }
        Ok(())
    }

    fn edge_config(&self) -> EdgeConfig {
        EdgeConfig {
            base_dim: self.base_dim,
            blocks_per_stage: self.pdc_blocks,
            variants: self.pdc_variants.clone(),
        }
    }

    fn body_config(&self) -> BodyConfig {
        BodyConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            patch: self.patch,
            base_dim: self.base_dim,
            depths: self.depths,
            heads: self.heads,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            absolute_pos: self.absolute_pos,
            relative_bias: self.relative_bias,
        }
    }

    fn lcaf_config(&self, s: usize) -> LcafConfig {
        LcafConfig {
            window: self.lca_window,
            heads: self.heads[s],
            residual: self.residual,
            ffn_ratio: self.mlp_ratio,
        }
    }

    fn dlf_config(&self) -> DlfConfig {
        DlfConfig {
            depth_s: self.dlf_depth_s,
            depth_l: self.dlf_depth_l,
            heads_s: self.heads[0],
            heads_l: self.heads[3],
            mlp_ratio: self.mlp_ratio,
            inject: self.inject,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// 2× upsample, concatenate the skip, two 3×3 conv + ReLU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl UpBlock {
    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let x = tape.upsample_nearest(x, 2)?;
        let x = tape.concat(&[x, skip], 2)?;
        let x = self.conv1.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, x)?;
        Ok(tape.relu(x))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub ups: Vec<UpBlock>,
    pub head: Conv2d,
    pub factor: usize,
}

impl Decoder {
    fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, k: usize, factor: usize) -> Result<Self> {
        let mut ups = Vec::with_capacity(3);
        for (i, s) in (0..3).rev().enumerate() {
            let (below, skip) = (c << (s + 1), c << s);
            let mut ub = b.scope(format!("up{}", i + 1));
            ups.push(UpBlock {
                conv1: Conv2d::new(&mut ub.scope("conv1"), below + skip, skip, 3, 1, 1, true)?,
                conv2: Conv2d::new(&mut ub.scope("conv2"), skip, skip, 3, 1, 1, true)?,
            });
        }
        Ok(Decoder {
            ups,
            head: Conv2d::new(&mut b.scope("head"), c, k, 1, 1, 0, true)?,
            factor,
        })
    }

    /// `deep` is the coarsest map; `skips` run from coarse to fine.
    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, deep: Var, skips: [Var; 3]) -> Result<Var> {
        let mut x = deep;
        for (up, skip) in self.ups.iter().zip(skips) {
            x = up.forward(tape, x, skip)?;
        }
        // A 1×1 convolution commutes with nearest upsampling, so project first.
        let logits = self.head.forward(tape, x)?;
        tape.upsample_nearest(logits, self.factor)
    }
}

/// Module layout; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Befunet {
    pub cfg: ModelConfig,
    pub edge: Option<EdgeEncoder>,
    pub body: BodyEncoder,
    pub lcaf: Option<Vec<Lcaf>>,
    pub dlf: Option<Dlf>,
    pub decoder: Decoder,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[H, W, K]`
    pub logits: Var,
    /// Four `[H, W, 1]` maps when the edge encoder is present.
    pub side_edge_maps: Option<[Var; 4]>,
    /// Per-stage fused features before two-level fusion.
    pub fused: [TokenGrid; 4],
}

impl Befunet {
    pub fn build<T: Real>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let edge = if cfg.ablation.edge {
            Some(EdgeEncoder::new(&mut b.scope("edge"), &cfg.edge_config())?)
        } else {
            None
        };
        let body = BodyEncoder::new(&mut b.scope("body"), &cfg.body_config())?;
        let lcaf = if cfg.ablation.lcaf {
            Some(
                (0..4)
                    .map(|s| Lcaf::new(&mut b.scope(format!("lcaf{}", s + 1)), cfg.base_dim << s, &cfg.lcaf_config(s)))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let dlf = if cfg.ablation.dlf {
            Some(Dlf::new(&mut b.scope("dlf"), cfg.stage_shape(0), cfg.stage_shape(3), &cfg.dlf_config())?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut b.scope("decoder"), cfg.base_dim, cfg.num_classes, cfg.patch)?;
        Ok(Befunet { cfg: cfg.clone(), edge, body, lcaf, dlf, decoder })
    }

    /// `image: [H, W, 3]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<ModelOutput> {
        let expect = [self.cfg.image_h, self.cfg.image_w, 3];
        if tape.shape(image) != expect {
            return Err(Error::dim("model", format!("image {:?}, model expects {expect:?}", tape.shape(image))));
        }
        let body = self.body.forward(tape, image)?;
        let edge = match &self.edge {
            Some(enc) => Some(enc.forward(tape, image)?),
            None => None,
        };
        let mut fused = body;
        if let Some(edge) = &edge {
            for s in 0..4 {
                let e = edge[s].features;
                fused[s] = match &self.lcaf {
                    Some(l) => l[s].forward(tape, e, body[s])?,
                    None => {
                        let tokens = tape.add(e.tokens, body[s].tokens)?;
                        TokenGrid { tokens, ..body[s] }
                    }
                };
            }
        }
        let (z_s, z_l) = match &self.dlf {
            Some(dlf) => {
                let out = dlf.forward(tape, fused[0], fused[3])?;
                (out.z_s, out.z_l)
            }
            None => (fused[0], fused[3]),
        };
        let logits = self.decoder.forward(tape, z_l.tokens, [fused[2].tokens, fused[1].tokens, z_s.tokens])?;
        Ok(ModelOutput {
            logits,
            side_edge_maps: edge.map(|e| e.map(|o| o.side_edge_map)),
            fused,
        })
    }
}

/// Layout plus parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub arch: Befunet,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = seeded(seed);
        let arch = Befunet::build(cfg, &mut Builder::new(&mut params, &mut rng))?;
        Ok(Model { arch, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// Logits `[H, W, K]` for one image.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.params);
        let x = tape.input(image);
        let out = self.arch.forward(&mut tape, x)?;
        Ok(tape.tensor(out.logits))
    }

    /// Per-pixel argmax class of [`Model::predict`].
    pub fn segment(&self, image: &Tensor<T>) -> Result<Vec<u8>> {
        let logits = self.predict(image)?;
        let k = self.cfg().num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0 as u8
            })
            .collect())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, DEFAULT_EPS, DEFAULT_TOL};
    use crate::losses::{total_loss, EdgeBalance};
    use crate::rng::uniform;

    fn tiny(h: usize, k: usize, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            image_h: h,
            image_w: h,
            base_dim: 8,
            depths: [2, 2, 2, 2],
            heads: [1, 2, 2, 4],
            pdc_blocks: 2,
            num_classes: k,
            ablation,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn tiny_output_shapes() {
        let cfg = ModelConfig { num_classes: 2, ..ModelConfig::desk() };
        let model = Model::<f32>::new(&cfg, 1).unwrap();
        let img: Tensor<f32> = uniform(&mut seeded(2), &[64, 64, 3], 0.0, 1.0);
        let mut tape = Tape::with_params(&model.params);
        let x = tape.input(&img);
        let out = model.arch.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.logits), &[64, 64, 2]);
        for m in out.side_edge_maps.unwrap() {
            assert_eq!(tape.shape(m), &[64, 64, 1]);
        }
        let probs = tape.softmax(out.logits);
        for row in tape.value(probs).chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn paper_config_logit_shape() {
        let cfg = ModelConfig { depths: [1, 1, 1, 1], pdc_blocks: 1, ..ModelConfig::paper() };
        let model = Model::<f32>::new(&cfg, 3).unwrap();
        let logits = model.predict(&Tensor::full(&[224, 224, 3], 0.5)).unwrap();
        assert_eq!(logits.shape(), &[224, 224, 9]);
    }

    #[test]
    fn ablations_share_shapes_and_differ_by_modules() {
        let img: Tensor<f32> = uniform(&mut seeded(4), &[32, 32, 3], 0.0, 1.0);
        let names = |a: Ablation| -> Vec<String> {
            let m = Model::<f32>::new(&tiny(32, 3, a), 5).unwrap();
            assert_eq!(m.predict(&img).unwrap().shape(), &[32, 32, 3]);
            m.params.iter().map(|(_, n, _)| n.to_string()).collect()
        };
        let has = |names: &[String], prefix: &str| names.iter().any(|n| n.starts_with(prefix));
        for a in Ablation::LADDER {
            let n = names(a);
            assert_eq!(has(&n, "edge."), a.edge, "{a}");
            assert_eq!(has(&n, "lcaf"), a.lcaf, "{a}");
            assert_eq!(has(&n, "dlf."), a.dlf, "{a}");
            assert!(has(&n, "body.") && has(&n, "decoder."));
        }
    }

    #[test]
    fn lcaf_without_edge_is_rejected() {
        let a = Ablation { edge: false, lcaf: true, dlf: false };
        assert!(matches!(Model::<f32>::new(&tiny(32, 2, a), 0), Err(Error::Config(_))));
        assert!("baseline+lcaf".parse::<Ablation>().is_err());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::LADDER {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("full".parse::<Ablation>().unwrap(), Ablation::FULL);
    }

    #[test]
    fn config_rejects_bad_geometry() {
        let bad = [
            ModelConfig { image_h: 48, ..ModelConfig::desk() },
            ModelConfig { patch: 2, ..ModelConfig::desk() },
            ModelConfig { heads: [3, 2, 4, 8], ..ModelConfig::desk() },
            ModelConfig { window: 3, ..ModelConfig::desk() },
            ModelConfig { num_classes: 1, ..ModelConfig::desk() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(32, 3, Ablation::FULL);
        let img: Tensor<f32> = uniform(&mut seeded(6), &[32, 32, 3], 0.0, 1.0);
        let a = Model::<f32>::new(&cfg, 7).unwrap().predict(&img).unwrap();
        let b = Model::<f32>::new(&cfg, 7).unwrap().predict(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_gradcheck() {
        let cfg = ModelConfig { depths: [2, 2, 2, 2], heads: [1, 1, 2, 2], base_dim: 4, ..tiny(32, 3, Ablation::FULL) };
        let mut model = Model::<f64>::new(&cfg, 8).unwrap();
        let mut rng = seeded(9);
        let img: Tensor<f64> = uniform(&mut rng, &[32, 32, 3], 0.0, 1.0);
        let mask: Vec<u8> = (0..32 * 32).map(|i| ((i / 32) / 11) as u8).collect();
        let edge: Vec<f64> = (0..32 * 32).map(|i| if (i / 32) % 11 == 0 { 1.0 } else { 0.0 }).collect();
        let w = cfg.loss;
        let bal = EdgeBalance::from_targets(edge.iter().copied(), w.lambda, w.eta);
        let arch = model.arch.clone();
        let report = check_params(&mut model.params, DEFAULT_EPS, Some(2), &mut seeded(0), |t| {
            let x = t.input(&img);
            let out = arch.forward(t, x)?;
            let maps = out.side_edge_maps.map(|m| m.to_vec());
            Ok(total_loss(t, out.logits, maps.as_deref(), &mask, Some((&edge, bal)), &w)?.total)
        })
        .unwrap();
        assert!(report.passed(DEFAULT_TOL), "{report:?}");
    }
}
