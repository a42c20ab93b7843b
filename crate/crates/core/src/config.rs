//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. A `profile` key (`desk`
//! or `paper`) picks the defaults every other key overrides, wherever it
//! appears in the file. Unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::edge::PdcVariant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "BEFUNET_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Parse {
                key: "profile".into(),
                message: format!("expected desk or paper, got `{s}`"),
            }),
        }
    }
}

impl Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Desk => (ModelConfig::desk(), TrainConfig::default()),
            Profile::Paper => (
                ModelConfig::paper(),
                TrainConfig {
                    epochs: 80,
                    batch_size: 24,
                    lr: 0.01,
                    ..TrainConfig::default()
                },
            ),
        };
        RunConfig {
            profile,
            model,
            train,
            train_manifest: None,
            val_manifest: None,
            out_dir: PathBuf::from("runs"),
        }
    }

    /// Parses config text and validates the model geometry.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                key: format!("line {}", n + 1),
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            pairs.push((k.trim(), v.trim()));
        }
        let profile = match pairs.iter().rev().find(|(k, _)| *k == "profile") {
            Some((_, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = RunConfig::for_profile(profile);
        let mut seen = std::collections::HashSet::new();
        for (k, v) in pairs {
            if !seen.insert(k) {
                return Err(Error::Parse {
                    key: k.into(),
                    message: "key given twice".into(),
                });
            }
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the
    /// environment, if set.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&fs::read_to_string(path)?)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = parse_value(SEED_ENV, v)?;
        }
        Ok(())
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_h" => m.image_h = parse_value(key, value)?,
            "image_w" => m.image_w = parse_value(key, value)?,
            "base_dim" => m.base_dim = parse_value(key, value)?,
            "patch" => m.patch = parse_value(key, value)?,
            "window" => m.window = parse_value(key, value)?,
            "lca_window_h" => m.lca_window.0 = parse_value(key, value)?,
            "lca_window_w" => m.lca_window.1 = parse_value(key, value)?,
            "depths" => m.depths = parse_array(key, value)?,
            "heads" => m.heads = parse_array(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_value(key, value)?,
            "relative_bias" => m.relative_bias = parse_value(key, value)?,
            "absolute_pos" => m.absolute_pos = parse_value(key, value)?,
            "pdc_blocks" => m.pdc_blocks = parse_value(key, value)?,
            "pdc_variants" => m.pdc_variants = parse_list::<PdcVariant>(key, value)?,
            "residual" => m.residual = parse_value(key, value)?,
            "dlf_depth_s" => m.dlf_depth_s = parse_value(key, value)?,
            "dlf_depth_l" => m.dlf_depth_l = parse_value(key, value)?,
            "inject" => m.inject = parse_value(key, value)?,
            "num_classes" => m.num_classes = parse_value(key, value)?,
            "ablation" => m.ablation = parse_value(key, value)?,
            "loss_bce" => m.loss.bce = parse_value(key, value)?,
            "loss_dice" => m.loss.dice = parse_value(key, value)?,
            "loss_edge" => m.loss.edge = parse_value(key, value)?,
            "edge_lambda" => m.loss.lambda = parse_value(key, value)?,
            "edge_eta" => m.loss.eta = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "train_manifest" => self.train_manifest = Some(PathBuf::from(value)),
            "val_manifest" => self.val_manifest = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Parse {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Every key, in a form [`RunConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let variants = m.pdc_variants.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("profile = {}", self.profile),
            format!("image_h = {}", m.image_h),
            format!("image_w = {}", m.image_w),
            format!("base_dim = {}", m.base_dim),
            format!("patch = {}", m.patch),
            format!("window = {}", m.window),
            format!("lca_window_h = {}", m.lca_window.0),
            format!("lca_window_w = {}", m.lca_window.1),
            format!("depths = {}", join(&m.depths)),
            format!("heads = {}", join(&m.heads)),
            format!("mlp_ratio = {}", m.mlp_ratio),
            format!("relative_bias = {}", m.relative_bias),
            format!("absolute_pos = {}", m.absolute_pos),
            format!("pdc_blocks = {}", m.pdc_blocks),
            format!("pdc_variants = {variants}"),
            format!("residual = {}", m.residual),
            format!("dlf_depth_s = {}", m.dlf_depth_s),
            format!("dlf_depth_l = {}", m.dlf_depth_l),
            format!("inject = {}", m.inject),
            format!("num_classes = {}", m.num_classes),
            format!("ablation = {}", m.ablation),
            format!("loss_bce = {:?}", m.loss.bce),
            format!("loss_dice = {:?}", m.loss.dice),
            format!("loss_edge = {:?}", m.loss.edge),
            format!("edge_lambda = {:?}", m.loss.lambda),
            format!("edge_eta = {:?}", m.loss.eta),
            format!("epochs = {}", t.epochs),
            format!("batch_size = {}", t.batch_size),
            format!("lr = {:?}", t.lr),
            format!("weight_decay = {:?}", t.weight_decay),
            format!("seed = {}", t.seed),
        ];
        if let Some(p) = &self.train_manifest {
            lines.push(format!("train_manifest = {}", p.display()));
        }
        if let Some(p) = &self.val_manifest {
            lines.push(format!("val_manifest = {}", p.display()));
        }
        lines.push(format!("out_dir = {}", self.out_dir.display()));
        lines.join("\n") + "\n"
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| Error::Parse {
        key: key.into(),
        message: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_array(key: &str, value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into().map_err(|v: Vec<usize>| Error::Parse {
        key: key.into(),
        message: format!("expected 4 values, got {}", v.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_desk_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::for_profile(Profile::Desk));
    }

    #[test]
    fn profile_applies_before_overrides() {
        let cfg = RunConfig::parse("epochs = 3\nprofile = paper\n").unwrap();
        assert_eq!(cfg.model.base_dim, 96);
        assert_eq!(cfg.train.batch_size, 24);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("colour = red", "colour"),
            ("epochs = many", "epochs"),
            ("depths = 2,2,2", "depths"),
            ("pdc_variants = cd,xx", "pdc_variants"),
            ("lr = 0.1\nlr = 0.2", "lr"),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Parse { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn geometry_checked_at_parse_time() {
        assert!(matches!(RunConfig::parse("image_h = 48"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::parse("seed = 1").unwrap();
        cfg.apply_seed_override(Some("77")).unwrap();
        assert_eq!(cfg.train.seed, 77);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
    }
}
