//! Flat `key=value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys may not repeat. Commands reject keys they do not understand, except
//! `evaluate`, which reads only the model keys out of a full training config.

use crate::errors::CliError;
use hmil_core::model::{Arch, ModelConfig};
use hmil_core::sampling::{RegionSpec, SamplerConfig};
use hmil_core::synthwsi::{GenConfig, Profile};
use hmil_core::train::TrainConfig;
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug)]
pub struct Config {
    path: PathBuf,
    map: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io("read", path, e))?;
        Config::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Config, CliError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(CliError::Config(format!(
                    "{}:{}: empty key",
                    path.display(),
                    i + 1
                )));
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!(
                    "{}:{}: duplicate key `{key}`",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(Config {
            path: path.to_path_buf(),
            map,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    /// Required key, parsed; the error names the key.
    pub fn req<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.raw(key).ok_or_else(|| {
            CliError::Config(format!("{}: missing key `{key}`", self.path.display()))
        })?;
        self.parse_as(key, v)
    }

    /// Optional key with a default.
    pub fn opt<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            Some(v) => self.parse_as(key, v),
            None => Ok(default),
        }
    }

    fn parse_as<T>(&self, key: &str, v: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        v.parse::<T>().map_err(|e| {
            CliError::Config(format!(
                "{}: key `{key}`: cannot parse {v:?}: {e}",
                self.path.display()
            ))
        })
    }

    /// Errors on any key that no reader consumed (catches typos).
    pub fn reject_unknown(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        for key in self.map.keys() {
            if !used.contains(key) {
                return Err(CliError::Config(format!(
                    "{}: unknown key `{key}`",
                    self.path.display()
                )));
            }
        }
        Ok(())
    }
}

/// `generate` config: dataset profile and geometry.
pub fn gen_config(kv: &Config) -> Result<GenConfig, CliError> {
    let profile: String = kv.req("profile")?;
    let profile = match profile.as_str() {
        "micro" => Profile::Micro,
        "macro" => Profile::Macro,
        other => {
            return Err(CliError::Config(format!(
                "profile must be `micro` or `macro`, got {other:?}"
            )))
        }
    };
    let n_slides: usize = kv.req("n_slides")?;
    let mut cfg = match profile {
        Profile::Micro => GenConfig::micro("micro", n_slides),
        Profile::Macro => GenConfig::macro_rings("macro", n_slides),
    };
    cfg.name = kv.opt("name", cfg.name.clone())?;
    cfg.grid_w = kv.opt("grid_w", cfg.grid_w)?;
    cfg.grid_h = kv.opt("grid_h", cfg.grid_h)?;
    cfg.patch_px = kv.opt("patch_px", cfg.patch_px)?;
    cfg.positive_fraction = kv.opt("positive_fraction", cfg.positive_fraction)?;
    cfg.split_train = kv.opt("split_train", cfg.split_train)?;
    cfg.split_val = kv.opt("split_val", cfg.split_val)?;
    cfg.split_test = kv.opt("split_test", cfg.split_test)?;
    cfg.threshold = kv.opt("threshold", cfg.threshold)?;
    kv.reject_unknown()?;
    cfg.validate()?;
    Ok(cfg)
}

fn region_spec(kv: &Config) -> Result<RegionSpec, CliError> {
    let s: usize = kv.req("s")?;
    let levels: usize = kv.req("levels")?;
    let patches_per_leaf: usize = kv.opt("patches_per_leaf", 4)?;
    let children_per_level: usize = kv.opt("children_per_level", 4)?;
    Ok(RegionSpec::with_counts(
        s,
        levels,
        patches_per_leaf,
        children_per_level,
    )?)
}

/// Model half of a training config. `evaluate` stops here and ignores the
/// training keys, so a checkpoint's training config can be reused verbatim.
pub fn model_config(kv: &Config) -> Result<ModelConfig, CliError> {
    let arch: String = kv.req("arch")?;
    let mut cfg = match arch.as_str() {
        "baseline" => ModelConfig::baseline(),
        "hierarchical" => ModelConfig::hierarchical(region_spec(kv)?),
        other => {
            return Err(CliError::Config(format!(
                "arch must be `baseline` or `hierarchical`, got {other:?}"
            )))
        }
    };
    cfg.embed_dim = kv.opt("embed_dim", cfg.embed_dim)?;
    cfg.heads = kv.opt("heads", cfg.heads)?;
    cfg.encoder_layers = kv.opt("encoder_layers", cfg.encoder_layers)?;
    cfg.mlp_ratio = kv.opt("mlp_ratio", cfg.mlp_ratio)?;
    cfg.patch_px = kv.opt("patch_px", cfg.patch_px)?;
    cfg.share_regional_weights = kv.opt("share_regional_weights", cfg.share_regional_weights)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Full training config: model, sampler, and optimization keys.
pub fn train_config(kv: &Config, seed: u64) -> Result<(ModelConfig, TrainConfig), CliError> {
    let mcfg = model_config(kv)?;
    let sampler: String = kv.req("sampler")?;
    let sampler = match sampler.as_str() {
        "global" => SamplerConfig::Global {
            n: kv.req("bag_patches")?,
        },
        "regional" => SamplerConfig::Regional {
            spec: region_spec(kv)?,
            n_regions: kv.req("n_regions")?,
        },
        "hierarchical" => SamplerConfig::Hierarchical {
            spec: region_spec(kv)?,
            n_top: kv.req("n_top")?,
        },
        other => {
            return Err(CliError::Config(format!(
                "sampler must be `global`, `regional`, or `hierarchical`, got {other:?}"
            )))
        }
    };
    if mcfg.arch == Arch::Hierarchical && matches!(sampler, SamplerConfig::Global { .. }) {
        return Err(CliError::Config(
            "a hierarchical model needs grouped bags; use sampler=regional or \
             sampler=hierarchical"
                .into(),
        ));
    }
    if let (SamplerConfig::Regional { spec, .. } | SamplerConfig::Hierarchical { spec, .. }, true) =
        (&sampler, mcfg.arch == Arch::Hierarchical)
    {
        if spec.s != mcfg.spec.s || spec.levels != mcfg.spec.levels {
            return Err(CliError::Config(format!(
                "sampler window (S={}, levels={}) must match the model (S={}, levels={})",
                spec.s, spec.levels, mcfg.spec.s, mcfg.spec.levels
            )));
        }
    }

    let mut tcfg = TrainConfig::new(sampler, seed);
    tcfg.epochs = kv.opt("epochs", tcfg.epochs)?;
    tcfg.lr = kv.opt("lr", tcfg.lr)?;
    tcfg.batch_size = kv.opt("batch_size", tcfg.batch_size)?;
    tcfg.weight_decay = kv.opt("weight_decay", tcfg.weight_decay)?;
    tcfg.augment = kv.opt("augment", tcfg.augment)?;
    kv.reject_unknown()?;
    tcfg.validate().map_err(CliError::from)?;
    Ok((mcfg, tcfg))
}

/// One Monte Carlo coverage strategy from a key prefix.
#[derive(Debug)]
pub struct CoverageStrategy {
    pub name: String,
    pub sampler: SamplerConfig,
}

#[derive(Debug)]
pub struct CoverageSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    /// ROI rectangle in patch coordinates: x, y, width, height.
    pub roi: (usize, usize, usize, usize),
    pub strategies: Vec<CoverageStrategy>,
}

/// `coverage` config: grid, ROI rectangle, and one strategy per key group
/// (`global_n`, `regional_*`, `hier_*`).
pub fn coverage_config(kv: &Config) -> Result<CoverageSpec, CliError> {
    let grid_w: usize = kv.req("grid_w")?;
    let grid_h: usize = kv.req("grid_h")?;
    let roi = (
        kv.req("roi_x")?,
        kv.req("roi_y")?,
        kv.req("roi_w")?,
        kv.req("roi_h")?,
    );
    if roi.2 == 0 || roi.3 == 0 {
        return Err(CliError::Config("ROI must have a positive size".into()));
    }
    if roi.0 + roi.2 > grid_w || roi.1 + roi.3 > grid_h {
        return Err(CliError::Config(format!(
            "ROI {}x{} at ({},{}) leaves the {grid_w}x{grid_h} grid",
            roi.2, roi.3, roi.0, roi.1
        )));
    }

    let mut strategies = Vec::new();
    if kv.has("global_n") {
        strategies.push(CoverageStrategy {
            name: "global".into(),
            sampler: SamplerConfig::Global {
                n: kv.req("global_n")?,
            },
        });
    }
    if kv.has("regional_s") {
        let spec = RegionSpec::with_counts(
            kv.req("regional_s")?,
            kv.req("regional_levels")?,
            kv.opt("regional_patches_per_leaf", 4)?,
            4,
        )?;
        strategies.push(CoverageStrategy {
            name: "regional".into(),
            sampler: SamplerConfig::Regional {
                spec,
                n_regions: kv.req("regional_n_regions")?,
            },
        });
    }
    if kv.has("hier_s") {
        let spec = RegionSpec::with_counts(
            kv.req("hier_s")?,
            kv.req("hier_levels")?,
            kv.opt("hier_patches_per_leaf", 4)?,
            kv.opt("hier_children_per_level", 4)?,
        )?;
        strategies.push(CoverageStrategy {
            name: "hierarchical".into(),
            sampler: SamplerConfig::Hierarchical {
                spec,
                n_top: kv.req("hier_n_top")?,
            },
        });
    }
    if strategies.is_empty() {
        return Err(CliError::Config(
            "no strategy keys found; set global_n, regional_s, or hier_s".into(),
        ));
    }
    kv.reject_unknown()?;
    Ok(CoverageSpec {
        grid_w,
        grid_h,
        roi,
        strategies,
    })
}
