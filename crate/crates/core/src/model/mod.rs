//! The learnable pipeline: conv patch embedder, Transformer aggregation
//! modules with a class token, hierarchical pooling, global fusion, linear
//! classifier — plus the projection-free attention baseline.
//!
//! Parameters live in a [`ParamSet`] (ordered name -> tensor); a forward pass
//! binds them onto a tape as leaves (training) or constants (inference) and
//! builds the graph per bag.

pub mod forward;
pub mod modules;

pub use forward::{
    classify, forward, forward_bag, global_aggregate, hierarchical_aggregate, patch_batch,
    ForwardOutput, PooledLevels,
};
pub use modules::{baseline_aggregate, embed_patches, transformer_aggregate};

use std::collections::HashMap;

use thiserror::Error;

use crate::rng::StreamRng;
use crate::sampling::RegionSpec;
use crate::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter {name} is not in the set")]
    MissingParam { name: String },
    #[error("patch batch shape {got:?} does not match [n, 3, {patch_px}, {patch_px}]")]
    PatchShape { got: Vec<usize>, patch_px: usize },
    #[error("{context}: every token is masked")]
    DegenerateRegion { context: String },
    #[error("inconsistent group structure: {0}")]
    Structure(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Projection-free attention over the whole bag (the MIL baseline).
    Baseline,
    /// Regional/hierarchical Transformer aggregation.
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub mlp_ratio: usize,
    pub patch_px: usize,
    pub spec: RegionSpec,
    pub share_regional_weights: bool,
}

impl ModelConfig {
    pub fn hierarchical(spec: RegionSpec) -> ModelConfig {
        ModelConfig {
            arch: Arch::Hierarchical,
            embed_dim: 64,
            heads: 4,
            encoder_layers: 1,
            mlp_ratio: 2,
            patch_px: 16,
            spec,
            share_regional_weights: true,
        }
    }

    pub fn baseline() -> ModelConfig {
        ModelConfig {
            arch: Arch::Baseline,
            ..ModelConfig::hierarchical(RegionSpec::new(2, 1).unwrap())
        }
    }

    pub fn levels(&self) -> usize {
        self.spec.levels
    }

    /// Slide-representation width fed to the classifier.
    pub fn rep_dim(&self) -> usize {
        match self.arch {
            Arch::Baseline => self.embed_dim,
            Arch::Hierarchical => self.levels() * self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.encoder_layers < 1 {
            return Err(ModelError::Config("encoder_layers must be >= 1".into()));
        }
        if self.mlp_ratio < 1 {
            return Err(ModelError::Config("mlp_ratio must be >= 1".into()));
        }
        if self.patch_px < 7 {
            return Err(ModelError::Config(format!(
                "patch_px {} too small for the two-conv embedder (minimum 7)",
                self.patch_px
            )));
        }
        Ok(())
    }

    /// Name of the regional module used at `level` (1-based).
    pub fn regional_module(&self, level: usize) -> String {
        if self.share_regional_weights {
            "regional".to_string()
        } else {
            format!("regional{level}")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scope {
    /// Regional pooling at a hierarchy level (1 = leaf).
    Level(usize),
    /// Global fusion module for one level's embeddings.
    Global(usize),
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// Grid coordinates of a patch token.
    Patch(usize, usize),
    /// Path key of a pooled child group.
    Group(Vec<usize>),
}

/// Head-averaged class-token attention for one pooling step. Weights cover
/// the unmasked tokens only and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub scope: Scope,
    pub group_id: Vec<usize>,
    pub weights: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

/// Ordered, named parameter tensors. Names and tensors stay aligned so the
/// optimizer can take the tensors as one contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Initializes all parameters for the config. Each tensor draws from its
    /// own stream keyed by the parameter name, so values do not depend on
    /// enumeration order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParamSet, ModelError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut ps = ParamSet::new();
        let add_kaiming = |ps: &mut ParamSet, name: &str, shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = StreamRng::new(seed, &format!("init/{name}"));
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
            ps.push(name, Tensor::new(shape, data).unwrap());
        };
        let add_zeros = |ps: &mut ParamSet, name: &str, shape: &[usize]| {
            ps.push(name, Tensor::zeros(shape));
        };
        let add_ones = |ps: &mut ParamSet, name: &str, shape: &[usize]| {
            ps.push(name, Tensor::full(shape, 1.0));
        };
        let add_cls = |ps: &mut ParamSet, name: &str| {
            let mut rng = StreamRng::new(seed, &format!("init/{name}"));
            let data: Vec<f64> = (0..d).map(|_| rng.normal() * 0.02).collect();
            ps.push(name, Tensor::new(&[1, d], data).unwrap());
        };

        // embedder: conv(3->16, k3, s1) relu conv(16->32, k3, s2) relu
        // mean-pool linear(32->d)
        add_kaiming(&mut ps, "embedder.conv1.w", &[16, 3, 3, 3], 27);
        add_zeros(&mut ps, "embedder.conv1.b", &[16]);
        add_kaiming(&mut ps, "embedder.conv2.w", &[32, 16, 3, 3], 144);
        add_zeros(&mut ps, "embedder.conv2.b", &[32]);
        add_kaiming(&mut ps, "embedder.proj.w", &[d, 32], 32);
        add_zeros(&mut ps, "embedder.proj.b", &[d]);

        let add_module = |ps: &mut ParamSet, prefix: &str| {
            for i in 0..cfg.encoder_layers {
                let lp = format!("{prefix}.layer{i}");
                add_ones(ps, &format!("{lp}.ln1.g"), &[d]);
                add_zeros(ps, &format!("{lp}.ln1.b"), &[d]);
                for w in ["wq", "wk", "wv", "wo"] {
                    add_kaiming(ps, &format!("{lp}.{w}"), &[d, d], d);
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    add_zeros(ps, &format!("{lp}.{b}"), &[d]);
                }
                add_ones(ps, &format!("{lp}.ln2.g"), &[d]);
                add_zeros(ps, &format!("{lp}.ln2.b"), &[d]);
                let hidden = cfg.mlp_ratio * d;
                add_kaiming(ps, &format!("{lp}.mlp.w1"), &[hidden, d], d);
                add_zeros(ps, &format!("{lp}.mlp.b1"), &[hidden]);
                add_kaiming(ps, &format!("{lp}.mlp.w2"), &[d, hidden], hidden);
                add_zeros(ps, &format!("{lp}.mlp.b2"), &[d]);
            }
            add_cls(ps, &format!("{prefix}.cls"));
        };

        match cfg.arch {
            Arch::Baseline => {
                add_cls(&mut ps, "baseline.cls");
            }
            Arch::Hierarchical => {
                if cfg.share_regional_weights {
                    add_module(&mut ps, "regional");
                } else {
                    for l in 1..=cfg.levels() {
                        add_module(&mut ps, &format!("regional{l}"));
                    }
                }
                for l in 1..=cfg.levels() {
                    add_module(&mut ps, &format!("global{l}"));
                }
            }
        }

        let rep = cfg.rep_dim();
        add_kaiming(&mut ps, "classifier.w", &[1, rep], rep);
        add_zeros(&mut ps, "classifier.b", &[1, 1]);
        Ok(ps)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Parameters bound onto one tape.
pub struct BoundParams {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })
    }

    /// Var for each parameter, aligned with the set's order.
    pub fn ordered_vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Binds every parameter as a leaf (trainable) or constant.
pub fn bind_params(tape: &mut Tape, ps: &ParamSet, trainable: bool) -> BoundParams {
    let vars = ps
        .tensors
        .iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    BoundParams {
        index: ps.index.clone(),
        vars,
    }
}

/// Binds overridden names to supplied vars and the rest as constants — used
/// by finite-difference tests to differentiate one tensor at a time.
pub fn bind_params_with(
    tape: &mut Tape,
    ps: &ParamSet,
    overrides: &[(&str, Var)],
) -> BoundParams {
    let vars = ps
        .iter()
        .map(|(name, t)| {
            overrides
                .iter()
                .find(|(n, _)| *n == name)
                .map(|&(_, v)| v)
                .unwrap_or_else(|| tape.constant(t.clone()))
        })
        .collect();
    BoundParams {
        index: ps.index.clone(),
        vars,
    }
}
