//! Slide-level forward pass: group sampled patches by their region paths,
//! pool bottom-up with the regional module(s), fuse each level's region
//! representations with the per-level global modules, and classify the
//! concatenated slide representation.

use super::modules::{baseline_aggregate, embed_patches, transformer_aggregate};
use super::{Arch, AttentionRecord, BoundParams, ModelConfig, ModelError, Provenance, Scope};
use crate::sampling::SampledBag;
use crate::synthwsi::SlideGrid;
use crate::tensor::ops::sigmoid;
use crate::{Tape, Tensor, Var};

/// Region representations per hierarchy level, bottom (leaves) first.
/// `reps[l-1]` is `[m_l, d]`; `keys[l-1][j]` is the path suffix identifying
/// row `j` (level-`l` keys have `levels - l + 1` components, so the top
/// level is keyed by the top-window index alone).
pub struct PooledLevels {
    pub reps: Vec<Var>,
    pub keys: Vec<Vec<Vec<usize>>>,
}

pub struct ForwardOutput {
    /// Classifier logit, shape `[1, 1]`.
    pub logit: Var,
    /// `sigmoid(logit)`.
    pub prob: f64,
    pub records: Vec<AttentionRecord>,
}

/// Packs the pixels of the addressed patches into a `[n, 3, P, P]` tensor
/// scaled to `[0, 1]`.
pub fn patch_batch(grid: &SlideGrid, coords: &[(usize, usize)]) -> Result<Tensor, ModelError> {
    if coords.is_empty() {
        return Err(ModelError::Structure("empty coordinate list".into()));
    }
    if grid.channels != 3 {
        return Err(ModelError::Structure(format!(
            "slide {} has {} channels, expected 3",
            grid.slide_id, grid.channels
        )));
    }
    let p = grid.patch_px;
    let n = coords.len();
    let mut data = vec![0.0f64; n * 3 * p * p];
    for (i, &(gx, gy)) in coords.iter().enumerate() {
        if gx >= grid.grid_w || gy >= grid.grid_h {
            return Err(ModelError::Structure(format!(
                "coordinate ({gx}, {gy}) outside {}x{} grid",
                grid.grid_w, grid.grid_h
            )));
        }
        let src = grid.patch_pixels(gx, gy);
        for y in 0..p {
            for x in 0..p {
                for ch in 0..3 {
                    data[((i * 3 + ch) * p + y) * p + x] =
                        src[(y * p + x) * 3 + ch] as f64 / 255.0;
                }
            }
        }
    }
    Ok(Tensor::new(&[n, 3, p, p], data)?)
}

/// Pools `[n, d]` patch embeddings bottom-up. Tokens sharing a full path are
/// one leaf group; a level-`l` group's children are the level-`l-1` groups
/// whose key drops to it. Group order is the sorted key order, so the output
/// does not depend on token order.
pub fn hierarchical_aggregate(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelConfig,
    emb: Var,
    coords: &[(usize, usize)],
    paths: &[Vec<usize>],
) -> Result<(PooledLevels, Vec<AttentionRecord>), ModelError> {
    let n = tape.value(emb).shape()[0];
    let levels = cfg.levels();
    if coords.len() != n || paths.len() != n {
        return Err(ModelError::Structure(format!(
            "{n} tokens but {} coords and {} paths",
            coords.len(),
            paths.len()
        )));
    }
    if let Some(bad) = paths.iter().find(|p| p.len() != levels) {
        return Err(ModelError::Structure(format!(
            "path {bad:?} has {} components, expected {levels}",
            bad.len()
        )));
    }

    let mut records = Vec::new();
    let mut reps = Vec::with_capacity(levels);
    let mut all_keys = Vec::with_capacity(levels);

    let mut leaf_keys: Vec<Vec<usize>> = paths.to_vec();
    leaf_keys.sort();
    leaf_keys.dedup();
    let mut rows = Vec::with_capacity(leaf_keys.len());
    for key in &leaf_keys {
        let members: Vec<usize> = (0..n).filter(|&i| &paths[i] == key).collect();
        let tokens = tape.gather_rows(emb, &members)?;
        let keep = vec![true; members.len()];
        let (pooled, attn) =
            transformer_aggregate(tape, bp, &cfg.regional_module(1), cfg, tokens, &keep)?;
        records.push(AttentionRecord {
            scope: Scope::Level(1),
            group_id: key.clone(),
            weights: tape.value(attn).data().to_vec(),
            provenance: members
                .iter()
                .map(|&i| Provenance::Patch(coords[i].0, coords[i].1))
                .collect(),
        });
        rows.push(pooled);
    }
    let mut cur = tape.concat(&rows, 0)?;
    let mut cur_keys = leaf_keys;
    reps.push(cur);
    all_keys.push(cur_keys.clone());

    for level in 2..=levels {
        let mut parents: Vec<Vec<usize>> = cur_keys.iter().map(|k| k[1..].to_vec()).collect();
        parents.sort();
        parents.dedup();
        let mut rows = Vec::with_capacity(parents.len());
        for pk in &parents {
            let children: Vec<usize> = (0..cur_keys.len())
                .filter(|&j| cur_keys[j][1..] == pk[..])
                .collect();
            let tokens = tape.gather_rows(cur, &children)?;
            let keep = vec![true; children.len()];
            let (pooled, attn) =
                transformer_aggregate(tape, bp, &cfg.regional_module(level), cfg, tokens, &keep)?;
            records.push(AttentionRecord {
                scope: Scope::Level(level),
                group_id: pk.clone(),
                weights: tape.value(attn).data().to_vec(),
                provenance: children
                    .iter()
                    .map(|&j| Provenance::Group(cur_keys[j].clone()))
                    .collect(),
            });
            rows.push(pooled);
        }
        cur = tape.concat(&rows, 0)?;
        cur_keys = parents;
        reps.push(cur);
        all_keys.push(cur_keys.clone());
    }

    Ok((
        PooledLevels {
            reps,
            keys: all_keys,
        },
        records,
    ))
}

/// Fuses each level's region representations with that level's global
/// module and concatenates the level tokens into the `[1, L*d]` slide
/// representation.
pub fn global_aggregate(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelConfig,
    levels: &PooledLevels,
) -> Result<(Var, Vec<AttentionRecord>), ModelError> {
    let mut parts = Vec::with_capacity(levels.reps.len());
    let mut records = Vec::new();
    for (idx, (&rep, keys)) in levels.reps.iter().zip(&levels.keys).enumerate() {
        let l = idx + 1;
        let keep = vec![true; keys.len()];
        let (pooled, attn) =
            transformer_aggregate(tape, bp, &format!("global{l}"), cfg, rep, &keep)?;
        records.push(AttentionRecord {
            scope: Scope::Global(l),
            group_id: Vec::new(),
            weights: tape.value(attn).data().to_vec(),
            provenance: keys.iter().map(|k| Provenance::Group(k.clone())).collect(),
        });
        parts.push(pooled);
    }
    let rep = tape.concat(&parts, 1)?;
    Ok((rep, records))
}

/// Linear head over the slide representation: `[1, rep_dim] -> [1, 1]`.
pub fn classify(tape: &mut Tape, bp: &BoundParams, rep: Var) -> Result<Var, ModelError> {
    let w = bp.var("classifier.w")?;
    let b = bp.var("classifier.b")?;
    let z = tape.matmul_nt(rep, w)?;
    Ok(tape.add(z, b)?)
}

/// Full pass from patch embeddings to logit for either architecture.
/// `paths` is ignored by the baseline, which attends over the whole bag.
pub fn forward(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelConfig,
    emb: Var,
    coords: &[(usize, usize)],
    paths: &[Vec<usize>],
) -> Result<ForwardOutput, ModelError> {
    let n = tape.value(emb).shape()[0];
    let (rep, records) = match cfg.arch {
        Arch::Baseline => {
            if coords.len() != n {
                return Err(ModelError::Structure(format!(
                    "{n} tokens but {} coords",
                    coords.len()
                )));
            }
            let keep = vec![true; n];
            let (pooled, attn) = baseline_aggregate(tape, bp, emb, &keep)?;
            let rec = AttentionRecord {
                scope: Scope::Baseline,
                group_id: Vec::new(),
                weights: tape.value(attn).data().to_vec(),
                provenance: coords
                    .iter()
                    .map(|&(gx, gy)| Provenance::Patch(gx, gy))
                    .collect(),
            };
            (pooled, vec![rec])
        }
        Arch::Hierarchical => {
            let (levels, mut records) =
                hierarchical_aggregate(tape, bp, cfg, emb, coords, paths)?;
            let (rep, global_records) = global_aggregate(tape, bp, cfg, &levels)?;
            records.extend(global_records);
            (rep, records)
        }
    };
    let logit = classify(tape, bp, rep)?;
    let prob = sigmoid(tape.value(logit).data()[0]);
    Ok(ForwardOutput {
        logit,
        prob,
        records,
    })
}

/// Embeds the bag's patches from slide pixels and runs [`forward`].
pub fn forward_bag(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelConfig,
    grid: &SlideGrid,
    bag: &SampledBag,
) -> Result<ForwardOutput, ModelError> {
    let px = patch_batch(grid, &bag.coords)?;
    let x = tape.constant(px);
    let emb = embed_patches(tape, bp, cfg, x)?;
    forward(tape, bp, cfg, emb, &bag.coords, &bag.group_paths)
}
