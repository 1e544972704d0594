//! Building blocks: the conv patch embedder, the Transformer aggregation
//! module with a class-token read-out, and the projection-free attention
//! baseline.

use super::{BoundParams, ModelConfig, ModelError};
use crate::{Tape, Var};

const LN_EPS: f64 = 1e-5;

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let h = tape.matmul_nt(x, w)?;
    Ok(tape.add_row(h, b)?)
}

fn require_keep(keep: &[bool], n: usize, context: &str) -> Result<(), ModelError> {
    if keep.len() != n {
        return Err(ModelError::Structure(format!(
            "{context}: keep mask has {} entries for {n} tokens",
            keep.len()
        )));
    }
    if !keep.iter().any(|&k| k) {
        return Err(ModelError::DegenerateRegion {
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Embeds a `[n, 3, P, P]` pixel batch into `[n, d]` token vectors:
/// conv3x3(3->16, stride 1), ReLU, conv3x3(16->32, stride 2), ReLU,
/// spatial mean, linear 32->d.
pub fn embed_patches(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var, ModelError> {
    let shape = tape.value(x).shape().to_vec();
    let p = cfg.patch_px;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != p || shape[3] != p {
        return Err(ModelError::PatchShape {
            got: shape,
            patch_px: p,
        });
    }
    let w1 = bp.var("embedder.conv1.w")?;
    let b1 = bp.var("embedder.conv1.b")?;
    let w2 = bp.var("embedder.conv2.w")?;
    let b2 = bp.var("embedder.conv2.b")?;
    let h = tape.conv2d(x, w1, b1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, w2, b2, 2)?;
    let h = tape.relu(h)?;
    let h = tape.spatial_mean(h)?; // [n, 32]
    linear(tape, h, bp.var("embedder.proj.w")?, bp.var("embedder.proj.b")?)
}

/// One pre-norm self-attention + MLP encoder block over `[n, d]` tokens.
/// Keys at padded positions (keep = false) are excluded from every softmax.
fn encoder_block(
    tape: &mut Tape,
    bp: &BoundParams,
    lp: &str,
    cfg: &ModelConfig,
    x: Var,
    keep: &[bool],
) -> Result<Var, ModelError> {
    let n = keep.len();
    let d = cfg.embed_dim;
    let dh = d / cfg.heads;
    let xn = {
        let g = bp.var(&format!("{lp}.ln1.g"))?;
        let b = bp.var(&format!("{lp}.ln1.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)?
    };
    let q = linear(tape, xn, bp.var(&format!("{lp}.wq"))?, bp.var(&format!("{lp}.bq"))?)?;
    let k = linear(tape, xn, bp.var(&format!("{lp}.wk"))?, bp.var(&format!("{lp}.bk"))?)?;
    let v = linear(tape, xn, bp.var(&format!("{lp}.wv"))?, bp.var(&format!("{lp}.bv"))?)?;
    // Column mask replicated across rows: every query attends to kept keys.
    let mask: Vec<bool> = (0..n * n).map(|i| keep[i % n]).collect();
    let mut heads = Vec::with_capacity(cfg.heads);
    for j in 0..cfg.heads {
        let qj = tape.slice_cols(q, j * dh, dh)?;
        let kj = tape.slice_cols(k, j * dh, dh)?;
        let vj = tape.slice_cols(v, j * dh, dh)?;
        let scores = tape.matmul_nt(qj, kj)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.masked_softmax(scores, &mask, 1)?;
        heads.push(tape.matmul(attn, vj)?);
    }
    let cat = tape.concat(&heads, 1)?;
    let out = linear(tape, cat, bp.var(&format!("{lp}.wo"))?, bp.var(&format!("{lp}.bo"))?)?;
    let x = tape.add(x, out)?;
    let xn2 = {
        let g = bp.var(&format!("{lp}.ln2.g"))?;
        let b = bp.var(&format!("{lp}.ln2.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)?
    };
    let h1 = linear(tape, xn2, bp.var(&format!("{lp}.mlp.w1"))?, bp.var(&format!("{lp}.mlp.b1"))?)?;
    let h1 = tape.gelu(h1)?;
    let h2 = linear(tape, h1, bp.var(&format!("{lp}.mlp.w2"))?, bp.var(&format!("{lp}.mlp.b2"))?)?;
    Ok(tape.add(x, h2)?)
}

/// Pools `[n, d]` tokens into a single `[1, d]` vector with the module named
/// by `prefix`. All encoder layers but the last run full self-attention over
/// the tokens; the last layer computes only the class-token query against
/// them (the class token is not among its own keys). Returns the pooled
/// vector and the head-averaged class-token attention `[1, n]`, which is
/// exactly zero at masked positions and sums to one over kept ones.
pub fn transformer_aggregate(
    tape: &mut Tape,
    bp: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    tokens: Var,
    keep: &[bool],
) -> Result<(Var, Var), ModelError> {
    let shape = tape.value(tokens).shape().to_vec();
    let d = cfg.embed_dim;
    if shape.len() != 2 || shape[1] != d {
        return Err(ModelError::Structure(format!(
            "{prefix}: tokens shape {shape:?}, expected [n, {d}]"
        )));
    }
    let n = shape[0];
    require_keep(keep, n, prefix)?;
    let dh = d / cfg.heads;

    let mut x = tokens;
    for i in 0..cfg.encoder_layers - 1 {
        x = encoder_block(tape, bp, &format!("{prefix}.layer{i}"), cfg, x, keep)?;
    }

    let lp = format!("{prefix}.layer{}", cfg.encoder_layers - 1);
    let cls = bp.var(&format!("{prefix}.cls"))?;
    let ln1g = bp.var(&format!("{lp}.ln1.g"))?;
    let ln1b = bp.var(&format!("{lp}.ln1.b"))?;
    let cn = tape.layer_norm(cls, ln1g, ln1b, LN_EPS)?;
    let xn = tape.layer_norm(x, ln1g, ln1b, LN_EPS)?;
    let q = linear(tape, cn, bp.var(&format!("{lp}.wq"))?, bp.var(&format!("{lp}.bq"))?)?;
    let k = linear(tape, xn, bp.var(&format!("{lp}.wk"))?, bp.var(&format!("{lp}.bk"))?)?;
    let v = linear(tape, xn, bp.var(&format!("{lp}.wv"))?, bp.var(&format!("{lp}.bv"))?)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut head_attns = Vec::with_capacity(cfg.heads);
    for j in 0..cfg.heads {
        let qj = tape.slice_cols(q, j * dh, dh)?;
        let kj = tape.slice_cols(k, j * dh, dh)?;
        let vj = tape.slice_cols(v, j * dh, dh)?;
        let scores = tape.matmul_nt(qj, kj)?; // [1, n]
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.masked_softmax(scores, keep, 1)?;
        head_attns.push(attn);
        heads.push(tape.matmul(attn, vj)?);
    }
    let cat = tape.concat(&heads, 1)?;
    let out = linear(tape, cat, bp.var(&format!("{lp}.wo"))?, bp.var(&format!("{lp}.bo"))?)?;
    // Residual comes from the raw class token.
    let z = tape.add(cls, out)?;
    let zn = {
        let g = bp.var(&format!("{lp}.ln2.g"))?;
        let b = bp.var(&format!("{lp}.ln2.b"))?;
        tape.layer_norm(z, g, b, LN_EPS)?
    };
    let h1 = linear(tape, zn, bp.var(&format!("{lp}.mlp.w1"))?, bp.var(&format!("{lp}.mlp.b1"))?)?;
    let h1 = tape.gelu(h1)?;
    let h2 = linear(tape, h1, bp.var(&format!("{lp}.mlp.w2"))?, bp.var(&format!("{lp}.mlp.b2"))?)?;
    let pooled = tape.add(z, h2)?;

    let stacked = tape.concat(&head_attns, 0)?; // [heads, n]
    let attn_avg = tape.mean_axis(stacked, 0)?; // [1, n]
    Ok((pooled, attn_avg))
}

/// Projection-free attention pooling: scores are raw dot products between a
/// learned class vector and the token embeddings, softmax-normalized without
/// scaling. Returns the pooled `[1, d]` vector and the weights `[1, n]`.
pub fn baseline_aggregate(
    tape: &mut Tape,
    bp: &BoundParams,
    tokens: Var,
    keep: &[bool],
) -> Result<(Var, Var), ModelError> {
    let n = tape.value(tokens).shape()[0];
    require_keep(keep, n, "baseline")?;
    let cls = bp.var("baseline.cls")?; // [1, d]
    let scores = tape.matmul_nt(cls, tokens)?; // [1, n]
    let attn = tape.masked_softmax(scores, keep, 1)?;
    let pooled = tape.matmul(attn, tokens)?;
    Ok((pooled, attn))
}
