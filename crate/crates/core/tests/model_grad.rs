//! Gradient correctness of the full model graph: finite differences through
//! embedder + aggregation + classifier, and the weight-sharing identity
//! (shared regional gradient = sum of per-level gradients).

use std::collections::HashMap;

use hmil_core::model::{
    bind_params, bind_params_with, embed_patches, forward, ModelConfig, ParamSet,
};
use hmil_core::rng::StreamRng;
use hmil_core::sampling::RegionSpec;
use hmil_core::tensor::gradcheck::finite_diff_check;
use hmil_core::{Tape, Tensor, TensorError, Var};

fn toy_cfg(levels: usize) -> ModelConfig {
    let mut cfg = ModelConfig::hierarchical(RegionSpec::new(2, levels).unwrap());
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.patch_px = 7;
    cfg
}

fn rand_t(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn toy_bag() -> (Vec<(usize, usize)>, Vec<Vec<usize>>) {
    let coords = vec![(0, 0), (1, 0), (2, 0), (3, 1), (0, 2), (1, 2)];
    let paths = vec![
        vec![0, 0],
        vec![0, 0],
        vec![1, 0],
        vec![1, 0],
        vec![0, 1],
        vec![1, 1],
    ];
    (coords, paths)
}

#[test]
fn fd_hierarchical_end_to_end() {
    let cfg = toy_cfg(2);
    let ps = ParamSet::init(&cfg, 42).unwrap();
    let names = [
        "embedder.conv1.w",
        "embedder.proj.b",
        "regional.layer0.wq",
        "regional.cls",
        "global2.layer0.mlp.w2",
        "classifier.w",
    ];
    let inputs: Vec<Tensor> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
    let mut rng = StreamRng::new(1, "px");
    let px = rand_t(&mut rng, &[6, 3, 7, 7], 0.0, 1.0);
    let (coords, paths) = toy_bag();

    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let overrides: Vec<(&str, Var)> =
            names.iter().zip(vars).map(|(&n, &v)| (n, v)).collect();
        let bp = bind_params_with(tape, &ps, &overrides);
        let x = tape.constant(px.clone());
        let emb = embed_patches(tape, &bp, &cfg, x).unwrap();
        let out = forward(tape, &bp, &cfg, emb, &coords, &paths).unwrap();
        tape.bce_with_logits(out.logit, 1.0)
    };

    let report = finite_diff_check(build, &inputs, 1e-5).unwrap();
    assert!(
        report.max_rel_err < 1e-3,
        "max rel err {} at {:?} (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst,
        report.analytic_at_worst,
        report.numeric_at_worst
    );
    assert_eq!(
        report.coords_checked,
        inputs.iter().map(|t| t.numel()).sum::<usize>()
    );
}

#[test]
fn fd_baseline_end_to_end() {
    let mut cfg = ModelConfig::baseline();
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.patch_px = 7;
    let ps = ParamSet::init(&cfg, 43).unwrap();
    let names = [
        "embedder.conv2.b",
        "baseline.cls",
        "classifier.w",
        "classifier.b",
    ];
    let inputs: Vec<Tensor> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
    let mut rng = StreamRng::new(2, "px");
    let px = rand_t(&mut rng, &[5, 3, 7, 7], 0.0, 1.0);
    let coords: Vec<(usize, usize)> = (0..5).map(|i| (i, 0)).collect();
    let paths: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();

    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let overrides: Vec<(&str, Var)> =
            names.iter().zip(vars).map(|(&n, &v)| (n, v)).collect();
        let bp = bind_params_with(tape, &ps, &overrides);
        let x = tape.constant(px.clone());
        let emb = embed_patches(tape, &bp, &cfg, x).unwrap();
        let out = forward(tape, &bp, &cfg, emb, &coords, &paths).unwrap();
        tape.bce_with_logits(out.logit, 0.0)
    };

    let report = finite_diff_check(build, &inputs, 1e-5).unwrap();
    assert!(
        report.max_rel_err < 1e-3,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

/// Runs a forward+backward pass on patch embeddings and returns the loss and
/// the gradients of the requested parameters.
fn loss_and_grads(
    ps: &ParamSet,
    cfg: &ModelConfig,
    emb_t: &Tensor,
    coords: &[(usize, usize)],
    paths: &[Vec<usize>],
    wanted: &[String],
) -> (f64, HashMap<String, Tensor>) {
    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, ps, true);
    let emb = tape.constant(emb_t.clone());
    let out = forward(&mut tape, &bp, cfg, emb, coords, paths).unwrap();
    let loss = tape.bce_with_logits(out.logit, 1.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut wanted_grads = HashMap::new();
    for name in wanted {
        let v = bp.var(name).unwrap();
        let g = grads
            .wrt(v)
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .clone();
        wanted_grads.insert(name.clone(), g);
    }
    (tape.value(loss).item(), wanted_grads)
}

#[test]
fn shared_regional_gradient_is_sum_of_per_level_gradients() {
    let cfg_shared = toy_cfg(2);
    let mut cfg_unshared = cfg_shared.clone();
    cfg_unshared.share_regional_weights = false;

    let ps_shared = ParamSet::init(&cfg_shared, 11).unwrap();
    let mut ps_unshared = ParamSet::init(&cfg_unshared, 11).unwrap();
    for (name, t) in ps_shared.iter() {
        if let Some(rest) = name.strip_prefix("regional.") {
            for l in 1..=2 {
                *ps_unshared.get_mut(&format!("regional{l}.{rest}")).unwrap() = t.clone();
            }
        } else {
            *ps_unshared.get_mut(name).unwrap() = t.clone();
        }
    }

    let mut rng = StreamRng::new(3, "emb");
    let emb_t = rand_t(&mut rng, &[6, 8], -1.0, 1.0);
    let (coords, paths) = toy_bag();

    let suffixes = ["layer0.wq", "layer0.mlp.w1", "cls", "layer0.ln1.g"];
    let shared_names: Vec<String> = suffixes
        .iter()
        .map(|s| format!("regional.{s}"))
        .chain(std::iter::once("classifier.w".to_string()))
        .collect();
    let unshared_names: Vec<String> = suffixes
        .iter()
        .flat_map(|s| (1..=2).map(move |l| format!("regional{l}.{s}")))
        .chain(std::iter::once("classifier.w".to_string()))
        .collect();

    let (loss_s, gs) = loss_and_grads(
        &ps_shared,
        &cfg_shared,
        &emb_t,
        &coords,
        &paths,
        &shared_names,
    );
    let (loss_u, gu) = loss_and_grads(
        &ps_unshared,
        &cfg_unshared,
        &emb_t,
        &coords,
        &paths,
        &unshared_names,
    );

    assert!(
        (loss_s - loss_u).abs() < 1e-12,
        "losses differ: {loss_s} vs {loss_u}"
    );
    for s in &suffixes {
        let shared = &gs[&format!("regional.{s}")];
        let g1 = &gu[&format!("regional1.{s}")];
        let g2 = &gu[&format!("regional2.{s}")];
        for ((a, b1), b2) in shared.data().iter().zip(g1.data()).zip(g2.data()) {
            let b = b1 + b2;
            assert!(
                (a - b).abs() <= 1e-9 * a.abs().max(1.0),
                "{s}: shared {a} vs summed {b}"
            );
        }
        // The per-level pieces must individually differ from the total,
        // otherwise this test would pass vacuously.
        let total: f64 = shared.data().iter().map(|v| v.abs()).sum();
        let part: f64 = g1.data().iter().map(|v| v.abs()).sum();
        assert!(total > 0.0);
        assert!((total - part).abs() > 1e-12, "{s}: level split is degenerate");
    }
    for ((_, a), (_, b)) in gs["classifier.w"]
        .data()
        .iter()
        .enumerate()
        .zip(gu["classifier.w"].data().iter().enumerate())
    {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = toy_cfg(2);
    let ps = ParamSet::init(&cfg, 12).unwrap();
    let mut rng = StreamRng::new(4, "px");
    let px = rand_t(&mut rng, &[6, 3, 7, 7], 0.0, 1.0);
    let (coords, paths) = toy_bag();

    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, &ps, true);
    let x = tape.constant(px);
    let emb = embed_patches(&mut tape, &bp, &cfg, x).unwrap();
    let out = forward(&mut tape, &bp, &cfg, emb, &coords, &paths).unwrap();
    let loss = tape.bce_with_logits(out.logit, 1.0).unwrap();
    let grads = tape.backward(loss).unwrap();

    for name in ps.names() {
        let v = bp.var(&name).unwrap();
        let g = grads
            .wrt(v)
            .unwrap_or_else(|| panic!("{name} is disconnected from the loss"));
        assert!(
            g.data().iter().any(|&x| x != 0.0),
            "{name} gradient is identically zero"
        );
    }
}
