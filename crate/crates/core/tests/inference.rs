//! End-to-end inference checks: two-stage full/top passes, tiling paths,
//! order invariance, and dataset loading.

use hmil_core::eval::{
    composite_attention, embed_all, evaluate_slides, infer_full, infer_slide, infer_top,
    load_split, validation_auc,
};
use hmil_core::model::{bind_params, forward, ModelConfig, ParamSet, Scope};
use hmil_core::rng::StreamRng;
use hmil_core::sampling::RegionSpec;
use hmil_core::synthwsi::{
    filter_empty_patches, generate_dataset, GenConfig, SlideGrid, Split,
};
use hmil_core::{Tape, Tensor};

const PX: usize = 8;

fn tiny_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::hierarchical(RegionSpec::new(2, 2).unwrap());
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.patch_px = PX;
    cfg
}

fn tiny_baseline() -> ModelConfig {
    let mut cfg = ModelConfig::baseline();
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.patch_px = PX;
    cfg
}

/// Deterministic noise for one patch; the same key always yields the same
/// pixels, so identical content can be placed at different grid positions.
fn patch_noise(key: &str) -> Vec<u8> {
    let mut rng = StreamRng::new(4242, key);
    (0..PX * PX * 3).map(|_| 80 + rng.gen_below(100) as u8).collect()
}

/// White (empty) slide with noisy patches in the given blocks. Patch (gx,gy)
/// inside a block gets content keyed by its offset within that block, so two
/// blocks with the same size carry identical pixel content.
fn block_slide(id: &str, label: u8, grid: usize, blocks: &[(usize, usize, usize, usize)]) -> SlideGrid {
    let plen = PX * PX * 3;
    let mut pixels = vec![255u8; grid * grid * plen];
    for &(x0, y0, w, h) in blocks {
        for by in 0..h {
            for bx in 0..w {
                let content = patch_noise(&format!("{bx}/{by}"));
                let start = ((y0 + by) * grid + x0 + bx) * plen;
                pixels[start..start + plen].copy_from_slice(&content);
            }
        }
    }
    let mut g = SlideGrid::new(id.to_string(), grid, grid, PX, 3, label, pixels).unwrap();
    filter_empty_patches(&mut g, 220).unwrap();
    g
}

#[test]
fn full_inference_matches_direct_forward_with_hand_built_paths() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 11).unwrap();
    let grid = block_slide("one-tile", 1, 8, &[(0, 0, 4, 4)]);
    let full = infer_full(&ps, &cfg, &grid).unwrap();
    assert_eq!(full.n_embedded, 16);

    // Independent derivation: tile at the origin, leaf = 2x2 patch window,
    // path = [leaf position within the tile, tile index 0].
    let mut coords = Vec::new();
    let mut paths = Vec::new();
    for gy in 0..4usize {
        for gx in 0..4usize {
            coords.push((gx, gy));
            paths.push(vec![(gy / 2) * 2 + gx / 2, 0]);
        }
    }
    assert_eq!(full.coords, coords);
    assert_eq!(full.paths, paths);

    let emb = embed_all(&ps, &cfg, &grid, &coords).unwrap();
    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, &ps, false);
    let v = tape.constant(emb);
    let out = forward(&mut tape, &bp, &cfg, v, &coords, &paths).unwrap();
    assert_eq!(out.prob.to_bits(), full.probability.to_bits());
}

#[test]
fn probability_is_invariant_to_tile_translation() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 3).unwrap();
    let at_origin = block_slide("origin", 0, 8, &[(0, 0, 4, 4)]);
    let shifted = block_slide("shifted", 0, 8, &[(4, 4, 4, 4)]);
    let a = infer_full(&ps, &cfg, &at_origin).unwrap();
    let b = infer_full(&ps, &cfg, &shifted).unwrap();
    // same patch content, same within-tile layout -> identical logits
    assert_eq!(a.probability.to_bits(), b.probability.to_bits());
    // paths are tile-relative, so they match too
    assert_eq!(a.paths, b.paths);
    assert_eq!(b.coords[0], (4, 4));
}

#[test]
fn probability_and_attention_survive_token_permutation() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 7).unwrap();
    let grid = block_slide("two-tiles", 1, 8, &[(0, 0, 4, 4), (4, 4, 4, 4)]);
    let full = infer_full(&ps, &cfg, &grid).unwrap();
    assert_eq!(full.n_embedded, 32);

    let n = full.coords.len();
    let d = cfg.embed_dim;
    let mut order: Vec<usize> = (0..n).collect();
    StreamRng::new(99, "perm").shuffle(&mut order);
    let coords: Vec<_> = order.iter().map(|&i| full.coords[i]).collect();
    let paths: Vec<_> = order.iter().map(|&i| full.paths[i].clone()).collect();
    let mut data = Vec::with_capacity(n * d);
    for &i in &order {
        data.extend_from_slice(&full.embeddings.data()[i * d..(i + 1) * d]);
    }
    let emb = Tensor::new(&[n, d], data).unwrap();

    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, &ps, false);
    let v = tape.constant(emb);
    let out = forward(&mut tape, &bp, &cfg, v, &coords, &paths).unwrap();
    assert!((out.prob - full.probability).abs() <= 1e-9);

    let attn = composite_attention(&out.records, cfg.levels(), &coords).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert!(
            (attn[k] - full.attention[i]).abs() <= 1e-9,
            "attention moved for patch {:?}",
            coords[k]
        );
    }
}

#[test]
fn chunked_embedding_covers_each_patch_once() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 5).unwrap();
    // 24x24 = 576 patches: crosses the 512-patch embedding chunk boundary.
    let grid = block_slide("dense", 1, 24, &[(0, 0, 24, 24)]);
    let full = infer_full(&ps, &cfg, &grid).unwrap();
    assert_eq!(full.n_embedded, 576);
    assert_eq!(full.embeddings.shape(), &[576, cfg.embed_dim]);
    assert_eq!(full.attention.len(), 576);
    let sum: f64 = full.attention.iter().sum();
    assert!((sum - 1.0).abs() <= 1e-9);
    assert!(full.attention.iter().all(|&a| a >= 0.0));

    // chunking must not change values: re-embed a straddling window directly
    let window = &full.coords[500..530];
    let direct = embed_all(&ps, &cfg, &grid, window).unwrap();
    for (k, row) in direct.data().chunks(cfg.embed_dim).enumerate() {
        let i = 500 + k;
        let cached = &full.embeddings.data()[i * cfg.embed_dim..(i + 1) * cfg.embed_dim];
        for (a, b) in row.iter().zip(cached) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn uniform_attention_keeps_every_patch_and_probability() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 23).unwrap();
    let grid = block_slide("uniform", 0, 8, &[(0, 0, 4, 4)]);
    let mut full = infer_full(&ps, &cfg, &grid).unwrap();
    let n = full.attention.len();
    full.attention = vec![1.0 / n as f64; n];
    let top = infer_top(&ps, &cfg, &full).unwrap();
    assert_eq!(top.n_high, n);
    assert_eq!(top.n_low, 0);
    assert_eq!(top.centroid_low, None);
    // nothing was zeroed, so the second pass replays the first bit for bit
    assert_eq!(top.probability_top.to_bits(), full.probability.to_bits());
}

#[test]
fn top_pass_zeroes_exactly_the_low_cluster() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 31).unwrap();
    let grid = block_slide("split", 1, 8, &[(0, 0, 4, 4), (4, 4, 4, 4)]);
    let mut full = infer_full(&ps, &cfg, &grid).unwrap();

    // force tile 0 high, tile 1 low (tiles are planned in row-major order)
    let n = full.coords.len();
    for i in 0..n {
        full.attention[i] = if full.paths[i][1] == 0 { 0.05 } else { 0.0125 };
    }
    let top = infer_top(&ps, &cfg, &full).unwrap();
    assert_eq!(top.n_high, 16);
    assert_eq!(top.n_low, 16);
    assert!((top.centroid_high - 0.05).abs() < 1e-12);
    assert!((top.centroid_low.unwrap() - 0.0125).abs() < 1e-12);

    // oracle: zero those embedding rows by hand and rerun the forward pass
    let d = cfg.embed_dim;
    let mut emb = full.embeddings.clone();
    for i in 0..n {
        if full.paths[i][1] == 1 {
            emb.data_mut()[i * d..(i + 1) * d].fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, &ps, false);
    let v = tape.constant(emb);
    let out = forward(&mut tape, &bp, &cfg, v, &full.coords, &full.paths).unwrap();
    assert_eq!(out.prob.to_bits(), top.probability_top.to_bits());
}

#[test]
fn zeroing_one_tile_leaves_other_tiles_leaf_attention_untouched() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 13).unwrap();
    let grid = block_slide("isolate", 1, 8, &[(0, 0, 4, 4), (4, 4, 4, 4)]);
    let full = infer_full(&ps, &cfg, &grid).unwrap();
    let d = cfg.embed_dim;
    let mut emb = full.embeddings.clone();
    for i in 0..full.coords.len() {
        if full.paths[i][1] == 1 {
            emb.data_mut()[i * d..(i + 1) * d].fill(0.0);
        }
    }

    let leaf_weights = |emb: Tensor| {
        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, &ps, false);
        let v = tape.constant(emb);
        let out = forward(&mut tape, &bp, &cfg, v, &full.coords, &full.paths).unwrap();
        let mut per_group: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        for rec in out.records {
            if rec.scope == Scope::Level(1) && *rec.group_id.last().unwrap() == 0 {
                per_group.push((rec.group_id, rec.weights));
            }
        }
        per_group
    };
    let before = leaf_weights(full.embeddings.clone());
    let after = leaf_weights(emb);
    assert_eq!(before.len(), 4); // four leaves inside tile 0
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.0, a.0);
        for (x, y) in b.1.iter().zip(&a.1) {
            assert_eq!(x.to_bits(), y.to_bits(), "tile-0 leaf weights changed");
        }
    }
}

#[test]
fn baseline_full_inference_has_flat_normalized_attention() {
    let cfg = tiny_baseline();
    let ps = ParamSet::init(&cfg, 2).unwrap();
    let grid = block_slide("flat", 0, 8, &[(1, 2, 3, 2)]);
    let full = infer_full(&ps, &cfg, &grid).unwrap();
    assert_eq!(full.n_embedded, 6);
    assert!(full.paths.is_empty());
    let sum: f64 = full.attention.iter().sum();
    assert!((sum - 1.0).abs() <= 1e-9);
    let s = infer_slide(&ps, &cfg, &grid).unwrap();
    assert_eq!(s.probability.to_bits(), full.probability.to_bits());
    assert!(s.probability_top.is_finite());
}

#[test]
fn slide_inference_is_deterministic() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 17).unwrap();
    let grid = block_slide("det", 1, 8, &[(0, 0, 4, 4), (4, 0, 4, 4)]);
    let a = infer_slide(&ps, &cfg, &grid).unwrap();
    let b = infer_slide(&ps, &cfg, &grid).unwrap();
    assert_eq!(a.probability.to_bits(), b.probability.to_bits());
    assert_eq!(a.probability_top.to_bits(), b.probability_top.to_bits());
    assert_eq!(a.n_high, b.n_high);
    for (x, y) in a.attention.iter().zip(&b.attention) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn evaluation_report_over_mixed_labels() {
    let cfg = tiny_cfg();
    let ps = ParamSet::init(&cfg, 41).unwrap();
    let slides = vec![
        block_slide("pos", 1, 8, &[(0, 0, 4, 4)]),
        block_slide("neg", 0, 8, &[(4, 4, 4, 4)]),
    ];
    let report = evaluate_slides(&ps, &cfg, &slides).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!((0.0..=1.0).contains(&report.auc_all));
    assert!((0.0..=1.0).contains(&report.auc_top));
    assert!((0.0..=0.5).contains(&report.extremity_all));
    let va = validation_auc(&ps, &cfg, &slides).unwrap();
    assert!((0.0..=1.0).contains(&va));
}

#[test]
fn generated_dataset_round_trips_through_load_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig::micro("roundtrip", 10);
    let (manifest, infos) = generate_dataset(&cfg, 909, dir.path()).unwrap();
    assert_eq!(infos.len(), 10);
    let mut total = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        let slides = load_split(&manifest, dir.path(), split).unwrap();
        let entries: Vec<_> = manifest.split_entries(split).collect();
        assert_eq!(slides.len(), entries.len());
        for (g, e) in slides.iter().zip(&entries) {
            assert_eq!(g.slide_id, e.slide_id);
            assert_eq!(g.label, e.label);
            assert!(g.nonempty_mask().is_some(), "loader must pre-filter");
            assert!(g.nonempty_mask().unwrap().iter().any(|&b| b));
        }
        total += slides.len();
    }
    assert_eq!(total, 10);
}
