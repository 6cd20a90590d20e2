mod common;

use gicn::dataset::{build_features, slice_into_cubes};
use gicn::groundtruth::SceneStats;
use gicn::inference::{block_merge, extract_block_instances, infer_scene, predict_block, InferenceConfig};
use gicn::model::{BlockInput, Model, ModelConfig};

fn jittered_model(stats: &SceneStats) -> Model {
    let mut model = Model::new(ModelConfig::compact(3, stats.size_groups.k()), 1).unwrap();
    common::jitter_params(&mut model, 2, 0.3);
    model
}

#[test]
fn single_cube_scene_is_its_block() {
    let scene = common::single_cube_scene();
    let stats = SceneStats::compute(std::slice::from_ref(&scene), 2).unwrap();
    let model = jittered_model(&stats);
    let cfg = InferenceConfig {
        min_points: 5,
        ..InferenceConfig::default()
    };
    let blocks = slice_into_cubes(&scene, 1.0, 0.5).unwrap();
    assert_eq!(blocks.len(), 1);
    let block = &blocks[0];
    assert_eq!(block.indices.len(), scene.len());
    let input = BlockInput::new(build_features(block, &scene), block.positions(&scene), model.config.knn).unwrap();
    let pred = predict_block(&model, &stats, &input, &cfg, 0).unwrap();
    let direct = extract_block_instances(block, &scene, &pred, &cfg);
    let (merged, _) = infer_scene(&model, &stats, &scene, &cfg).unwrap();
    assert_eq!(merged, block_merge(&[(block.origin, direct)], cfg.merge_threshold, cfg.min_points));

    // Disjoint block instances pass through unchanged.
    let gt = common::gt_block_instances(&scene, block);
    let out = block_merge(&[(block.origin, gt.clone())], 0.5, 1);
    assert_eq!(out.instances.len(), gt.len());
    for (a, b) in out.instances.iter().zip(&gt) {
        assert_eq!(a.points, b.points);
        assert_eq!(a.class, b.class);
        assert_eq!(a.bbox, b.bbox);
    }
}

#[test]
fn straddling_instance_merges_once() {
    let scene = common::straddling_scene();
    let blocks = slice_into_cubes(&scene, 1.0, 0.5).unwrap();
    assert!(blocks.len() >= 3);
    let per_block: Vec<_> = blocks
        .iter()
        .map(|b| (b.origin, common::gt_block_instances(&scene, b)))
        .collect();
    let bar_blocks = per_block.iter().filter(|(_, v)| v.iter().any(|i| i.class == 1)).count();
    assert!(bar_blocks >= 2);
    let merged = block_merge(&per_block, 0.5, 1);
    let gt = scene.instances();
    assert_eq!(merged.instances.len(), gt.len());
    for g in gt {
        let hits: Vec<_> = merged.instances.iter().filter(|m| m.class == g.class).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].points, g.points);
    }
}
