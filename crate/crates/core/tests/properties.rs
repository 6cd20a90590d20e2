mod common;

use gicn::autodiff::{Tape, Tensor};
use gicn::dataset::{sample_points, slice_into_cubes, window_origins, Block};
use gicn::eval::{average_precision_50, mask_iou, match_instances, mean_precision_recall, class_counts};
use gicn::geometry::{aabb_giou, aabb_iou, Aabb, Point3};
use gicn::groundtruth::ClassRadiusTable;
use gicn::inference::{block_merge, select_centers, BlockInstance, SceneInstances, SelectionConfig};
use gicn::model::{BlockInput, Model, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_box() -> impl Strategy<Value = Aabb> {
    (
        prop::array::uniform3(-2.0f64..2.0),
        prop::array::uniform3(0.01f64..2.0),
    )
        .prop_map(|(m, e)| {
            let min = Point3::from_array(m);
            Aabb {
                min,
                max: min + Point3::from_array(e),
            }
        })
}

fn arb_selection_input() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<Point3>, Vec<f64>)> {
    (1usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(0usize..4, n),
            prop::collection::vec(prop::array::uniform3(0.0f64..2.0).prop_map(Point3::from_array), n),
            prop::collection::vec(0.01f64..0.8, 4),
        )
    })
}

fn radii_table(r: &[f64]) -> ClassRadiusTable {
    ClassRadiusTable {
        radii: r.iter().map(|&x| Some(x)).collect(),
        global_mean: r.iter().sum::<f64>() / r.len() as f64,
    }
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = aabb_iou(&a, &b).unwrap();
        prop_assert!((ab - aabb_iou(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        let g = aabb_giou(&a, &b).unwrap();
        prop_assert!(g <= ab + 1e-12);
        prop_assert!(g > -1.0 - 1e-12);
        prop_assert!((aabb_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn selection_matches_literal_oracle((q, labels, pts, r) in arb_selection_input(), cap in 1usize..80) {
        let radii = radii_table(&r);
        let cfg = SelectionConfig { q_threshold: 0.4, max_centers: cap };
        let got: Vec<usize> = select_centers(&q, &labels, &pts, &radii, &cfg).unwrap().iter().map(|c| c.row).collect();
        let want = common::literal_center_selection(&q, &labels, &pts, &radii, 0.4, cap);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn selection_invariants((q, labels, pts, r) in arb_selection_input()) {
        let radii = radii_table(&r);
        let cfg = SelectionConfig::default();
        let c = select_centers(&q, &labels, &pts, &radii, &cfg).unwrap();
        prop_assert!(c.len() <= 64.min(q.len()));
        for w in c.windows(2) {
            prop_assert!(w[0].value >= w[1].value);
        }
        for (a, ca) in c.iter().enumerate() {
            prop_assert!(ca.value >= 0.4);
            for cb in &c[a + 1..] {
                prop_assert!(ca.position.distance(cb.position) > radii.radius(ca.class));
            }
        }
    }

    #[test]
    fn mask_iou_symmetric(a in prop::collection::btree_set(0usize..50, 1..30), b in prop::collection::btree_set(0usize..50, 1..30)) {
        let a: Vec<usize> = a.into_iter().collect();
        let b: Vec<usize> = b.into_iter().collect();
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert_eq!(ab == 1.0, a == b);
    }

    #[test]
    fn window_origins_cover_the_range(lo in -3.0f64..3.0, len in 0.0f64..5.0) {
        let o = window_origins(lo, lo + len, 1.0, 0.5);
        prop_assert!(!o.is_empty());
        prop_assert_eq!(o[0], lo);
        prop_assert!(*o.last().unwrap() + 1.0 >= lo + len - 1e-12);
        prop_assert!(o.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 0.5 + 1e-12));
    }
}

#[test]
fn ap_depends_only_on_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (preds, gts) = common::random_match_case(&mut rng, 2, 5);
        if gts.instances.is_empty() {
            continue;
        }
        let mut rescaled = preds.clone();
        for p in &mut rescaled.instances {
            p.confidence = (3.0 * p.confidence).exp() + 7.0;
        }
        let a = average_precision_50(&[match_instances(&preds, &gts, 0.5).unwrap()]).unwrap();
        let b = average_precision_50(&[match_instances(&rescaled, &gts, 0.5).unwrap()]).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn duplicating_a_matched_prediction_lowers_precision_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    for _ in 0..300 {
        let (preds, gts) = common::random_match_case(&mut rng, 1, 5);
        if gts.instances.is_empty() {
            continue;
        }
        let m = match_instances(&preds, &gts, 0.5).unwrap();
        let Some(hit) = m.preds.iter().find(|p| p.gt.is_some()) else { continue };
        let mut dup = preds.clone();
        dup.instances.push(preds.instances[hit.pred].clone());
        let m2 = match_instances(&dup, &gts, 0.5).unwrap();
        let (p1, r1) = mean_precision_recall(&[m]).unwrap();
        let (p2, r2) = mean_precision_recall(&[m2]).unwrap();
        assert!(p2 < p1, "{p2} !< {p1}");
        assert_eq!(r1, r2);
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn greedy_matching_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let (preds, gts) = common::random_match_case(&mut rng, 2, 6);
        let m = match_instances(&preds, &gts, 0.5).unwrap();
        assert_eq!(m.true_positives(), common::max_true_positives(&preds, &gts, 0.5));
        let counts = class_counts(&[m]);
        let tp: usize = counts.values().map(|c| c.tp).sum();
        let fp: usize = counts.values().map(|c| c.fp).sum();
        let fneg: usize = counts.values().map(|c| c.fn_).sum();
        assert_eq!(tp + fp, preds.instances.len());
        assert_eq!(tp + fneg, gts.instances.len());
    }
}

#[test]
fn monte_carlo_iou_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..30 {
        let a = common::random_box(&mut rng, 1.0);
        let b = common::random_box(&mut rng, 1.0);
        let exact = aabb_iou(&a, &b).unwrap();
        let (est, n) = common::monte_carlo_iou(&mut rng, &a, &b, 20_000);
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((est - exact).abs() <= 4.0 * sigma + 1e-12, "{est} vs {exact}");
    }
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, k: usize) -> BlockInput {
    let pos: Vec<Point3> = (0..n)
        .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
        .collect();
    let feats: Vec<f64> = (0..n * 9).map(|_| rng.gen()).collect();
    BlockInput::new(Tensor::matrix(n, 9, feats).unwrap(), pos, k).unwrap()
}

fn backbone_values(model: &Model, input: &BlockInput) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape);
    let bb = model.backbone(&mut tape, &pv, input).unwrap();
    (tape.value(bb.per_point).clone(), tape.value(bb.global).clone())
}

#[test]
fn backbone_symmetries() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let model = Model::new(ModelConfig::compact(4, 3), 3).unwrap();
    let input = random_input(&mut rng, 40, 8);
    let (pp, g) = backbone_values(&model, &input);

    let mut perm: Vec<usize> = (0..40).collect();
    perm.reverse();
    perm.swap(3, 17);
    let permuted = BlockInput::new(
        Tensor::from_rows(&perm.iter().map(|&i| input.features.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap(),
        perm.iter().map(|&i| input.positions[i]).collect(),
        8,
    )
    .unwrap();
    let (pp2, g2) = backbone_values(&model, &permuted);
    for (r, &i) in perm.iter().enumerate() {
        for (a, b) in pp2.row_slice(r).iter().zip(pp.row_slice(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(g, g2);

    let doubled = BlockInput::new(
        Tensor::from_rows(&(0..80).map(|i| input.features.row_slice(i % 40).to_vec()).collect::<Vec<_>>()).unwrap(),
        (0..80).map(|i| input.positions[i % 40]).collect(),
        8,
    )
    .unwrap();
    let (_, g3) = backbone_values(&model, &doubled);
    for (a, b) in g.data().iter().zip(g3.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let single = random_input(&mut rng, 1, 8);
    let (pp1, g1) = backbone_values(&model, &single);
    assert_eq!(pp1.rows(), 1);
    assert!(g1.is_finite());
}

#[test]
fn sampling_properties() {
    let block = Block {
        origin: Point3::ZERO,
        size: 1.0,
        indices: vec![2, 5, 9, 11],
        sampled: vec![2, 5, 9, 11],
    };
    let full = sample_points(&block, 3, 1).unwrap();
    assert_eq!(full.sampled.len(), 3);
    assert!(full.sampled.windows(2).all(|w| w[0] < w[1]));
    let padded = sample_points(&block, 10, 1).unwrap();
    assert_eq!(padded.sampled.len(), 10);
    for i in &block.indices {
        assert!(padded.sampled.contains(i));
    }
    assert_eq!(sample_points(&block, 10, 1).unwrap(), padded);
}

#[test]
fn merge_output_is_disjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let blocks: Vec<(Point3, Vec<BlockInstance>)> = (0..4)
            .map(|b| {
                let insts = (0..rng.gen_range(0..4))
                    .map(|_| {
                        let start = rng.gen_range(0..60);
                        BlockInstance {
                            points: (start..start + rng.gen_range(10..40)).collect(),
                            class: rng.gen_range(1..3),
                            bbox: Aabb::point(Point3::ZERO),
                            confidence: rng.gen(),
                        }
                    })
                    .collect();
                (Point3::new(b as f64 * 0.5, 0.0, 0.0), insts)
            })
            .collect();
        let merged: SceneInstances = block_merge(&blocks, 0.5, 10);
        let mut seen = std::collections::HashSet::new();
        for inst in &merged.instances {
            assert!(inst.points.len() >= 10);
            for p in &inst.points {
                assert!(seen.insert(*p), "point {p} owned twice");
            }
        }
    }
}

#[test]
fn slicing_keeps_points_inside_blocks() {
    let scene = gicn::dataset::generate_scene(&gicn::dataset::SceneConfig::default(), 21).unwrap();
    let blocks = slice_into_cubes(&scene, 1.0, 0.5).unwrap();
    let mut covered = vec![false; scene.len()];
    for b in &blocks {
        let bounds = Aabb {
            min: b.origin,
            max: b.origin + Point3::new(1.0, 1.0, 1.0),
        };
        for &i in &b.indices {
            assert!(bounds.contains(scene.positions()[i]));
            covered[i] = true;
        }
    }
    assert!(covered.iter().all(|&c| c));
}

#[test]
fn larger_uniform_radius_can_add_candidates() {
    // A wider radius suppresses B, which otherwise would have covered C and D.
    let pts = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.5, 0.0, 0.0),
        Point3::new(1.5, 1.0, 0.0),
        Point3::new(1.5, -1.0, 0.0),
    ];
    let q = vec![0.9, 0.8, 0.7, 0.6];
    let labels = vec![0; 4];
    let cfg = SelectionConfig::default();
    let small = select_centers(&q, &labels, &pts, &radii_table(&[1.0]), &cfg).unwrap();
    let large = select_centers(&q, &labels, &pts, &radii_table(&[1.6]), &cfg).unwrap();
    assert_eq!(small.len(), 2);
    assert_eq!(large.len(), 3);
}
