//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use gicn::geometry::{Aabb, Point3};
use gicn::groundtruth::ClassRadiusTable;
use gicn::inference::{SceneInstance, SceneInstances};
use rand::Rng;

/// Center selection written as the repeat-until loop: pick the maximum,
/// count it, suppress its radius, and test the exit condition afterwards.
/// The pick that trips the exit condition (value below threshold, or one
/// past the cap) is then discarded, so every returned value is at least
/// `q_theta` and at most `t_theta` picks are returned.
pub fn literal_center_selection(
    q: &[f64],
    labels: &[usize],
    points: &[Point3],
    radii: &ClassRadiusTable,
    q_theta: f64,
    t_theta: usize,
) -> Vec<usize> {
    let mut q = q.to_vec();
    let mut chosen: Vec<(usize, f64)> = Vec::new();
    let mut t = 0usize;
    loop {
        let mut i_star = 0usize;
        for i in 1..q.len() {
            if q[i] > q[i_star] {
                i_star = i;
            }
        }
        let q_star = q[i_star];
        t += 1;
        chosen.push((i_star, q_star));
        let r = radii.radius(labels[i_star]);
        let c = points[i_star];
        for i in 0..q.len() {
            let d = ((points[i].x - c.x).powi(2) + (points[i].y - c.y).powi(2) + (points[i].z - c.z).powi(2)).sqrt();
            if d <= r {
                q[i] = 0.0;
            }
        }
        if q_star < q_theta || t > t_theta {
            break;
        }
    }
    let last = chosen.last().copied().expect("loop runs at least once");
    if last.1 < q_theta || chosen.len() > t_theta {
        chosen.pop();
    }
    chosen.into_iter().map(|c| c.0).collect()
}

/// Largest number of one-to-one same-class pairs with IoU ≥ `tau`,
/// by exhaustive search.
pub fn max_true_positives(preds: &SceneInstances, gts: &SceneInstances, tau: f64) -> usize {
    let ok: Vec<Vec<bool>> = preds
        .instances
        .iter()
        .map(|p| {
            gts.instances
                .iter()
                .map(|g| g.class == p.class && set_iou(&p.points, &g.points) >= tau)
                .collect()
        })
        .collect();
    fn search(i: usize, ok: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
        if i == ok.len() {
            return 0;
        }
        let mut best = search(i + 1, ok, used);
        for g in 0..used.len() {
            if ok[i][g] && !used[g] {
                used[g] = true;
                best = best.max(1 + search(i + 1, ok, used));
                used[g] = false;
            }
        }
        best
    }
    search(0, &ok, &mut vec![false; gts.instances.len()])
}

/// Point-set IoU via hash sets.
pub fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::HashSet<_> = a.iter().collect();
    let sb: std::collections::HashSet<_> = b.iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

pub fn random_box<R: Rng>(rng: &mut R, span: f64) -> Aabb {
    let min = Point3::new(rng.gen_range(0.0..span), rng.gen_range(0.0..span), rng.gen_range(0.0..span));
    let ext = Point3::new(rng.gen_range(0.05..span), rng.gen_range(0.05..span), rng.gen_range(0.05..span));
    Aabb { min, max: min + ext }
}

/// Monte-Carlo IoU from `n` uniform samples in the pair's hull; returns
/// the estimate and the number of samples that fell in the union.
pub fn monte_carlo_iou<R: Rng>(rng: &mut R, a: &Aabb, b: &Aabb, n: usize) -> (f64, usize) {
    let h = a.union_hull(b);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..n {
        let p = Point3::new(
            rng.gen_range(h.min.x..h.max.x),
            rng.gen_range(h.min.y..h.max.y),
            rng.gen_range(h.min.z..h.max.z),
        );
        let (ia, ib) = (a.contains(p), b.contains(p));
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    (inter as f64 / union.max(1) as f64, union)
}

/// Random labeled instance sets over `universe` points: disjoint ground
/// truth, and predictions that are noisy copies, fragments or junk.
pub fn random_match_case<R: Rng>(rng: &mut R, classes: usize, max_per_class: usize) -> (SceneInstances, SceneInstances) {
    let universe = 120usize;
    let mut free: Vec<usize> = (0..universe).collect();
    let mut gts = Vec::new();
    for class in 1..=classes {
        for _ in 0..rng.gen_range(0..=max_per_class) {
            let size = rng.gen_range(2..8).min(free.len());
            if size == 0 {
                break;
            }
            let mut pts: Vec<usize> = (0..size).map(|_| free.swap_remove(rng.gen_range(0..free.len()))).collect();
            pts.sort_unstable();
            gts.push(SceneInstance {
                class,
                confidence: 1.0,
                bbox: Aabb::point(Point3::ZERO),
                points: pts,
            });
        }
    }
    let mut preds = Vec::new();
    for class in 1..=classes {
        let same: Vec<&SceneInstance> = gts.iter().filter(|g| g.class == class).collect();
        for _ in 0..rng.gen_range(0..=max_per_class) {
            let mut pts: Vec<usize> = if !same.is_empty() && rng.gen_bool(0.7) {
                let g = same[rng.gen_range(0..same.len())];
                g.points.iter().copied().filter(|_| rng.gen_bool(0.75)).collect()
            } else {
                Vec::new()
            };
            for _ in 0..rng.gen_range(0..4) {
                pts.push(rng.gen_range(0..universe));
            }
            pts.sort_unstable();
            pts.dedup();
            if pts.is_empty() {
                pts.push(rng.gen_range(0..universe));
            }
            preds.push(SceneInstance {
                class,
                confidence: rng.gen_range(0.0..1.0),
                bbox: Aabb::point(Point3::ZERO),
                points: pts,
            });
        }
    }
    (SceneInstances { instances: preds }, SceneInstances { instances: gts })
}

/// Per-block instances cut directly from the labels: each labeled instance
/// restricted to the block's members.
pub fn gt_block_instances(scene: &gicn::dataset::Scene, block: &gicn::dataset::Block) -> Vec<gicn::inference::BlockInstance> {
    let mut out = Vec::new();
    for inst in scene.instances() {
        let pts: Vec<usize> = block.indices.iter().copied().filter(|i| scene.instance[*i] == inst.id).collect();
        if pts.is_empty() {
            continue;
        }
        let bbox = Aabb::enclosing(pts.iter().map(|&i| &scene.positions()[i])).unwrap();
        out.push(gicn::inference::BlockInstance {
            points: pts,
            class: inst.class,
            bbox,
            confidence: 0.9,
        });
    }
    out
}

/// Two labeled bars on a background slab; the first straddles `x = 1`.
pub fn straddling_scene() -> gicn::dataset::Scene {
    let mut pos = Vec::new();
    let (mut sem, mut ins) = (Vec::new(), Vec::new());
    for i in 0..20 {
        for j in 0..20 {
            pos.push(Point3::new(i as f64 * 0.1, j as f64 * 0.05, 0.0));
            sem.push(0);
            ins.push(-1);
        }
    }
    for i in 0..35 {
        for j in 0..3 {
            pos.push(Point3::new(0.6 + i as f64 * 0.02, 0.3 + j as f64 * 0.05, 0.2));
            sem.push(1);
            ins.push(0);
        }
    }
    for i in 0..30 {
        pos.push(Point3::new(0.1 + i as f64 * 0.01, 0.8, 0.4));
        sem.push(2);
        ins.push(1);
    }
    gicn::dataset::Scene::new(gicn::geometry::PointCloud::new(pos, None).unwrap(), sem, ins, 3).unwrap()
}

/// Background slab with two blobs, all within one unit cube.
pub fn single_cube_scene() -> gicn::dataset::Scene {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut pos = Vec::new();
    let (mut sem, mut ins) = (Vec::new(), Vec::new());
    for _ in 0..150 {
        pos.push(Point3::new(rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.9), 0.0));
        sem.push(0);
        ins.push(-1);
    }
    for (id, (cx, cy)) in [(0.25, 0.25), (0.65, 0.6)].into_iter().enumerate() {
        for _ in 0..60 {
            pos.push(Point3::new(
                cx + rng.gen_range(-0.1..0.1),
                cy + rng.gen_range(-0.1..0.1),
                rng.gen_range(0.05..0.3),
            ));
            sem.push(id + 1);
            ins.push(id as i64);
        }
    }
    gicn::dataset::Scene::new(gicn::geometry::PointCloud::new(pos, None).unwrap(), sem, ins, 3).unwrap()
}

/// Adds uniform noise in `[-amp, amp]` to every parameter, including the
/// zero-initialized output layers.
pub fn jitter_params(model: &mut gicn::model::Model, seed: u64, amp: f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let id = model.params.find(&n).unwrap();
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
}
