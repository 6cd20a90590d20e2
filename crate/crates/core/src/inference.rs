//! Center selection, training-time candidate association, per-block
//! instance extraction and cross-block merging.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{self, build_features, label_color, Block, Scene, BACKGROUND_CLASS};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point3};
use crate::groundtruth::{ClassRadiusTable, SceneStats};
use crate::model::{argmax, BlockInput, Model};

/// File suffix of instance files.
pub const INSTANCE_SUFFIX: &str = ".inst.txt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Stop once the best remaining heatmap value drops below this.
    pub q_threshold: f64,
    /// Upper bound on the number of candidates.
    pub max_centers: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            q_threshold: 0.4,
            max_centers: 64,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_threshold > 0.0 && self.q_threshold < 1.0) || self.max_centers == 0 {
            return Err(Error::Config(format!("invalid selection config {self:?}")));
        }
        Ok(())
    }
}

/// How candidates are drawn from a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Greedy peak picking with class-radius suppression.
    #[default]
    Greedy,
    /// `max_centers` uniformly random points.
    Random,
    /// The `max_centers` highest values, no threshold, no suppression.
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Row within the block input.
    pub row: usize,
    pub position: Point3,
    /// Heatmap value at the moment of selection.
    pub value: f64,
    pub class: usize,
}

fn check_lengths(q: &[f64], classes: &[usize], positions: &[Point3]) -> Result<()> {
    if q.len() != classes.len() || q.len() != positions.len() {
        return Err(Error::Shape {
            op: "select_centers",
            lhs: vec![q.len()],
            rhs: vec![classes.len(), positions.len()],
        });
    }
    Ok(())
}

/// Greedy center selection: take the current maximum (lowest index on
/// ties), then zero every value within the class radius of the pick.
/// Stops when the maximum falls below the threshold or the cap is reached.
pub fn select_centers(
    q: &[f64],
    classes: &[usize],
    positions: &[Point3],
    radii: &ClassRadiusTable,
    cfg: &SelectionConfig,
) -> Result<Vec<Candidate>> {
    check_lengths(q, classes, positions)?;
    let mut heat = q.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_centers && !heat.is_empty() {
        let best = argmax(&heat);
        let value = heat[best];
        if value < cfg.q_threshold {
            break;
        }
        let center = positions[best];
        let r2 = radii.radius(classes[best]).powi(2);
        for (h, p) in heat.iter_mut().zip(positions) {
            if p.distance_squared(center) <= r2 {
                *h = 0.0;
            }
        }
        out.push(Candidate {
            row: best,
            position: center,
            value,
            class: classes[best],
        });
    }
    Ok(out)
}

/// Candidate drawing for every [`SelectionMode`].
pub fn select_with_mode(
    mode: SelectionMode,
    q: &[f64],
    classes: &[usize],
    positions: &[Point3],
    radii: &ClassRadiusTable,
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<Vec<Candidate>> {
    check_lengths(q, classes, positions)?;
    let make = |row: usize| Candidate {
        row,
        position: positions[row],
        value: q[row],
        class: classes[row],
    };
    let n = q.len();
    Ok(match mode {
        SelectionMode::Greedy => select_centers(q, classes, positions, radii, cfg)?,
        SelectionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = index::sample(&mut rng, n, cfg.max_centers.min(n)).into_vec();
            rows.sort_unstable();
            rows.into_iter().map(make).collect()
        }
        SelectionMode::TopK => {
            let mut rows: Vec<usize> = (0..n).collect();
            rows.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
            rows.truncate(cfg.max_centers);
            rows.into_iter().map(make).collect()
        }
    })
}

/// A ground-truth instance center as seen by the association step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtCenter {
    pub position: Point3,
    pub class: usize,
}

/// Maps each candidate to its nearest ground-truth center when that center
/// lies within its class radius. A ground-truth instance keeps only its
/// nearest claimant (earlier candidate on ties); other claimants stay
/// unassigned.
pub fn associate_candidates_to_gt(
    candidates: &[Point3],
    gts: &[GtCenter],
    radii: &ClassRadiusTable,
) -> Vec<Option<usize>> {
    let mut claims: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (ci, c) in candidates.iter().enumerate() {
        let nearest = gts
            .iter()
            .enumerate()
            .map(|(gi, g)| (g.position.distance(*c), gi))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((d, gi)) = nearest {
            if d <= radii.radius(gts[gi].class) {
                let slot = claims.entry(gi).or_insert((d, ci));
                if d < slot.0 {
                    *slot = (d, ci);
                }
            }
        }
    }
    let mut out = vec![None; candidates.len()];
    for (gi, (_, ci)) in claims {
        out[ci] = Some(gi);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub selection: SelectionConfig,
    pub mode: SelectionMode,
    /// Replace the class radii by one radius for every class.
    pub uniform_radius: Option<f64>,
    /// Use the mean group size as a fixed box context instead of the
    /// predicted size group.
    pub fixed_box_context: bool,
    pub mask_threshold: f64,
    pub min_points: usize,
    pub merge_threshold: f64,
    pub cube: f64,
    pub stride: f64,
    /// Points fed to the network per block; remaining block points take
    /// the prediction of their nearest sampled point.
    pub sample_points: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            mode: SelectionMode::Greedy,
            uniform_radius: None,
            fixed_box_context: false,
            mask_threshold: 0.5,
            min_points: 10,
            merge_threshold: 0.5,
            cube: 1.0,
            stride: 0.5,
            sample_points: 4096,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn radii(&self, stats: &SceneStats) -> ClassRadiusTable {
        match self.uniform_radius {
            Some(r) => ClassRadiusTable::uniform(stats.num_classes, r),
            None => stats.class_radii.clone(),
        }
    }
}

/// Network outputs for one block after candidate selection.
#[derive(Debug, Clone)]
pub struct BlockPrediction {
    pub heatmap: Vec<f64>,
    pub semantic: Vec<usize>,
    pub candidates: Vec<Candidate>,
    /// Canonicalized box per candidate.
    pub boxes: Vec<Aabb>,
    pub size_groups: Vec<usize>,
    /// Mask probability per candidate, per block row.
    pub masks: Vec<Vec<f64>>,
    /// Candidates whose size window was empty.
    pub box_fallbacks: usize,
}

/// Runs the full network on one block and selects candidates.
pub fn predict_block(
    model: &Model,
    stats: &SceneStats,
    input: &BlockInput,
    cfg: &InferenceConfig,
    seed: u64,
) -> Result<BlockPrediction> {
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape);
    let bb = model.backbone(&mut tape, &pv, input)?;
    let q = model.center_head(&mut tape, &pv, &bb)?;
    let logits = model.semantic_head(&mut tape, &pv, &bb)?;
    let heatmap = tape.value(q).data().to_vec();
    let lt = tape.value(logits);
    let semantic: Vec<usize> = (0..lt.rows()).map(|i| argmax(lt.row_slice(i))).collect();

    let radii = cfg.radii(stats);
    let candidates = select_with_mode(
        cfg.mode,
        &heatmap,
        &semantic,
        &input.positions,
        &radii,
        &cfg.selection,
        seed,
    )?;
    let mut pred = BlockPrediction {
        heatmap,
        semantic,
        candidates,
        boxes: Vec::new(),
        size_groups: Vec::new(),
        masks: Vec::new(),
        box_fallbacks: 0,
    };
    if pred.candidates.is_empty() {
        return Ok(pred);
    }
    let rows: Vec<usize> = pred.candidates.iter().map(|c| c.row).collect();
    let probs = model.size_head(&mut tape, &pv, &bb, &rows)?;
    let base = model.mask_base(&mut tape, &pv, &bb)?;
    let probs: Tensor = tape.value(probs).clone();
    for (t, &row) in rows.iter().enumerate() {
        let k = argmax(probs.row_slice(t));
        let size = if cfg.fixed_box_context {
            stats.size_groups.mean_size()
        } else {
            stats.size_groups.sizes[k.min(stats.size_groups.k() - 1)]
        };
        let out = model.box_head(&mut tape, &pv, &bb, input, row, size)?;
        pred.box_fallbacks += usize::from(out.fell_back);
        let raw: [f64; 6] = tape.value(out.corners).data().try_into().expect("6 corners");
        let b = Aabb::from_raw(raw);
        let m = model.mask_head(&mut tape, &pv, base, input, b.to_raw())?;
        pred.size_groups.push(k);
        pred.boxes.push(b);
        pred.masks.push(tape.value(m).data().to_vec());
    }
    Ok(pred)
}

/// An instance found inside one block, in scene indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInstance {
    pub points: Vec<usize>,
    pub class: usize,
    pub bbox: Aabb,
    pub confidence: f64,
}

/// For every block member, the sampled row nearest to it.
pub fn nearest_sampled(block: &Block, scene: &Scene) -> Vec<usize> {
    let sampled: Vec<Point3> = block.positions(scene);
    block
        .indices
        .iter()
        .map(|&i| {
            let p = scene.positions()[i];
            let mut best = (f64::INFINITY, 0);
            for (r, q) in sampled.iter().enumerate() {
                let d = p.distance_squared(*q);
                if d < best.0 {
                    best = (d, r);
                }
            }
            best.1
        })
        .collect()
}

/// One instance per candidate: mask rows above threshold, carried to all
/// block members through their nearest sampled point. Class is the
/// majority non-background semantic label inside the mask.
pub fn extract_block_instances(
    block: &Block,
    scene: &Scene,
    pred: &BlockPrediction,
    cfg: &InferenceConfig,
) -> Vec<BlockInstance> {
    if pred.candidates.is_empty() {
        return Vec::new();
    }
    let nearest = if block.sampled == block.indices {
        (0..block.indices.len()).collect()
    } else {
        nearest_sampled(block, scene)
    };
    let mut out = Vec::new();
    for (t, cand) in pred.candidates.iter().enumerate() {
        let mask = &pred.masks[t];
        let points: Vec<usize> = block
            .indices
            .iter()
            .zip(&nearest)
            .filter(|(_, &r)| mask[r] > cfg.mask_threshold)
            .map(|(&i, _)| i)
            .collect();
        if points.len() < cfg.min_points {
            continue;
        }
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for (r, &m) in mask.iter().enumerate() {
            if m > cfg.mask_threshold && pred.semantic[r] != BACKGROUND_CLASS {
                *votes.entry(pred.semantic[r]).or_default() += 1;
            }
        }
        let class = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map_or(cand.class, |(&c, _)| c);
        if class == BACKGROUND_CLASS {
            continue;
        }
        out.push(BlockInstance {
            points,
            class,
            bbox: pred.boxes[t],
            confidence: cand.value,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub class: usize,
    pub confidence: f64,
    pub bbox: Aabb,
    /// Ascending scene indices.
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneInstances {
    pub instances: Vec<SceneInstance>,
}

struct Merging {
    class: usize,
    points: BTreeSet<usize>,
    bbox: Aabb,
    confidences: Vec<f64>,
}

/// Stitches per-block instances into scene instances. Blocks are visited in
/// origin order; a block instance joins the same-class scene instance it
/// overlaps most, provided that instance has not already absorbed part of
/// the same block and the shared points exceed `threshold` of the block
/// instance. A final pass gives each point to its most confident claimant.
pub fn block_merge(
    blocks: &[(Point3, Vec<BlockInstance>)],
    threshold: f64,
    min_points: usize,
) -> SceneInstances {
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (blocks[a].0, blocks[b].0);
        pa.x.total_cmp(&pb.x)
            .then(pa.y.total_cmp(&pb.y))
            .then(pa.z.total_cmp(&pb.z))
            .then(a.cmp(&b))
    });
    let mut merged: Vec<Merging> = Vec::new();
    for bi in order {
        let mut touched = BTreeSet::new();
        for inst in &blocks[bi].1 {
            let mut best: Option<(f64, usize)> = None;
            for (mi, m) in merged.iter().enumerate() {
                if m.class != inst.class || touched.contains(&mi) {
                    continue;
                }
                let shared = inst.points.iter().filter(|p| m.points.contains(p)).count();
                let ratio = shared as f64 / inst.points.len() as f64;
                if best.map_or(true, |(r, _)| ratio > r) {
                    best = Some((ratio, mi));
                }
            }
            match best {
                Some((ratio, mi)) if ratio > threshold => {
                    let m = &mut merged[mi];
                    m.points.extend(inst.points.iter().copied());
                    m.bbox = m.bbox.union_hull(&inst.bbox);
                    m.confidences.push(inst.confidence);
                    touched.insert(mi);
                }
                _ => {
                    touched.insert(merged.len());
                    merged.push(Merging {
                        class: inst.class,
                        points: inst.points.iter().copied().collect(),
                        bbox: inst.bbox,
                        confidences: vec![inst.confidence],
                    });
                }
            }
        }
    }

    let conf: Vec<f64> = merged
        .iter()
        .map(|m| m.confidences.iter().sum::<f64>() / m.confidences.len() as f64)
        .collect();
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (mi, m) in merged.iter().enumerate() {
        for &p in &m.points {
            let slot = owner.entry(p).or_insert(mi);
            if conf[mi] > conf[*slot] {
                *slot = mi;
            }
        }
    }
    let mut points: Vec<Vec<usize>> = vec![Vec::new(); merged.len()];
    for (p, mi) in owner {
        points[mi].push(p);
    }
    let instances = merged
        .into_iter()
        .zip(points)
        .zip(conf)
        .filter(|((_, pts), _)| !pts.is_empty() && pts.len() >= min_points)
        .map(|((m, pts), confidence)| SceneInstance {
            class: m.class,
            confidence,
            bbox: m.bbox,
            points: pts,
        })
        .collect();
    SceneInstances { instances }
}

/// Whole-scene inference: slice, sample, predict, extract, merge.
pub fn infer_scene(
    model: &Model,
    stats: &SceneStats,
    scene: &Scene,
    cfg: &InferenceConfig,
) -> Result<(SceneInstances, Vec<BlockPrediction>)> {
    let blocks = dataset::slice_into_cubes(scene, cfg.cube, cfg.stride)?;
    let mut per_block = Vec::with_capacity(blocks.len());
    let mut preds = Vec::with_capacity(blocks.len());
    for (bi, block) in blocks.iter().enumerate() {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(bi as u64);
        let block = if block.indices.len() > cfg.sample_points {
            dataset::sample_points(block, cfg.sample_points, seed)?
        } else {
            block.clone()
        };
        let input = BlockInput::new(
            build_features(&block, scene),
            block.positions(scene),
            model.config.knn,
        )?;
        let pred = predict_block(model, stats, &input, cfg, seed)?;
        per_block.push((block.origin, extract_block_instances(&block, scene, &pred, cfg)));
        preds.push(pred);
    }
    Ok((block_merge(&per_block, cfg.merge_threshold, cfg.min_points), preds))
}

/// Instance file: `#`-prefixed header, then one row per instance with
/// `class confidence x_min y_min z_min x_max y_max z_max idx...`.
pub fn format_instances(inst: &SceneInstances) -> String {
    let mut out = String::from("# class confidence x_min y_min z_min x_max y_max z_max point_indices...\n");
    for i in &inst.instances {
        let b = i.bbox.to_raw();
        let _ = write!(out, "{} {}", i.class, i.confidence);
        for v in b {
            let _ = write!(out, " {v}");
        }
        for p in &i.points {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
    }
    out
}

pub fn write_instances(inst: &SceneInstances, path: &Path) -> Result<()> {
    fs::write(path, format_instances(inst)).map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: &Path) -> Result<SceneInstances> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 8 {
            return Err(err(format!("expected at least 8 fields, got {}", f.len())));
        }
        let class = f[0].parse().map_err(|e| err(format!("class: {e}")))?;
        let nums: Vec<f64> = f[1..8]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("number: {e}")))?;
        let points = f[8..]
            .iter()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("point index: {e}")))?;
        instances.push(SceneInstance {
            class,
            confidence: nums[0],
            bbox: Aabb::from_raw(nums[1..7].try_into().expect("6 values")),
            points,
        });
    }
    Ok(SceneInstances { instances })
}

/// Ground-truth instances of a labeled scene, in the same shape as
/// predictions (confidence 1).
pub fn scene_ground_truth(scene: &Scene) -> SceneInstances {
    let instances = scene
        .instances()
        .into_iter()
        .map(|inst| SceneInstance {
            class: inst.class,
            confidence: 1.0,
            bbox: Aabb::enclosing(inst.points.iter().map(|&i| &scene.positions()[i]))
                .expect("instances are non-empty"),
            points: inst.points,
        })
        .collect();
    SceneInstances { instances }
}

/// PLY colored by instance; unclaimed points are gray.
pub fn write_instance_ply(path: &Path, scene: &Scene, inst: &SceneInstances) -> Result<()> {
    let mut colors = vec![label_color(-1); scene.len()];
    for (k, i) in inst.instances.iter().enumerate() {
        for &p in &i.points {
            colors[p] = label_color(k as i64);
        }
    }
    dataset::write_ply(path, scene.positions(), &colors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Point3> {
        xs.iter().map(|&x| Point3::new(x, 0.0, 0.0)).collect()
    }

    #[test]
    fn hand_traced_selection() {
        let pos = line(&[0.0, 0.1, 1.0, 1.1]);
        let radii = ClassRadiusTable::uniform(2, 0.5);
        let c = select_centers(&[0.9, 0.8, 0.7, 0.3], &[1; 4], &pos, &radii, &SelectionConfig::default()).unwrap();
        let xs: Vec<f64> = c.iter().map(|c| c.position.x).collect();
        assert_eq!(xs, vec![0.0, 1.0]);
        assert_eq!(c[0].value, 0.9);
        assert_eq!(c[1].value, 0.7);
    }

    #[test]
    fn nothing_above_threshold_selects_nothing() {
        let pos = line(&[0.0, 1.0]);
        let radii = ClassRadiusTable::uniform(2, 0.1);
        let c = select_centers(&[0.39, 0.1], &[1, 1], &pos, &radii, &SelectionConfig::default()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn selection_rejects_length_mismatch() {
        let radii = ClassRadiusTable::uniform(2, 0.1);
        assert!(select_centers(&[0.5], &[1, 1], &line(&[0.0]), &radii, &SelectionConfig::default()).is_err());
    }

    #[test]
    fn topk_and_random_modes() {
        let pos = line(&[0.0, 0.1, 0.2, 0.3]);
        let radii = ClassRadiusTable::uniform(2, 10.0);
        let cfg = SelectionConfig {
            q_threshold: 0.4,
            max_centers: 3,
        };
        let q = [0.1, 0.9, 0.5, 0.9];
        let top = select_with_mode(SelectionMode::TopK, &q, &[1; 4], &pos, &radii, &cfg, 0).unwrap();
        assert_eq!(top.iter().map(|c| c.row).collect::<Vec<_>>(), vec![1, 3, 2]);
        let rnd = select_with_mode(SelectionMode::Random, &q, &[1; 4], &pos, &radii, &cfg, 5).unwrap();
        assert_eq!(rnd.len(), 3);
        let greedy = select_with_mode(SelectionMode::Greedy, &q, &[1; 4], &pos, &radii, &cfg, 0).unwrap();
        assert_eq!(greedy.len(), 1);
    }

    #[test]
    fn association_cases() {
        let radii = ClassRadiusTable::uniform(2, 0.5);
        let gts = [
            GtCenter { position: Point3::ZERO, class: 1 },
            GtCenter { position: Point3::new(3.0, 0.0, 0.0), class: 1 },
        ];
        let cands = line(&[0.0, 0.2, 10.0, 2.9]);
        assert_eq!(
            associate_candidates_to_gt(&cands, &gts, &radii),
            vec![Some(0), None, None, Some(1)]
        );
        let closer_second = line(&[0.3, 0.1]);
        assert_eq!(associate_candidates_to_gt(&closer_second, &gts, &radii), vec![None, Some(0)]);
    }

    fn inst(points: std::ops::Range<usize>, class: usize, conf: f64) -> BlockInstance {
        BlockInstance {
            points: points.collect(),
            class,
            bbox: Aabb::point(Point3::ZERO),
            confidence: conf,
        }
    }

    #[test]
    fn merge_single_block_is_identity() {
        let blocks = vec![(Point3::ZERO, vec![inst(0..20, 1, 0.9), inst(20..45, 2, 0.8)])];
        let m = block_merge(&blocks, 0.5, 10);
        assert_eq!(m.instances.len(), 2);
        assert_eq!(m.instances[0].points, (0..20).collect::<Vec<_>>());
        assert_eq!(m.instances[1].points, (20..45).collect::<Vec<_>>());
        assert_eq!(m.instances[1].confidence, 0.8);
    }

    #[test]
    fn merge_overlapping_and_disjoint() {
        let a = (Point3::ZERO, vec![inst(0..40, 1, 0.9)]);
        let b = (Point3::new(0.5, 0.0, 0.0), vec![inst(10..50, 1, 0.7)]);
        let m = block_merge(&[b.clone(), a.clone()], 0.5, 10);
        assert_eq!(m.instances.len(), 1);
        assert_eq!(m.instances[0].points.len(), 50);
        assert!((m.instances[0].confidence - 0.8).abs() < 1e-12);

        let far = (Point3::new(5.0, 0.0, 0.0), vec![inst(100..140, 1, 0.6)]);
        assert_eq!(block_merge(&[a, far], 0.5, 10).instances.len(), 2);
    }

    #[test]
    fn ownership_pass_makes_sets_disjoint() {
        let blocks = vec![(Point3::ZERO, vec![inst(0..30, 1, 0.6), inst(10..60, 1, 0.9)])];
        let m = block_merge(&blocks, 0.5, 10);
        assert_eq!(m.instances.len(), 2);
        assert_eq!(m.instances[0].points, (0..10).collect::<Vec<_>>());
        assert_eq!(m.instances[1].points, (10..60).collect::<Vec<_>>());
    }

    #[test]
    fn instance_file_round_trip() {
        let s = SceneInstances {
            instances: vec![SceneInstance {
                class: 2,
                confidence: 0.875,
                bbox: Aabb::from_raw([0.0, 0.1, 0.2, 1.0, 1.1, 1.2]),
                points: vec![3, 5, 8],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.txt");
        write_instances(&s, &p).unwrap();
        assert_eq!(read_instances(&p).unwrap(), s);
    }
}
