//! End-to-end training: block batching, joint loss, Adam with a step
//! learning-rate schedule, validation, checkpoints and the run log.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape, Tensor, Var};
use crate::dataset::{self, build_features, Block, Scene};
use crate::error::{Error, Result};
use crate::eval;
use crate::geometry::{Aabb, Point3};
use crate::groundtruth::{heatmap_for, instance_targets, HeatmapGT, InstanceTarget, SceneStats, SIGMA_G};
use crate::inference::{
    associate_candidates_to_gt, infer_scene, scene_ground_truth, select_centers, GtCenter, InferenceConfig,
    SelectionConfig, SelectionMode,
};
use crate::losses::{self, LossConfig, LossTerms, LossValues};
use crate::model::{argmax, BlockInput, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub halve_every: usize,
    /// Blocks per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs that use ground-truth centers and boxes for the
    /// selection-dependent terms.
    pub warmup_epochs: usize,
    /// After warm-up, ground-truth instances no predicted candidate claimed
    /// still contribute through their ground-truth center.
    pub fill_missed_with_gt: bool,
    pub sample_points: usize,
    /// Random subset of training blocks visited per epoch (all if unset).
    pub blocks_per_epoch: Option<usize>,
    pub val_every: usize,
    pub cube: f64,
    pub stride: f64,
    /// Minimum sampled points for an instance to act as a block target.
    pub min_target_points: usize,
    pub selection: SelectionConfig,
    pub no_size_prediction: bool,
    pub no_focal: bool,
    pub selection_mode: SelectionMode,
    pub uniform_radius: Option<f64>,
    /// Keep every per-epoch checkpoint instead of only the latest.
    pub keep_all_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.002,
            halve_every: 20,
            batch_size: 4,
            seed: 0,
            warmup_epochs: 5,
            fill_missed_with_gt: true,
            sample_points: 4096,
            blocks_per_epoch: None,
            val_every: 1,
            cube: 1.0,
            stride: 0.5,
            min_target_points: 10,
            selection: SelectionConfig::default(),
            no_size_prediction: false,
            no_focal: false,
            selection_mode: SelectionMode::Greedy,
            uniform_radius: None,
            keep_all_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.halve_every == 0
            || self.val_every == 0
            || self.sample_points == 0
            || self.blocks_per_epoch == Some(0)
            || !(self.lr > 0.0 && self.lr.is_finite())
        {
            return Err(Error::Config(format!("invalid train config {self:?}")));
        }
        self.selection.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        if self.no_focal {
            LossConfig::cross_entropy()
        } else {
            LossConfig::default()
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            selection: self.selection,
            mode: self.selection_mode,
            uniform_radius: self.uniform_radius,
            fixed_box_context: self.no_size_prediction,
            cube: self.cube,
            stride: self.stride,
            sample_points: self.sample_points,
            seed: self.seed,
            ..InferenceConfig::default()
        }
    }
}

/// `lr · 0.5^⌊epoch / halve_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * 0.5f64.powi((epoch / cfg.halve_every) as i32)
}

/// Ablation variants. The first two change training; the rest only change
/// how candidates are drawn at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Default,
    NoSize,
    NoFocal,
    RandomCenters,
    TopkCenters,
    UniformRadius,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Default,
        Variant::NoSize,
        Variant::NoFocal,
        Variant::RandomCenters,
        Variant::TopkCenters,
        Variant::UniformRadius,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::NoSize => "no-size",
            Variant::NoFocal => "no-focal",
            Variant::RandomCenters => "random-centers",
            Variant::TopkCenters => "topk-centers",
            Variant::UniformRadius => "uniform-radius",
        }
    }

    /// Whether the variant needs its own trained model.
    pub fn trains(self) -> bool {
        matches!(self, Variant::Default | Variant::NoSize | Variant::NoFocal)
    }

    pub fn apply_train(self, cfg: &mut TrainConfig) {
        match self {
            Variant::NoSize => cfg.no_size_prediction = true,
            Variant::NoFocal => cfg.no_focal = true,
            _ => {}
        }
    }

    /// Uniform radius is the largest class radius.
    pub fn apply_inference(self, cfg: &mut InferenceConfig, stats: &SceneStats) {
        match self {
            Variant::RandomCenters => cfg.mode = SelectionMode::Random,
            Variant::TopkCenters => cfg.mode = SelectionMode::TopK,
            Variant::UniformRadius => cfg.uniform_radius = Some(stats.class_radii.max_radius()),
            _ => {}
        }
    }
}

/// One instance as a target inside a sampled block.
#[derive(Debug, Clone)]
pub struct BlockTarget {
    pub id: i64,
    pub class: usize,
    /// Sampled row with the highest ground-truth heat.
    pub center_row: usize,
    /// Scene-level instance center.
    pub center: Point3,
    /// Tight box over the instance's sampled points.
    pub bbox: Aabb,
    pub membership: Vec<bool>,
}

/// A sampled block with everything the loss needs.
#[derive(Debug, Clone)]
pub struct PreparedBlock {
    pub input: BlockInput,
    pub heat: HeatmapGT,
    pub semantic: Vec<usize>,
    pub targets: Vec<BlockTarget>,
}

pub fn prepare_block(
    scene: &Scene,
    targets: &[InstanceTarget],
    block: &Block,
    cfg: &TrainConfig,
    knn: usize,
    seed: u64,
) -> Result<PreparedBlock> {
    let block = dataset::sample_points(block, cfg.sample_points, seed)?;
    let positions = block.positions(scene);
    let input = BlockInput::new(build_features(&block, scene), positions.clone(), knn)?;
    let heat = heatmap_for(scene, targets, &block.sampled);
    let semantic = block.sampled.iter().map(|&i| scene.semantic[i]).collect();
    let mut out = Vec::new();
    for t in targets {
        let membership: Vec<bool> = block.sampled.iter().map(|&i| scene.instance[i] == t.id).collect();
        let rows: Vec<usize> = (0..membership.len()).filter(|&r| membership[r]).collect();
        if rows.len() < cfg.min_target_points {
            continue;
        }
        let center_row = rows
            .iter()
            .copied()
            .max_by(|&a, &b| heat.values[a].total_cmp(&heat.values[b]).then(b.cmp(&a)))
            .expect("non-empty");
        if heat.values[center_row] <= SIGMA_G {
            continue;
        }
        let bbox = Aabb::enclosing(rows.iter().map(|&r| &positions[r])).expect("non-empty");
        out.push(BlockTarget {
            id: t.id,
            class: t.class,
            center_row,
            center: scene.positions()[t.center_index],
            bbox,
            membership,
        });
    }
    Ok(PreparedBlock {
        input,
        heat,
        semantic,
        targets: out,
    })
}

/// Loss values, parameter gradients and the number of trained candidates
/// for one block.
pub struct BlockStep {
    pub values: LossValues,
    pub grads: Vec<Tensor>,
    pub candidates: usize,
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// Forward and backward pass for one block.
pub fn block_step(
    model: &Model,
    stats: &SceneStats,
    block: &PreparedBlock,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    warmup: bool,
) -> Result<BlockStep> {
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape);
    let input = &block.input;
    let bb = model.backbone(&mut tape, &pv, input)?;
    let q = model.center_head(&mut tape, &pv, &bb)?;
    let logits = model.semantic_head(&mut tape, &pv, &bb)?;
    let center = losses::center_focal_loss(&mut tape, q, &block.heat.focal_positive, loss_cfg)?;
    let semantic = losses::semantic_ce_loss(&mut tape, logits, &block.semantic)?;

    let pairs: Vec<(usize, usize)> = if warmup {
        block.targets.iter().enumerate().map(|(g, t)| (t.center_row, g)).collect()
    } else {
        let qv = tape.value(q).data().to_vec();
        let lt = tape.value(logits);
        let labels: Vec<usize> = (0..lt.rows()).map(|r| argmax(lt.row_slice(r))).collect();
        let cands = select_centers(&qv, &labels, &input.positions, &stats.class_radii, &cfg.selection)?;
        let gts: Vec<GtCenter> = block
            .targets
            .iter()
            .map(|t| GtCenter {
                position: t.center,
                class: t.class,
            })
            .collect();
        let pos: Vec<Point3> = cands.iter().map(|c| c.position).collect();
        let assigned = associate_candidates_to_gt(&pos, &gts, &stats.class_radii);
        let mut pairs: Vec<(usize, usize)> = cands
            .iter()
            .zip(&assigned)
            .filter_map(|(c, a)| a.map(|g| (c.row, g)))
            .collect();
        if cfg.fill_missed_with_gt {
            for (g, t) in block.targets.iter().enumerate() {
                if !pairs.iter().any(|p| p.1 == g) {
                    pairs.push((t.center_row, g));
                }
            }
        }
        pairs
    };

    let mut terms = LossTerms {
        center,
        semantic,
        bound: None,
        iou: None,
        mask: None,
        size: None,
    };
    if !pairs.is_empty() {
        let mut groups = Vec::with_capacity(pairs.len());
        for &(_, g) in &pairs {
            let class = block.targets[g].class;
            groups.push(
                stats
                    .size_groups
                    .group_of(class)
                    .ok_or_else(|| Error::Config(format!("class {class} has no size group")))?,
            );
        }
        if !cfg.no_size_prediction {
            let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let probs = model.size_head(&mut tape, &pv, &bb, &rows)?;
            terms.size = Some(losses::size_ce_loss(&mut tape, probs, &groups)?);
        }
        let base = model.mask_base(&mut tape, &pv, &bb)?;
        let (mut bounds, mut ious, mut masks, mut members) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (&(row, g), &group) in pairs.iter().zip(&groups) {
            let t = &block.targets[g];
            let size = if cfg.no_size_prediction {
                stats.size_groups.mean_size()
            } else {
                stats.size_groups.sizes[group]
            };
            let out = model.box_head(&mut tape, &pv, &bb, input, row, size)?;
            let gt = Tensor::row(t.bbox.to_raw().to_vec());
            bounds.push(losses::bound_loss(&mut tape, out.corners, &gt, loss_cfg)?);
            ious.push(losses::giou_loss(&mut tape, out.corners, &gt)?);
            let mask_box = if warmup {
                t.bbox
            } else {
                let raw: [f64; 6] = tape.value(out.corners).data().try_into().expect("6 corners");
                Aabb::from_raw(raw)
            };
            masks.push(model.mask_head(&mut tape, &pv, base, input, mask_box.to_raw())?);
            members.push(t.membership.clone());
        }
        terms.bound = Some(mean_of(&mut tape, &bounds)?);
        terms.iou = Some(mean_of(&mut tape, &ious)?);
        terms.mask = Some(losses::mask_focal_loss(&mut tape, &masks, &members, loss_cfg)?);
    }
    let report = losses::total_loss(&mut tape, &terms, loss_cfg)?;
    if let Some(term) = report.values.first_non_finite() {
        return Err(Error::NonFinite(format!("loss term {term}")));
    }
    let mut grads = tape.backward(report.total)?;
    Ok(BlockStep {
        values: report.values,
        grads: pv.gradients(&model.params, &mut grads),
        candidates: pairs.len(),
    })
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub blocks: usize,
    pub candidates: f64,
    pub total: f64,
    pub center: f64,
    pub bound: f64,
    pub iou: f64,
    pub mask: f64,
    pub size: f64,
    pub semantic: f64,
    pub val_mprec: Option<f64>,
    pub val_mrec: Option<f64>,
    pub val_ap50: Option<f64>,
}

pub fn write_run_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_run_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train_scenes: Vec<PathBuf>,
    #[serde(default)]
    pub val_scenes: Vec<PathBuf>,
    #[serde(default)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Epoch and validation AP@50 of the best checkpoint.
    pub best: Option<(usize, f64)>,
    pub best_model: Model,
}

/// Validation metrics (mPrec, mRec, AP@50) over labeled scenes.
pub fn validate(model: &Model, stats: &SceneStats, scenes: &[Scene], cfg: &InferenceConfig) -> Result<(f64, f64, f64)> {
    let mut pairs = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (pred, _) = infer_scene(model, stats, s, cfg)?;
        pairs.push((pred, scene_ground_truth(s)));
    }
    let r = eval::evaluate(&pairs, &[])?;
    Ok((r.m_prec, r.m_rec, r.m_ap50))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
}

/// Trains a fresh model. With `run_dir`, writes `epoch_<k>.ckpt` each
/// epoch, `best.ckpt`, `log.csv` and `run_config.json`.
pub fn train(
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    stats: &SceneStats,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::Empty("training scenes"));
    }
    if model_cfg.num_size_groups != stats.size_groups.k() || model_cfg.num_classes != stats.num_classes {
        return Err(Error::Config(format!(
            "model expects {} classes / {} size groups, stats have {} / {}",
            model_cfg.num_classes,
            model_cfg.num_size_groups,
            stats.num_classes,
            stats.size_groups.k()
        )));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rc = RunConfig {
            train: cfg.clone(),
            model: model_cfg.clone(),
            train_scenes: Vec::new(),
            val_scenes: Vec::new(),
            stats: None,
        };
        let p = dir.join("run_config.json");
        if !p.exists() {
            fs::write(&p, serde_json::to_string_pretty(&rc)?).map_err(|e| Error::io(&p, e))?;
        }
    }

    let targets = train_scenes
        .iter()
        .map(instance_targets)
        .collect::<Result<Vec<_>>>()?;
    let mut blocks: Vec<(usize, Block)> = Vec::new();
    for (si, s) in train_scenes.iter().enumerate() {
        for b in dataset::slice_into_cubes(s, cfg.cube, cfg.stride)? {
            blocks.push((si, b));
        }
    }

    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let loss_cfg = cfg.loss_config();
    let inf_cfg = cfg.inference_config();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_model = model.clone();
    let mut prev_ckpt: Option<PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let warmup = epoch < cfg.warmup_epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 1));
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut rng);
        if let Some(n) = cfg.blocks_per_epoch {
            order.truncate(n);
        }
        let mut sums = LossValues::default();
        let mut cand_sum = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &bi in batch {
                let (si, block) = &blocks[bi];
                let prepared = prepare_block(
                    &train_scenes[*si],
                    &targets[*si],
                    block,
                    cfg,
                    model_cfg.knn,
                    mix(cfg.seed, epoch as u64, 2 + bi as u64),
                )?;
                let step = block_step(&model, stats, &prepared, cfg, &loss_cfg, warmup)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}")),
                        e => e,
                    })?;
                sums.total += step.values.total;
                sums.center += step.values.center;
                sums.bound += step.values.bound;
                sums.iou += step.values.iou;
                sums.mask += step.values.mask;
                sums.size += step.values.size;
                sums.semantic += step.values.semantic;
                cand_sum += step.candidates;
                match &mut acc {
                    None => acc = Some(step.grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&step.grads) {
                            x.add_assign(g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc.expect("non-empty batch").into_iter().map(|g| g.map(|v| v * scale)).collect();
            adam_step(&mut model.params, &grads, &mut adam, lr)?;
        }

        let n = order.len() as f64;
        let mut row = EpochLog {
            epoch,
            lr,
            blocks: order.len(),
            candidates: cand_sum as f64 / n,
            total: sums.total / n,
            center: sums.center / n,
            bound: sums.bound / n,
            iou: sums.iou / n,
            mask: sums.mask / n,
            size: sums.size / n,
            semantic: sums.semantic / n,
            val_mprec: None,
            val_mrec: None,
            val_ap50: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if !val_scenes.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            let (p, r, ap) = validate(&model, stats, val_scenes, &inf_cfg)?;
            row.val_mprec = Some(p);
            row.val_mrec = Some(r);
            row.val_ap50 = Some(ap);
            if best.map_or(true, |(_, b)| ap > b) {
                best = Some((epoch, ap));
                best_model = model.clone();
                if let Some(dir) = run_dir {
                    model.save_checkpoint(
                        &dir.join("best.ckpt"),
                        serde_json::json!({ "epoch": epoch, "val_ap50": ap, "inference": inf_cfg }),
                    )?;
                }
            }
        }
        if let Some(dir) = run_dir {
            let path = dir.join(format!("epoch_{epoch}.ckpt"));
            model.save_checkpoint(&path, serde_json::json!({ "epoch": epoch, "inference": inf_cfg }))?;
            if !cfg.keep_all_checkpoints {
                if let Some(prev) = prev_ckpt.replace(path) {
                    fs::remove_file(&prev).map_err(|e| Error::io(&prev, e))?;
                }
            }
        }
        log.push(row);
        if let Some(dir) = run_dir {
            write_run_log(&dir.join("log.csv"), &log)?;
        }
    }
    if best.is_none() {
        best_model = model.clone();
    }
    Ok(TrainOutput {
        model,
        log,
        best,
        best_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneConfig};

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.002);
        assert_eq!(lr_at(19, &cfg), 0.002);
        assert_eq!(lr_at(20, &cfg), 0.001);
        assert_eq!(lr_at(45, &cfg), 0.0005);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn smoke_one_epoch_writes_checkpoint() {
        let scfg = SceneConfig::default();
        let scene = generate_scene(&scfg, 3).unwrap();
        let stats = SceneStats::compute(std::slice::from_ref(&scene), 2).unwrap();
        let mcfg = ModelConfig::compact(stats.num_classes, stats.size_groups.k());
        let cfg = TrainConfig {
            epochs: 1,
            sample_points: 64,
            blocks_per_epoch: Some(2),
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(std::slice::from_ref(&scene), &[], &stats, &mcfg, &cfg, Some(dir.path())).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].total.is_finite());
        assert!(dir.path().join("epoch_0.ckpt").exists());
        let (m, meta) = Model::load_checkpoint(&dir.path().join("epoch_0.ckpt")).unwrap();
        assert_eq!(m.params, out.model.params);
        assert_eq!(meta["epoch"], 0);
        assert_eq!(read_run_log(&dir.path().join("log.csv")).unwrap(), out.log);
    }
}
