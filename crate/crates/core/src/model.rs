//! The network: a point-feature backbone (shared per-point MLP, k-NN local
//! max-pool, global max-pool) and five heads: center heatmap, per-point
//! semantics, size-group classification, box regression and mask
//! prediction.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::dataset::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Box geometry fed to the box and mask heads is given in these units per
/// meter.
const BOX_INFO_SCALE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Semantic classes including background.
    pub num_classes: usize,
    pub num_size_groups: usize,
    pub knn: usize,
    pub point_mlp: Vec<usize>,
    pub local_width: usize,
    pub global_width: usize,
    pub feature_width: usize,
    /// Hidden widths of the center head; a final 1-wide layer follows.
    pub center_hidden: Vec<usize>,
    pub semantic_hidden: usize,
    pub size_hidden: usize,
    pub box_local: Vec<usize>,
    pub box_hidden: Vec<usize>,
    pub mask_point_reduce: usize,
    pub mask_global_reduce: usize,
    pub mask_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Widths following the published architecture table where they carry
    /// over to the simplified backbone.
    pub fn paper_widths(num_classes: usize, num_size_groups: usize) -> Self {
        Self {
            num_classes,
            num_size_groups,
            knn: 16,
            point_mlp: vec![64, 128],
            local_width: 128,
            global_width: 512,
            feature_width: 128,
            center_hidden: vec![128, 64, 32],
            semantic_hidden: 64,
            size_hidden: 128,
            box_local: vec![64, 128, 256],
            box_hidden: vec![512, 128],
            mask_point_reduce: 64,
            mask_global_reduce: 64,
            mask_hidden: vec![64, 32],
        }
    }

    /// Narrow variant sized for single-core desk training.
    pub fn compact(num_classes: usize, num_size_groups: usize) -> Self {
        Self {
            num_classes,
            num_size_groups,
            knn: 12,
            point_mlp: vec![24, 32],
            local_width: 32,
            global_width: 64,
            feature_width: 32,
            center_hidden: vec![32, 16, 16],
            semantic_hidden: 16,
            size_hidden: 16,
            box_local: vec![24, 32],
            box_hidden: vec![48, 24],
            mask_point_reduce: 24,
            mask_global_reduce: 16,
            mask_hidden: vec![24, 12],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .point_mlp
            .iter()
            .chain(&self.center_hidden)
            .chain(&self.box_local)
            .chain(&self.box_hidden)
            .chain(&self.mask_hidden)
            .chain([
                &self.local_width,
                &self.global_width,
                &self.feature_width,
                &self.semantic_hidden,
                &self.size_hidden,
                &self.mask_point_reduce,
                &self.mask_global_reduce,
                &self.knn,
                &self.num_size_groups,
            ]);
        if self.num_classes < 2 {
            return Err(Error::Config("need background plus one class".into()));
        }
        if self.point_mlp.is_empty() || self.box_local.is_empty() || self.mask_hidden.is_empty() {
            return Err(Error::Config("empty MLP".into()));
        }
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("zero layer width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Dense {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| {
                if zero {
                    0.0
                } else {
                    self.rng.gen_range(-bound..bound)
                }
            })
            .collect();
        let w = self.store.add(
            format!("{name}.w"),
            Tensor::matrix(fan_in, fan_out, data).expect("dense shape"),
        );
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Dense { w, b }
    }

    /// Hidden layers (ReLU) followed by an optional zero-initialized output.
    fn mlp(&mut self, name: &str, input: usize, hidden: &[usize], out: Option<usize>) -> Vec<Dense> {
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(self.dense(&format!("{name}.{i}"), width, h, false));
            width = h;
        }
        if let Some(o) = out {
            layers.push(self.dense(&format!("{name}.out"), width, o, true));
        }
        layers
    }
}

#[derive(Debug, Clone)]
struct Layers {
    point_mlp: Vec<Dense>,
    local: Dense,
    global: Dense,
    fuse: Dense,
    center: Vec<Dense>,
    semantic: Vec<Dense>,
    size: Vec<Dense>,
    box_local: Vec<Dense>,
    box_head: Vec<Dense>,
    mask_point: Dense,
    mask_global: Dense,
    /// First mask layer, split into the feature part and the box part.
    mask_in_feat: Dense,
    mask_in_box: ParamId,
    mask_rest: Vec<Dense>,
}

/// Architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

/// Everything the model needs to run on one block of points.
#[derive(Debug, Clone)]
pub struct BlockInput {
    pub features: Tensor,
    pub positions: Vec<Point3>,
    /// Row-major `N × k` neighbor indices (self included).
    pub knn: Arc<[usize]>,
    pub k: usize,
}

impl BlockInput {
    pub fn new(features: Tensor, positions: Vec<Point3>, k: usize) -> Result<Self> {
        if features.rows() != positions.len() || features.cols() != FEATURE_DIM {
            return Err(Error::Shape {
                op: "BlockInput::new",
                lhs: features.shape().to_vec(),
                rhs: vec![positions.len(), FEATURE_DIM],
            });
        }
        if positions.is_empty() {
            return Err(Error::Empty("block input"));
        }
        let k = k.min(positions.len());
        let knn = knn_indices(&positions, k).into();
        Ok(Self {
            features,
            positions,
            knn,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Brute-force k nearest neighbors, self first, then by distance with ties
/// to the lower index. Points at a position already in the list are
/// skipped, so exact duplicates do not use up neighbor slots; rows with
/// fewer than `k` distinct positions are padded with self.
pub fn knn_indices(positions: &[Point3], k: usize) -> Vec<usize> {
    let n = positions.len();
    let mut out = Vec::with_capacity(n * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for (i, p) in positions.iter().enumerate() {
        let row_start = out.len();
        out.push(i);
        let mut window = (4 * k).max(8);
        loop {
            order.clear();
            order.extend(positions.iter().enumerate().map(|(j, q)| (p.distance_squared(*q), j)));
            let partial = window < n;
            if partial {
                order.select_nth_unstable_by(window - 1, cmp);
                order.truncate(window);
            }
            order.sort_unstable_by(cmp);
            out.truncate(row_start + 1);
            for &(_, j) in &order {
                if out.len() - row_start == k {
                    break;
                }
                if !out[row_start..].iter().any(|&m| positions[m] == positions[j]) {
                    out.push(j);
                }
            }
            if out.len() - row_start == k || !partial {
                break;
            }
            window *= 4;
        }
        out.resize(row_start + k, i);
    }
    out
}

/// Backbone outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    /// `N × F` fused per-point features.
    pub per_point: Var,
    /// `1 × G` global feature.
    pub global: Var,
}

/// Candidate-independent part of the mask head, computed once per block.
#[derive(Debug, Clone, Copy)]
pub struct MaskBase(Var);

#[derive(Debug, Clone, Copy)]
pub struct BoxOutput {
    /// `1 × 6` absolute corners `(x_min, y_min, z_min, x_max, y_max, z_max)`,
    /// not canonicalized.
    pub corners: Var,
    /// The size-group neighborhood was empty and the candidate's own row
    /// was used instead.
    pub fell_back: bool,
}

fn apply(tape: &mut Tape, pv: &ParamVars, x: Var, layers: &[Dense], relu_last: bool) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = tape.linear(h, pv.get(l.w), pv.get(l.b))?;
        if relu_last || i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = &config;
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let point_mlp = b.mlp("backbone.point", FEATURE_DIM, &c.point_mlp, None);
        let pw = *c.point_mlp.last().expect("validated");
        let local = b.dense("backbone.local", 2 * pw, c.local_width, false);
        let global = b.dense("backbone.global", c.local_width, c.global_width, false);
        let fuse = b.dense(
            "backbone.fuse",
            c.local_width + c.global_width,
            c.feature_width,
            false,
        );
        let f = c.feature_width;
        let g = c.global_width;
        let center = b.mlp("center", f, &c.center_hidden, Some(1));
        let semantic = b.mlp("semantic", f, &[c.semantic_hidden], Some(c.num_classes));
        let size = b.mlp("size", f + g, &[c.size_hidden], Some(c.num_size_groups));
        let box_local = b.mlp("box.local", 3 + f, &c.box_local, None);
        let bl = *c.box_local.last().expect("validated");
        let box_head = b.mlp("box.head", bl + g, &c.box_hidden, Some(6));
        let mask_point = b.dense("mask.point", f, c.mask_point_reduce, false);
        let mask_global = b.dense("mask.global", g, c.mask_global_reduce, false);
        let m0 = c.mask_hidden[0];
        let mask_in_feat = b.dense(
            "mask.in",
            c.mask_point_reduce + c.mask_global_reduce,
            m0,
            false,
        );
        let bound = (6.0 / (c.mask_point_reduce + c.mask_global_reduce + 6) as f64).sqrt();
        let box_w = (0..6 * m0).map(|_| b.rng.gen_range(-bound..bound)).collect();
        let mask_in_box = b
            .store
            .add("mask.in.w_box", Tensor::matrix(6, m0, box_w).expect("shape"));
        let mask_rest = b.mlp("mask", m0, &c.mask_hidden[1..], Some(1));
        let layers = Layers {
            point_mlp,
            local,
            global,
            fuse,
            center,
            semantic,
            size,
            box_local,
            box_head,
            mask_point,
            mask_global,
            mask_in_feat,
            mask_in_box,
            mask_rest,
        };
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    /// Rebuilds a model from a config and a parameter store whose names and
    /// shapes must match the architecture exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if m.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                m.params.len(),
                params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in m.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n2} {:?} does not match {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    /// Heatmap and semantic logits without recording gradients.
    pub fn predict_points(&self, input: &BlockInput) -> Result<PointPredictions> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let bb = self.backbone(&mut tape, &pv, input)?;
        let q = self.center_head(&mut tape, &pv, &bb)?;
        let logits = self.semantic_head(&mut tape, &pv, &bb)?;
        Ok(PointPredictions {
            heatmap: tape.value(q).data().to_vec(),
            semantic_logits: tape.value(logits).clone(),
        })
    }

    /// Writes parameters plus `{"model": config, ...extra}` as metadata.
    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "model": self.config });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        self.params.save(path, meta)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = ParamStore::load(path)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{}: no model config", path.display())))?,
        )?;
        Ok((Self::from_params(config, params)?, meta))
    }

    pub fn backbone(&self, tape: &mut Tape, pv: &ParamVars, input: &BlockInput) -> Result<BackboneVars> {
        let l = &self.layers;
        let x = tape.constant(input.features.clone());
        let h = apply(tape, pv, x, &l.point_mlp, true)?;
        let neigh = tape.gather_rows(h, input.knn.clone())?;
        let pooled = tape.segment_max(neigh, input.k)?;
        let local_in = tape.concat(&[h, pooled])?;
        let local = apply(tape, pv, local_in, &[l.local], true)?;
        let g_pre = apply(tape, pv, local, &[l.global], true)?;
        let global = tape.max_over_points(g_pre)?;
        let g_b = tape.broadcast_rows(global, input.len())?;
        let fuse_in = tape.concat(&[local, g_b])?;
        let per_point = apply(tape, pv, fuse_in, &[l.fuse], true)?;
        Ok(BackboneVars { per_point, global })
    }

    /// `N × 1` center probabilities.
    pub fn center_head(&self, tape: &mut Tape, pv: &ParamVars, bb: &BackboneVars) -> Result<Var> {
        let logits = apply(tape, pv, bb.per_point, &self.layers.center, false)?;
        Ok(tape.sigmoid(logits))
    }

    /// `N × L` semantic logits.
    pub fn semantic_head(&self, tape: &mut Tape, pv: &ParamVars, bb: &BackboneVars) -> Result<Var> {
        apply(tape, pv, bb.per_point, &self.layers.semantic, false)
    }

    /// `T × K` size-group probabilities for the candidate rows.
    pub fn size_head(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        bb: &BackboneVars,
        rows: &[usize],
    ) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Empty("size_head candidates"));
        }
        let feats = tape.gather_rows(bb.per_point, rows.to_vec())?;
        let g = tape.broadcast_rows(bb.global, rows.len())?;
        let ctx = tape.concat(&[feats, g])?;
        let logits = apply(tape, pv, ctx, &self.layers.size, false)?;
        Ok(tape.softmax(logits))
    }

    /// Regresses the box of the candidate at row `row` from the points inside
    /// an axis-aligned window of extents `size` centered on it.
    pub fn box_head(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        bb: &BackboneVars,
        input: &BlockInput,
        row: usize,
        size: [f64; 3],
    ) -> Result<BoxOutput> {
        let c = input.positions[row];
        let mut nbr: Vec<usize> = input
            .positions
            .iter()
            .enumerate()
            .filter(|(_, p)| (0..3).all(|a| (p[a] - c[a]).abs() <= size[a] * 0.5))
            .map(|(i, _)| i)
            .collect();
        let fell_back = nbr.is_empty();
        if fell_back {
            nbr.push(row);
        }
        let rel: Vec<f64> = nbr
            .iter()
            .flat_map(|&i| ((input.positions[i] - c) * BOX_INFO_SCALE).to_array())
            .collect();
        let rel = tape.constant(Tensor::matrix(nbr.len(), 3, rel)?);
        let feats = tape.gather_rows(bb.per_point, nbr)?;
        let x = tape.concat(&[rel, feats])?;
        let h = apply(tape, pv, x, &self.layers.box_local, true)?;
        let pooled = tape.max_over_points(h)?;
        let ctx = tape.concat(&[pooled, bb.global])?;
        let offsets = apply(tape, pv, ctx, &self.layers.box_head, false)?;
        let anchor = tape.constant(Tensor::row([c.to_array(), c.to_array()].concat()));
        let corners = tape.add(offsets, anchor)?;
        Ok(BoxOutput { corners, fell_back })
    }

    pub fn mask_base(&self, tape: &mut Tape, pv: &ParamVars, bb: &BackboneVars) -> Result<MaskBase> {
        let l = &self.layers;
        let n = tape.value(bb.per_point).rows();
        let pr = apply(tape, pv, bb.per_point, &[l.mask_point], true)?;
        let gr = apply(tape, pv, bb.global, &[l.mask_global], true)?;
        let gr = tape.broadcast_rows(gr, n)?;
        let feat = tape.concat(&[pr, gr])?;
        let base = tape.linear(feat, pv.get(l.mask_in_feat.w), pv.get(l.mask_in_feat.b))?;
        Ok(MaskBase(base))
    }

    /// `N × 1` mask probabilities for one box. The box enters as fixed
    /// per-point geometry `(p - min, max - p)`.
    pub fn mask_head(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        base: MaskBase,
        input: &BlockInput,
        corners: [f64; 6],
    ) -> Result<Var> {
        let l = &self.layers;
        let mut info = Vec::with_capacity(input.len() * 6);
        for p in &input.positions {
            for a in 0..3 {
                info.push((p[a] - corners[a]) * BOX_INFO_SCALE);
            }
            for a in 0..3 {
                info.push((corners[3 + a] - p[a]) * BOX_INFO_SCALE);
            }
        }
        let info = tape.constant(Tensor::matrix(input.len(), 6, info)?);
        let boxed = tape.matmul(info, pv.get(l.mask_in_box))?;
        let h = tape.add(base.0, boxed)?;
        let h = tape.relu(h);
        let logits = apply(tape, pv, h, &l.mask_rest, false)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Concrete (tape-free) outputs of the per-point heads on one block.
#[derive(Debug, Clone)]
pub struct PointPredictions {
    pub heatmap: Vec<f64>,
    pub semantic_logits: Tensor,
}

impl PointPredictions {
    pub fn semantic_labels(&self) -> Vec<usize> {
        (0..self.semantic_logits.rows())
            .map(|i| argmax(self.semantic_logits.row_slice(i)))
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
