//! Training targets derived from instance labels: Gaussian center heatmaps,
//! tight boxes, per-class radii and size groups.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::geometry::{centroid, Aabb, Point3};

/// Threshold on an instance's Gaussian above which a point counts as a
/// positive for the center focal loss.
pub const SIGMA_G: f64 = 0.4;
/// Floor on an instance half-extent before it becomes a Gaussian sigma.
const MIN_HALF_EXTENT: f64 = 0.01;

/// Index into `points` of the member nearest the centroid; ties go to the
/// lowest index.
pub fn gt_center_index(points: &[Point3]) -> Result<usize> {
    let c = centroid(points)?;
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = p.distance_squared(c);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

pub fn gt_center_point(points: &[Point3]) -> Result<Point3> {
    Ok(points[gt_center_index(points)?])
}

/// Axis-aligned Gaussian anchored on a member point of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub center: Point3,
    pub sigma: [f64; 3],
}

impl GaussianSpec {
    /// Sigma per axis is half of the instance half-extent (floored at 1 cm).
    pub fn from_points(points: &[Point3]) -> Result<Self> {
        let center = gt_center_point(points)?;
        let half = Aabb::enclosing(points)
            .ok_or(Error::Empty("instance"))?
            .extents()
            * 0.5;
        Ok(Self {
            center,
            sigma: [half.x, half.y, half.z].map(|h| h.max(MIN_HALF_EXTENT) / 2.0),
        })
    }

    /// Unnormalized Gaussian, equal to 1 at the center.
    pub fn eval(&self, p: Point3) -> f64 {
        let d = p - self.center;
        let q: f64 = (0..3).map(|a| (d[a] / self.sigma[a]).powi(2)).sum();
        (-0.5 * q).exp()
    }
}

/// Per-instance targets of a scene, keyed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub id: i64,
    pub class: usize,
    pub gaussian: GaussianSpec,
    /// Scene index of the Gaussian center point.
    pub center_index: usize,
    pub bbox: Aabb,
    pub num_points: usize,
}

pub fn instance_targets(scene: &Scene) -> Result<Vec<InstanceTarget>> {
    scene
        .instances()
        .into_iter()
        .map(|inst| {
            let pts: Vec<Point3> = inst.points.iter().map(|&i| scene.positions()[i]).collect();
            let local = gt_center_index(&pts)?;
            Ok(InstanceTarget {
                id: inst.id,
                class: inst.class,
                gaussian: GaussianSpec::from_points(&pts)?,
                center_index: inst.points[local],
                bbox: Aabb::enclosing(&pts).ok_or(Error::Empty("instance"))?,
                num_points: pts.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGT {
    pub values: Vec<f64>,
    pub focal_positive: Vec<bool>,
}

/// Ground-truth heatmap for the scene points listed in `indices`, each
/// evaluated under its own instance's Gaussian. Background is 0.
pub fn heatmap_for(scene: &Scene, targets: &[InstanceTarget], indices: &[usize]) -> HeatmapGT {
    let by_id: BTreeMap<i64, &InstanceTarget> = targets.iter().map(|t| (t.id, t)).collect();
    let values: Vec<f64> = indices
        .iter()
        .map(|&i| match by_id.get(&scene.instance[i]) {
            Some(t) if i == t.center_index => 1.0,
            Some(t) => t.gaussian.eval(scene.positions()[i]),
            None => 0.0,
        })
        .collect();
    let focal_positive = values.iter().map(|&v| v > SIGMA_G).collect();
    HeatmapGT {
        values,
        focal_positive,
    }
}

pub fn gt_heatmap(scene: &Scene) -> Result<HeatmapGT> {
    let targets = instance_targets(scene)?;
    let all: Vec<usize> = (0..scene.len()).collect();
    Ok(heatmap_for(scene, &targets, &all))
}

/// Tight box per instance, ascending instance id.
pub fn gt_boxes(scene: &Scene) -> Vec<(i64, Aabb)> {
    scene
        .instances()
        .into_iter()
        .filter_map(|inst| {
            Aabb::enclosing(inst.points.iter().map(|&i| &scene.positions()[i]))
                .map(|b| (inst.id, b))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRadiusTable {
    /// Indexed by class id; `None` for classes with no training instance.
    pub radii: Vec<Option<f64>>,
    pub global_mean: f64,
}

impl ClassRadiusTable {
    pub fn uniform(num_classes: usize, r: f64) -> Self {
        Self {
            radii: vec![Some(r); num_classes],
            global_mean: r,
        }
    }

    /// Radius of `class`, falling back to the global mean.
    pub fn radius(&self, class: usize) -> f64 {
        self.radii
            .get(class)
            .copied()
            .flatten()
            .unwrap_or(self.global_mean)
    }

    pub fn max_radius(&self) -> f64 {
        self.radii
            .iter()
            .flatten()
            .cloned()
            .fold(self.global_mean, f64::max)
    }
}

#[derive(Default, Clone, Copy)]
struct ClassAccum {
    count: usize,
    radius_sum: f64,
    extent_sum: [f64; 3],
    volume_sum: f64,
}

fn accumulate(scenes: &[Scene]) -> (usize, BTreeMap<usize, ClassAccum>) {
    let mut num_classes = 0;
    let mut acc: BTreeMap<usize, ClassAccum> = BTreeMap::new();
    for s in scenes {
        num_classes = num_classes.max(s.num_classes);
        let classes: BTreeMap<i64, usize> =
            s.instances().into_iter().map(|i| (i.id, i.class)).collect();
        for (id, b) in gt_boxes(s) {
            let e = b.extents();
            let a = acc.entry(classes[&id]).or_default();
            a.count += 1;
            a.radius_sum += b.half_diagonal();
            for k in 0..3 {
                a.extent_sum[k] += e[k];
            }
            a.volume_sum += e.x * e.y * e.z;
        }
    }
    (num_classes, acc)
}

/// `r_ℓ` = mean half box diagonal over the class's instances.
pub fn compute_class_radii(scenes: &[Scene]) -> Result<ClassRadiusTable> {
    let (num_classes, acc) = accumulate(scenes);
    let total: usize = acc.values().map(|a| a.count).sum();
    if total == 0 {
        return Err(Error::Empty("no instances to compute class radii"));
    }
    let global_mean = acc.values().map(|a| a.radius_sum).sum::<f64>() / total as f64;
    let radii = (0..num_classes)
        .map(|c| acc.get(&c).map(|a| a.radius_sum / a.count as f64))
        .collect();
    Ok(ClassRadiusTable { radii, global_mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeGroupTable {
    pub requested_k: usize,
    /// Mean (length, width, height) per group, ascending volume.
    pub sizes: Vec<[f64; 3]>,
    /// Group index per class id; `None` for classes without instances.
    pub class_group: Vec<Option<usize>>,
}

impl SizeGroupTable {
    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn group_of(&self, class: usize) -> Option<usize> {
        self.class_group.get(class).copied().flatten()
    }

    /// Mean of all group sizes; the fixed context used when size
    /// prediction is disabled.
    pub fn mean_size(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for s in &self.sizes {
            for k in 0..3 {
                m[k] += s[k] / self.sizes.len() as f64;
            }
        }
        m
    }
}

/// Sorts classes by mean instance box volume and cuts them into `k`
/// contiguous, near-equal groups. `k` shrinks to the number of classes with
/// instances when there are fewer.
pub fn compute_size_groups(scenes: &[Scene], k: usize) -> Result<SizeGroupTable> {
    if k == 0 {
        return Err(Error::Config("size group count must be positive".into()));
    }
    let (num_classes, acc) = accumulate(scenes);
    if acc.is_empty() {
        return Err(Error::Empty("no instances to compute size groups"));
    }
    let mut classes: Vec<(usize, ClassAccum)> = acc.into_iter().collect();
    classes.sort_by(|a, b| {
        let va = a.1.volume_sum / a.1.count as f64;
        let vb = b.1.volume_sum / b.1.count as f64;
        va.total_cmp(&vb).then(a.0.cmp(&b.0))
    });
    let groups = k.min(classes.len());
    let (base, extra) = (classes.len() / groups, classes.len() % groups);
    let mut class_group = vec![None; num_classes];
    let mut sizes = Vec::with_capacity(groups);
    let mut it = classes.into_iter();
    for g in 0..groups {
        let take = base + usize::from(g < extra);
        let mut sum = [0.0; 3];
        let mut count = 0;
        for (class, a) in it.by_ref().take(take) {
            class_group[class] = Some(g);
            for d in 0..3 {
                sum[d] += a.extent_sum[d];
            }
            count += a.count;
        }
        sizes.push(sum.map(|s| s / count as f64));
    }
    Ok(SizeGroupTable {
        requested_k: k,
        sizes,
        class_group,
    })
}

/// Statistics file written by `stats` and read by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub num_classes: usize,
    pub class_radii: ClassRadiusTable,
    pub size_groups: SizeGroupTable,
}

impl SceneStats {
    pub fn compute(scenes: &[Scene], k: usize) -> Result<Self> {
        Ok(Self {
            num_classes: scenes.iter().map(|s| s.num_classes).max().unwrap_or(0),
            class_radii: compute_class_radii(scenes)?,
            size_groups: compute_size_groups(scenes, k)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
