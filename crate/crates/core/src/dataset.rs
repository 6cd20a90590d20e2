//! Synthetic labeled scenes, the `.scn.txt` scene format, sliding-window
//! cube slicing, fixed-size point sampling and per-point input features.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point3, PointCloud};

pub const BACKGROUND_CLASS: usize = 0;
pub const BACKGROUND_INSTANCE: i64 = -1;
pub const SCENE_SUFFIX: &str = ".scn.txt";
/// Width of the per-point input feature row.
pub const FEATURE_DIM: usize = 9;

/// Labeled point cloud. Class 0 is background; instance `-1` is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub semantic: Vec<usize>,
    pub instance: Vec<i64>,
    pub num_classes: usize,
    pub extent: Aabb,
}

/// Points of one labeled instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRef {
    pub id: i64,
    pub class: usize,
    pub points: Vec<usize>,
}

impl Scene {
    pub fn new(
        cloud: PointCloud,
        semantic: Vec<usize>,
        instance: Vec<i64>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = cloud.len();
        if semantic.len() != n || instance.len() != n {
            return Err(Error::Shape {
                op: "Scene::new",
                lhs: vec![n],
                rhs: vec![semantic.len(), instance.len()],
            });
        }
        if let Some(&c) = semantic.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!(
                "semantic id {c} outside {num_classes} classes"
            )));
        }
        let mut class_of = std::collections::BTreeMap::new();
        for (&s, &i) in semantic.iter().zip(&instance) {
            if i < BACKGROUND_INSTANCE {
                return Err(Error::Config(format!("instance id {i} below -1")));
            }
            if i >= 0 {
                if let Some(prev) = class_of.insert(i, s) {
                    if prev != s {
                        return Err(Error::Config(format!(
                            "instance {i} carries classes {prev} and {s}"
                        )));
                    }
                }
            }
        }
        let extent = cloud.bounds().ok_or(Error::Empty("scene"))?;
        Ok(Self {
            cloud,
            semantic,
            instance,
            num_classes,
            extent,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.cloud.positions
    }

    /// Labeled instances in ascending id order.
    pub fn instances(&self) -> Vec<InstanceRef> {
        let mut map: std::collections::BTreeMap<i64, InstanceRef> = Default::default();
        for (i, (&id, &class)) in self.instance.iter().zip(&self.semantic).enumerate() {
            if id >= 0 {
                map.entry(id)
                    .or_insert_with(|| InstanceRef {
                        id,
                        class,
                        points: Vec::new(),
                    })
                    .points
                    .push(i);
            }
        }
        map.into_values().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    SolidCuboid,
    SolidEllipsoid,
    /// Points on an ellipsoidal surface only; nothing near the centroid.
    HollowShell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub family: ShapeFamily,
    /// Mean (length, width, height) in meters.
    pub mean_extents: [f64; 3],
    /// Relative per-axis jitter: extents are scaled by `1 + U(-j, j)`.
    pub jitter: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Foreground classes; class id `k + 1` is `classes[k]`.
    pub classes: Vec<ClassSpec>,
    pub instances: (usize, usize),
    pub points_per_instance: (usize, usize),
    /// Floor points per square meter.
    pub background_density: f64,
    /// Floor size (x, y) in meters; objects stand on the floor at z = 0.
    pub floor: [f64; 2],
    /// Minimum clearance between instance footprints.
    pub min_gap: f64,
    pub color_noise: f64,
    pub max_placement_retries: usize,
}

impl Default for SceneConfig {
    /// Three foreground classes with distinct sizes, one of them hollow,
    /// on a 2 m floor.
    fn default() -> Self {
        Self {
            classes: vec![
                ClassSpec {
                    name: "crate".into(),
                    family: ShapeFamily::SolidCuboid,
                    mean_extents: [0.24, 0.24, 0.24],
                    jitter: 0.1,
                    color: [0.80, 0.30, 0.20],
                },
                ClassSpec {
                    name: "ball".into(),
                    family: ShapeFamily::SolidEllipsoid,
                    mean_extents: [0.32, 0.32, 0.28],
                    jitter: 0.1,
                    color: [0.20, 0.60, 0.30],
                },
                ClassSpec {
                    name: "tub".into(),
                    family: ShapeFamily::HollowShell,
                    mean_extents: [0.44, 0.40, 0.32],
                    jitter: 0.1,
                    color: [0.25, 0.35, 0.85],
                },
            ],
            instances: (2, 4),
            points_per_instance: (120, 200),
            background_density: 120.0,
            floor: [2.0, 2.0],
            min_gap: 0.1,
            color_noise: 0.05,
            max_placement_retries: 500,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.instances.0 > self.instances.1 {
            return bad("instances range is empty");
        }
        if self.points_per_instance.0 == 0
            || self.points_per_instance.0 > self.points_per_instance.1
        {
            return bad("points_per_instance range is empty");
        }
        if self.instances.1 > 0 && self.classes.is_empty() {
            return bad("instances requested but no classes");
        }
        if self.floor.iter().any(|&f| f <= 0.0) || self.background_density < 0.0 {
            return bad("floor extents must be positive");
        }
        for c in &self.classes {
            if c.mean_extents.iter().any(|&e| e <= 0.0) || !(0.0..1.0).contains(&c.jitter) {
                return Err(Error::Config(format!("class {}: bad extents", c.name)));
            }
        }
        Ok(())
    }
}

fn noisy_color(rng: &mut ChaCha8Rng, base: [f64; 3], noise: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0))
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let p = Point3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = p.norm();
        if n > 1e-3 && n <= 1.0 {
            return p * (1.0 / n);
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, b: &Aabb) -> Point3 {
    let c = b.center();
    let h = b.extents() * 0.5;
    match family {
        ShapeFamily::SolidCuboid => Point3::new(
            rng.gen_range(b.min.x..=b.max.x),
            rng.gen_range(b.min.y..=b.max.y),
            rng.gen_range(b.min.z..=b.max.z),
        ),
        ShapeFamily::SolidEllipsoid => loop {
            let u = Point3::new(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            );
            if u.norm() <= 1.0 {
                return Point3::new(c.x + u.x * h.x, c.y + u.y * h.y, c.z + u.z * h.z);
            }
        },
        ShapeFamily::HollowShell => {
            let d = unit_direction(rng);
            Point3::new(c.x + d.x * h.x, c.y + d.y * h.y, c.z + d.z * h.z)
        }
    }
}

fn footprints_clash(a: &Aabb, b: &Aabb, gap: f64) -> bool {
    (0..2).all(|ax| a.min[ax] - gap < b.max[ax] && b.min[ax] - gap < a.max[ax])
}

/// Deterministic synthetic scene: a noisy floor plus non-overlapping
/// instances standing on it.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();

    let floor_points =
        ((config.background_density * config.floor[0] * config.floor[1]).round() as usize).max(1);
    for _ in 0..floor_points {
        positions.push(Point3::new(
            rng.gen_range(0.0..=config.floor[0]),
            rng.gen_range(0.0..=config.floor[1]),
            rng.gen_range(0.0..=0.01),
        ));
        colors.push(noisy_color(&mut rng, [0.55, 0.55, 0.5], config.color_noise));
        semantic.push(BACKGROUND_CLASS);
        instance.push(BACKGROUND_INSTANCE);
    }

    let count = rng.gen_range(config.instances.0..=config.instances.1);
    let hollow: Vec<usize> = config
        .classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.family == ShapeFamily::HollowShell)
        .map(|(i, _)| i)
        .collect();
    let mut placed: Vec<Aabb> = Vec::new();
    for t in 0..count {
        let class_idx = if t == 0 && !hollow.is_empty() {
            hollow[rng.gen_range(0..hollow.len())]
        } else {
            rng.gen_range(0..config.classes.len())
        };
        let spec = &config.classes[class_idx];
        let ext = spec
            .mean_extents
            .map(|e| e * (1.0 + rng.gen_range(-spec.jitter..=spec.jitter)));
        let mut bbox = None;
        for _ in 0..config.max_placement_retries {
            let (sx, sy) = (config.floor[0] - ext[0], config.floor[1] - ext[1]);
            if sx < 0.0 || sy < 0.0 {
                break;
            }
            let min = Point3::new(rng.gen_range(0.0..=sx), rng.gen_range(0.0..=sy), 0.02);
            let cand = Aabb {
                min,
                max: min + Point3::from_array(ext),
            };
            if !placed.iter().any(|p| footprints_clash(p, &cand, config.min_gap)) {
                bbox = Some(cand);
                break;
            }
        }
        let bbox = bbox.ok_or_else(|| Error::Generation {
            seed,
            reason: format!("could not place instance {t} ({})", spec.name),
        })?;
        placed.push(bbox);
        let n = rng.gen_range(config.points_per_instance.0..=config.points_per_instance.1);
        for _ in 0..n {
            positions.push(sample_shape(&mut rng, spec.family, &bbox));
            colors.push(noisy_color(&mut rng, spec.color, config.color_noise));
            semantic.push(class_idx + 1);
            instance.push(t as i64);
        }
    }

    let cloud = PointCloud::new(positions, Some(colors))?;
    Scene::new(cloud, semantic, instance, config.num_classes())
}

/// Reads a `.scn.txt` scene: header `N L`, then `N` rows of
/// `x y z r g b semantic_id instance_id`.
pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, path)
}

pub fn parse_scene(text: &str, path: &Path) -> Result<Scene> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "no points".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let [n, l] = head[..] else {
        return Err(err(hline, format!("header needs 2 fields, got {}", head.len())));
    };
    let n: usize = n.parse().map_err(|e| err(hline, format!("point count: {e}")))?;
    let l: usize = l.parse().map_err(|e| err(hline, format!("class count: {e}")))?;
    if n == 0 {
        return Err(err(hline, "no points".into()));
    }

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut semantic = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    for (ln, row) in lines {
        let f: Vec<&str> = row.split_whitespace().collect();
        if f.len() != 8 {
            return Err(err(ln, format!("expected 8 fields, got {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse::<f64>()
                .map_err(|e| err(ln, format!("field {}: {e}", k + 1)))
        };
        positions.push(Point3::new(num(0)?, num(1)?, num(2)?));
        colors.push([num(3)?, num(4)?, num(5)?]);
        let s: usize = f[6]
            .parse()
            .map_err(|e| err(ln, format!("semantic id: {e}")))?;
        if s >= l {
            return Err(err(ln, format!("semantic id {s} >= class count {l}")));
        }
        semantic.push(s);
        instance.push(
            f[7].parse()
                .map_err(|e| err(ln, format!("instance id: {e}")))?,
        );
    }
    if positions.len() != n {
        return Err(err(
            hline,
            format!("header declares {n} points, found {}", positions.len()),
        ));
    }
    let cloud = PointCloud::new(positions, Some(colors))?;
    Scene::new(cloud, semantic, instance, l)
}

pub fn format_scene(scene: &Scene) -> String {
    let mut out = String::with_capacity(scene.len() * 64);
    let _ = writeln!(out, "{} {}", scene.len(), scene.num_classes);
    for i in 0..scene.len() {
        let p = scene.cloud.positions[i];
        let c = scene.cloud.color(i);
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            p.x, p.y, p.z, c[0], c[1], c[2], scene.semantic[i], scene.instance[i]
        );
    }
    out
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, format_scene(scene)).map_err(|e| Error::io(path, e))
}

/// ASCII PLY with per-vertex colors, readable by common point-cloud viewers.
pub fn write_ply(path: &Path, positions: &[Point3], colors: &[[f64; 3]]) -> Result<()> {
    debug_assert_eq!(positions.len(), colors.len());
    let mut out = Vec::with_capacity(positions.len() * 40);
    let io = |e| Error::io(path, e);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        positions.len()
    )
    .map_err(io)?;
    for (p, c) in positions.iter().zip(colors) {
        let [r, g, b] = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(out, "{} {} {} {r} {g} {b}", p.x, p.y, p.z).map_err(io)?;
    }
    fs::write(path, out).map_err(io)
}

/// Distinct, deterministic display color for an integer label.
pub fn label_color(label: i64) -> [f64; 3] {
    if label < 0 {
        return [0.3, 0.3, 0.3];
    }
    let h = (label as f64 * 0.618_033_988_75).fract();
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (v, s) = (0.95, 0.75);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One sliding-window cube of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub origin: Point3,
    pub size: f64,
    /// Scene indices of every point inside the cube, ascending.
    pub indices: Vec<usize>,
    /// Scene indices chosen by [`sample_points`]; equals `indices` until
    /// sampled.
    pub sampled: Vec<usize>,
}

impl Block {
    pub fn positions(&self, scene: &Scene) -> Vec<Point3> {
        self.sampled.iter().map(|&i| scene.cloud.positions[i]).collect()
    }

    pub fn num_sampled(&self) -> usize {
        self.sampled.len()
    }
}

/// Window origins along one axis: `lo + k·stride`, with the last window
/// shifted so it ends exactly at `hi`.
pub fn window_origins(lo: f64, hi: f64, cube: f64, stride: f64) -> Vec<f64> {
    if hi - lo <= cube {
        return vec![lo];
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let o = lo + k as f64 * stride;
        if o + cube >= hi {
            break;
        }
        out.push(o);
        k += 1;
    }
    out.push(hi - cube);
    out
}

pub fn slice_into_cubes(scene: &Scene, cube: f64, stride: f64) -> Result<Vec<Block>> {
    if cube <= 0.0 || stride <= 0.0 || stride > cube {
        return Err(Error::Config(format!(
            "need 0 < stride <= cube, got cube {cube} stride {stride}"
        )));
    }
    let e = scene.extent;
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|a| window_origins(e.min[a], e.max[a], cube, stride))
        .collect();
    let mut blocks = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                let origin = Point3::new(x, y, z);
                let bounds = Aabb {
                    min: origin,
                    max: origin + Point3::new(cube, cube, cube),
                };
                let indices: Vec<usize> = scene
                    .positions()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| bounds.contains(**p))
                    .map(|(i, _)| i)
                    .collect();
                if !indices.is_empty() {
                    blocks.push(Block {
                        origin,
                        size: cube,
                        sampled: indices.clone(),
                        indices,
                    });
                }
            }
        }
    }
    Ok(blocks)
}

/// Draws exactly `n` members. Full blocks are sampled uniformly without
/// replacement; under-full blocks keep every member once and fill the
/// deficit with uniform draws with replacement. The result is sorted.
pub fn sample_points(block: &Block, n: usize, seed: u64) -> Result<Block> {
    if block.indices.is_empty() {
        return Err(Error::Empty("block"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = block.indices.len();
    let mut sampled: Vec<usize> = if m >= n {
        index::sample(&mut rng, m, n)
            .into_iter()
            .map(|k| block.indices[k])
            .collect()
    } else {
        let mut all = block.indices.clone();
        all.extend((m..n).map(|_| block.indices[rng.gen_range(0..m)]));
        all
    };
    sampled.sort_unstable();
    Ok(Block {
        sampled,
        ..block.clone()
    })
}

/// `N_s × 9` rows of (r, g, b, block-normalized xyz, scene-normalized xyz).
pub fn build_features(block: &Block, scene: &Scene) -> Tensor {
    let e = scene.extent;
    let span = e.extents();
    let norm = |v: f64, lo: f64, len: f64| {
        if len > 0.0 {
            ((v - lo) / len).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(block.sampled.len() * FEATURE_DIM);
    for &i in &block.sampled {
        let p = scene.cloud.positions[i];
        data.extend(scene.cloud.color(i).map(|c| c.clamp(0.0, 1.0)));
        for a in 0..3 {
            data.push(norm(p[a], block.origin[a], block.size));
        }
        for a in 0..3 {
            data.push(norm(p[a], e.min[a], span[a]));
        }
    }
    Tensor::matrix(block.sampled.len(), FEATURE_DIM, data).expect("feature shape")
}
