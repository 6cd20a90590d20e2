//! Points, axis-aligned boxes and the overlap measures built on them.

use std::ops::{Add, Index, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Point3) -> Point3 {
        Point3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Point3) -> Point3 {
        Point3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn distance_squared(self, o: Point3) -> f64 {
        let d = self - o;
        d.x * d.x + d.y * d.y + d.z * d.z
    }

    pub fn distance(self, o: Point3) -> f64 {
        self.distance_squared(o).sqrt()
    }

    pub fn norm(self) -> f64 {
        self.distance(Point3::ZERO)
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Index<usize> for Point3 {
    type Output = f64;
    fn index(&self, axis: usize) -> &f64 {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

/// Axis-aligned box stored as its two extreme corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Builds a box from two arbitrary corners, swapping per axis where needed.
    pub fn from_corners(a: Point3, b: Point3) -> Self {
        Self {
            min: a.min(b),
            max: a.max(b),
        }
    }

    /// Interprets `(x_min, y_min, z_min, x_max, y_max, z_max)`, canonicalizing
    /// inverted axes.
    pub fn from_raw(v: [f64; 6]) -> Self {
        Self::from_corners(
            Point3::new(v[0], v[1], v[2]),
            Point3::new(v[3], v[4], v[5]),
        )
    }

    pub fn to_raw(&self) -> [f64; 6] {
        [
            self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z,
        ]
    }

    pub fn point(p: Point3) -> Self {
        Self { min: p, max: p }
    }

    /// Tight box around a non-empty point set.
    pub fn enclosing<'a, I>(points: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a Point3>,
    {
        let mut it = points.into_iter();
        let first = *it.next()?;
        Some(it.fold(Aabb::point(first), |b, p| b.grow(*p)))
    }

    pub fn grow(self, p: Point3) -> Self {
        Self {
            min: self.min.min(p),
            max: self.max.max(p),
        }
    }

    pub fn union_hull(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.min(o.min),
            max: self.max.max(o.max),
        }
    }

    pub fn extents(&self) -> Point3 {
        self.max - self.min
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_diagonal(&self) -> f64 {
        self.extents().norm() * 0.5
    }

    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite()
            && self.max.is_finite()
            && (0..3).all(|a| self.min[a] <= self.max[a])
    }
}

pub fn aabb_volume(b: &Aabb) -> f64 {
    let e = b.extents();
    e.x.max(0.0) * e.y.max(0.0) * e.z.max(0.0)
}

fn intersection_volume(a: &Aabb, b: &Aabb) -> f64 {
    (0..3)
        .map(|ax| (a.max[ax].min(b.max[ax]) - a.min[ax].max(b.min[ax])).max(0.0))
        .product()
}

fn overlap_terms(a: &Aabb, b: &Aabb) -> Result<(f64, f64)> {
    let inter = intersection_volume(a, b);
    let union = aabb_volume(a) + aabb_volume(b) - inter;
    if union <= 0.0 {
        return Err(Error::Undefined(
            "IoU of two zero-volume boxes".to_string(),
        ));
    }
    Ok((inter, union))
}

pub fn aabb_iou(a: &Aabb, b: &Aabb) -> Result<f64> {
    let (inter, union) = overlap_terms(a, b)?;
    Ok(inter / union)
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union.
pub fn aabb_giou(a: &Aabb, b: &Aabb) -> Result<f64> {
    let (inter, union) = overlap_terms(a, b)?;
    let hull = aabb_volume(&a.union_hull(b));
    Ok(inter / union - (hull - union) / hull)
}

pub fn centroid(points: &[Point3]) -> Result<Point3> {
    if points.is_empty() {
        return Err(Error::Empty("centroid of no points"));
    }
    let sum = points.iter().fold(Point3::ZERO, |acc, p| acc + *p);
    Ok(sum * (1.0 / points.len() as f64))
}

/// Ordered point set with optional per-point colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::Shape {
                    op: "PointCloud::new",
                    lhs: vec![positions.len(), 3],
                    rhs: vec![c.len(), 3],
                });
            }
        }
        if let Some(p) = positions.iter().find(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("point {p:?}")));
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors.as_ref().map_or([0.5; 3], |c| c[i])
    }

    pub fn bounds(&self) -> Option<Aabb> {
        Aabb::enclosing(&self.positions)
    }
}
