//! Thin wasm-bindgen layer over `gicn` for the static page in `www/`.

use gicn::dataset::{generate_scene, Scene, SceneConfig};
use gicn::geometry::{aabb_giou, aabb_iou, Aabb};
use gicn::groundtruth::{compute_class_radii, gt_heatmap, ClassRadiusTable};
use gicn::inference::{select_centers, SelectionConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: gicn::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A generated toy scene with its ground-truth heatmap.
#[wasm_bindgen]
pub struct DemoScene {
    scene: Scene,
    heat: Vec<f64>,
    radii: ClassRadiusTable,
}

#[wasm_bindgen]
impl DemoScene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<DemoScene, JsError> {
        let scene = generate_scene(&SceneConfig::default(), seed).map_err(js_err)?;
        let heat = gt_heatmap(&scene).map_err(js_err)?.values;
        let radii = compute_class_radii(std::slice::from_ref(&scene)).map_err(js_err)?;
        Ok(DemoScene { scene, heat, radii })
    }

    pub fn len(&self) -> usize {
        self.scene.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene.is_empty()
    }

    /// Flat `x, y, z` triples.
    pub fn positions(&self) -> Vec<f64> {
        self.scene.positions().iter().flat_map(|p| p.to_array()).collect()
    }

    /// Flat `r, g, b` triples in `[0, 1]`.
    pub fn colors(&self) -> Vec<f64> {
        (0..self.scene.len()).flat_map(|i| self.scene.cloud.color(i)).collect()
    }

    pub fn semantic(&self) -> Vec<u32> {
        self.scene.semantic.iter().map(|&c| c as u32).collect()
    }

    pub fn instance(&self) -> Vec<i32> {
        self.scene.instance.iter().map(|&i| i as i32).collect()
    }

    pub fn heatmap(&self) -> Vec<f64> {
        self.heat.clone()
    }

    /// `[x_min, y_min, z_min, x_max, y_max, z_max]` of the scene.
    pub fn extent(&self) -> Vec<f64> {
        self.scene.extent.to_raw().to_vec()
    }

    /// Suppression radius per class, as used by `select`.
    pub fn class_radii(&self, radius_scale: f64) -> Vec<f64> {
        (0..self.scene.num_classes)
            .map(|c| self.radii.radius(c) * radius_scale)
            .collect()
    }

    /// Greedy center selection on the ground-truth heatmap with the true
    /// labels. Returns the chosen point indices in pick order.
    pub fn select(&self, q_threshold: f64, max_centers: usize, radius_scale: f64) -> Result<Vec<u32>, JsError> {
        let radii = ClassRadiusTable {
            radii: self.radii.radii.iter().map(|r| r.map(|r| r * radius_scale)).collect(),
            global_mean: self.radii.global_mean * radius_scale,
        };
        let cfg = SelectionConfig {
            q_threshold,
            max_centers,
        };
        cfg.validate().map_err(js_err)?;
        let picks = select_centers(&self.heat, &self.scene.semantic, self.scene.positions(), &radii, &cfg)
            .map_err(js_err)?;
        Ok(picks.iter().map(|c| c.row as u32).collect())
    }
}

/// `[IoU, GIoU]` of two boxes given as six corner coordinates each.
#[wasm_bindgen]
pub fn box_overlap(a: &[f64], b: &[f64]) -> Result<Vec<f64>, JsError> {
    let parse = |v: &[f64]| -> Result<Aabb, JsError> {
        let raw: [f64; 6] = v.try_into().map_err(|_| JsError::new("a box needs six numbers"))?;
        Ok(Aabb::from_raw(raw))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    Ok(vec![
        aabb_iou(&a, &b).map_err(js_err)?,
        aabb_giou(&a, &b).map_err(js_err)?,
    ])
}
