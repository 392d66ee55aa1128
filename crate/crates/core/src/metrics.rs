//! Success criteria and aggregate metrics.

use serde::{Deserialize, Serialize};

use crate::demands::Universe;
use crate::ids::DemandId;
use crate::world::{bbox_from_geometry, visible_objects, BBox, GridScene, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Navigation success distance (m).
    pub c_navi: f64,
    /// Selection success IoU.
    pub c_sele: f64,
    pub step_limit: u32,
    /// Distance the expert plans to; below `c_navi` for slack.
    pub plan_margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            c_navi: 1.5,
            c_sele: 0.5,
            step_limit: 100,
            plan_margin: 1.0,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Projected boxes of satisfying objects visible within `max_dist`.
pub fn qualifying_boxes(
    scene: &GridScene,
    pose: &Pose,
    demand: DemandId,
    universe: &Universe,
    max_dist: f64,
) -> Vec<BBox> {
    visible_objects(scene, pose)
        .into_iter()
        .filter(|v| v.distance < max_dist && universe.satisfies(demand, v.object.category).unwrap_or(false))
        .map(|v| bbox_from_geometry(v.bearing, v.distance, v.object.size))
        .collect()
}

/// A satisfying object is in view closer than `c_navi`.
pub fn is_nav_success(scene: &GridScene, pose: &Pose, demand: DemandId, universe: &Universe, c_navi: f64) -> bool {
    !qualifying_boxes(scene, pose, demand, universe, c_navi).is_empty()
}

/// The chosen box overlaps a qualifying satisfier's box with IoU above `c_sele`.
pub fn is_sel_success(
    chosen: &BBox,
    scene: &GridScene,
    pose: &Pose,
    demand: DemandId,
    universe: &Universe,
    th: &Thresholds,
) -> bool {
    qualifying_boxes(scene, pose, demand, universe, th.c_navi)
        .iter()
        .any(|b| iou(chosen, b) > th.c_sele)
}

/// Per-episode quantities SPL needs.
pub trait SplInput {
    fn success(&self) -> bool;
    fn path_length(&self) -> f64;
    fn shortest_length(&self) -> f64;
}

/// `(1/N) Σ S·l/max(p, l)`; a success with `l = 0` contributes 1.
pub fn spl<T: SplInput>(results: &[T]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .filter(|r| r.success())
        .map(|r| {
            let (p, l) = (r.path_length(), r.shortest_length());
            if l <= 0.0 {
                1.0
            } else {
                l / p.max(l)
            }
        })
        .sum();
    total / results.len() as f64
}
