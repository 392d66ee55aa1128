//! Synthetic detector: `k` candidate boxes with logits and visual embeddings.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::demands::Universe;
use crate::error::Result;
use crate::ids::{DemandId, InstanceId};
use crate::world::{
    cell_of, heading_dir, visible_objects, BBox, EpisodeState, GridScene, Pose, CELL_SIZE,
    IMAGE_SIZE, MIN_BOX_WIDTH,
};

pub const GLOBAL_DIM: usize = 22;
pub const BBOX_DIM: usize = 4;
pub const LOGIT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub k: usize,
    pub sigma_align: f64,
    pub logit_noise: f64,
    pub real_logit: f64,
    pub clutter_embedding_scale: f64,
    /// Wall-distance features are clipped here and divided by it.
    pub free_distance_clip: f64,
    pub step_limit: u32,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            k: 16,
            sigma_align: 0.1,
            logit_noise: 0.5,
            real_logit: 3.0,
            clutter_embedding_scale: 0.5,
            free_distance_clip: 2.0,
            step_limit: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionSource {
    Real(InstanceId),
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// `[background, object]`.
    pub logits: [f64; 2],
    pub embedding: Vec<f64>,
    pub source: DetectionSource,
}

impl Detection {
    pub fn object_logit(&self) -> f64 {
        self.logits[1]
    }

    /// Box scaled to `[0, 1]` followed by the two logits.
    pub fn geometry_features(&self) -> [f64; BBOX_DIM + LOGIT_DIM] {
        let b = self.bbox.to_array();
        [
            b[0] / IMAGE_SIZE,
            b[1] / IMAGE_SIZE,
            b[2] / IMAGE_SIZE,
            b[3] / IMAGE_SIZE,
            self.logits[0],
            self.logits[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub detections: Vec<Detection>,
    pub global_feature: Vec<f64>,
    pub demand: DemandId,
    /// For oracle checks only; agents other than the oracle must not read it.
    pub pose: Pose,
}

fn normal(rng: &mut impl Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn random_clutter_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(MIN_BOX_WIDTH..=40.0);
    let h = rng.random_range(MIN_BOX_WIDTH..=40.0);
    let x0 = rng.random_range(0.0..=IMAGE_SIZE - w);
    let y0 = rng.random_range(0.0..=IMAGE_SIZE - h);
    BBox::new(x0, y0, x0 + w, y0 + h)
}

/// Produce the `k`-detection observation for the current state.
pub fn detect(
    scene: &GridScene,
    state: &EpisodeState,
    universe: &Universe,
    demand: DemandId,
    cfg: &PerceptionConfig,
    rng: &mut impl Rng,
) -> Result<Observation> {
    let pose = state.pose;
    let mut dets = Vec::with_capacity(cfg.k.max(1));
    for v in visible_objects(scene, &pose) {
        let logit = cfg.real_logit + cfg.logit_noise * normal(rng);
        let embedding = universe.embed_instance_visual(v.object.category, cfg.sigma_align, rng)?;
        dets.push(Detection {
            bbox: crate::world::bbox_from_geometry(v.bearing, v.distance, v.object.size),
            logits: [-logit, logit],
            embedding,
            source: DetectionSource::Real(v.object.id),
        });
    }
    let dim = universe.config.object_dim;
    while dets.len() < cfg.k {
        let mut bbox = random_clutter_box(rng);
        while dets.iter().any(|d| d.bbox == bbox) {
            bbox = random_clutter_box(rng);
        }
        let logit = cfg.logit_noise * normal(rng);
        let embedding = (0..dim)
            .map(|_| cfg.clutter_embedding_scale * normal(rng))
            .collect();
        dets.push(Detection {
            bbox,
            logits: [-logit, logit],
            embedding,
            source: DetectionSource::Clutter,
        });
    }
    dets.sort_by(|a, b| b.object_logit().total_cmp(&a.object_logit()));
    dets.truncate(cfg.k);
    let global_feature = global_feature(&dets, scene, state, cfg);
    Ok(Observation {
        detections: dets,
        global_feature,
        demand,
        pose,
    })
}

/// Distance (m) marched from the agent along `heading` in cell-size steps to
/// the first occupied cell, capped at `clip`.
pub fn free_distance(scene: &GridScene, pose: &Pose, heading: u16, clip: f64) -> f64 {
    let (dx, dy) = heading_dir(heading);
    let mut d = CELL_SIZE;
    while d <= clip + 1e-9 {
        let (i, j) = cell_of(pose.x + d * dx, pose.y + d * dy);
        if scene.is_occupied(i, j) {
            return d;
        }
        d += CELL_SIZE;
    }
    clip
}

/// Mean detection embedding ‖ free distance ahead/right/back/left (normalized)
/// ‖ pitch/30 ‖ steps/limit.
pub fn global_feature(
    detections: &[Detection],
    scene: &GridScene,
    state: &EpisodeState,
    cfg: &PerceptionConfig,
) -> Vec<f64> {
    let dim = detections.first().map_or(0, |d| d.embedding.len());
    let mut out = vec![0.0; dim];
    for d in detections {
        for (o, e) in out.iter_mut().zip(&d.embedding) {
            *o += e;
        }
    }
    if !detections.is_empty() {
        let n = detections.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    let pose = &state.pose;
    for turn in [0u16, 90, 180, 270] {
        let h = (pose.heading + turn) % 360;
        out.push(free_distance(scene, pose, h, cfg.free_distance_clip) / cfg.free_distance_clip);
    }
    out.push(f64::from(pose.pitch) / 30.0);
    out.push(f64::from(state.steps) / f64::from(cfg.step_limit.max(1)));
    out
}
