//! Demand-conditioned visual grounding: which of the k detections satisfies
//! the demand. Invoked by the harness whenever an agent emits Done.

use ddn_nn::layers::{EncoderLayer, Linear};
use ddn_nn::{Adam, AdamConfig, Grads, Graph, ParamId, ParamSet, Tensor, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::demands::{Universe, WgMappings};
use crate::error::{DdnError, Result};
use crate::expert::observe;
use crate::ids::{DemandId, SceneId};
use crate::metrics::{iou, Thresholds};
use crate::perception::{DetectionSource, Observation, PerceptionConfig, BBOX_DIM, GLOBAL_DIM, LOGIT_DIM};
use crate::util::{argmax, derive_seed};
use crate::world::{bbox_from_geometry, visible_objects, EpisodeState, GridScene, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingFrame {
    pub scene_id: SceneId,
    pub demand_id: DemandId,
    pub observation: Observation,
    pub label: usize,
}

/// Indices of detections that are real, satisfy the demand, lie within
/// `c_navi`, and overlap the object's projected box with IoU ≥ 0.5.
pub fn qualifying_detections(
    obs: &Observation,
    scene: &GridScene,
    pose: &Pose,
    demand: DemandId,
    universe: &Universe,
    c_navi: f64,
) -> Vec<usize> {
    let vis = visible_objects(scene, pose);
    obs.detections
        .iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let DetectionSource::Real(id) = d.source else { return None };
            let v = vis.iter().find(|v| v.object.id == id)?;
            let ok = v.distance < c_navi
                && universe.satisfies(demand, v.object.category).unwrap_or(false)
                && iou(&d.bbox, &bbox_from_geometry(v.bearing, v.distance, v.object.size)) >= 0.5;
            ok.then_some(i)
        })
        .collect()
}

/// Highest object logit, then lowest index.
pub fn pick_label(obs: &Observation, candidates: &[usize]) -> Option<usize> {
    candidates.iter().copied().fold(None, |best, i| match best {
        Some(b) if obs.detections[b].object_logit() >= obs.detections[i].object_logit() => Some(b),
        _ => Some(i),
    })
}

/// Teleport to random poses; keep frames where a satisfier of some demand
/// (satisfiable in the scene) is detected within `c_navi`. The demand is
/// drawn among those the in-range satisfiers serve.
pub fn collect_grounding_data(
    scenes: &[GridScene],
    wg: &WgMappings,
    universe: &Universe,
    frames_per_scene: usize,
    perception: &PerceptionConfig,
    th: &Thresholds,
    seed: u64,
) -> Result<Vec<GroundingFrame>> {
    let mut out = Vec::new();
    for scene in scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[scene.id.0, 0x6a]));
        let demands = wg.satisfiable_in(scene.category_set());
        let free = scene.traversable_cells();
        let mut kept = 0;
        let max_attempts = frames_per_scene * 50;
        for _ in 0..max_attempts {
            if kept == frames_per_scene || demands.is_empty() {
                break;
            }
            let (i, j) = free[rng.random_range(0..free.len())];
            let pose = Pose::at_cell(i, j, rng.random_range(0..12u16) * 30, [-30, 0, 30][rng.random_range(0..3)]);
            let near: Vec<_> = visible_objects(scene, &pose)
                .into_iter()
                .filter(|v| v.distance < th.c_navi)
                .map(|v| v.object.category)
                .collect();
            let served: Vec<DemandId> = demands
                .iter()
                .copied()
                .filter(|d| near.iter().any(|c| universe.satisfies(*d, *c).unwrap_or(false)))
                .collect();
            if served.is_empty() {
                continue;
            }
            let demand = served[rng.random_range(0..served.len())];
            let state = EpisodeState::new(pose);
            let obs = observe(scene, &state, universe, demand, perception, &mut rng)?;
            let cands = qualifying_detections(&obs, scene, &pose, demand, universe, th.c_navi);
            let Some(label) = pick_label(&obs, &cands) else { continue };
            out.push(GroundingFrame {
                scene_id: scene.id,
                demand_id: demand,
                observation: obs,
                label,
            });
            kept += 1;
        }
        if kept == 0 {
            warn!("scene {} yielded no grounding frames", scene.id);
        }
    }
    info!("collected {} grounding frames", out.len());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrounderConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub object_dim: usize,
    pub demand_dim: usize,
}

impl Default for GrounderConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            layers: 2,
            ff_hidden: 128,
            object_dim: 16,
            demand_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrounderLayout {
    pub det: Linear,
    pub global: Linear,
    pub demand: Linear,
    pub cls: ParamId,
    pub encoder: Vec<EncoderLayer>,
    /// Projects the CLS output into a pointer query over detection outputs.
    pub pointer: Linear,
}

#[derive(Debug, Clone)]
pub struct GrounderNet {
    pub config: GrounderConfig,
    pub layout: GrounderLayout,
    pub params: ParamSet,
}

/// Batched grounder inputs for `b` frames of `k` detections.
#[derive(Debug, Clone)]
pub struct GrounderInputs {
    pub k: usize,
    /// `b·k × (object ‖ bbox ‖ logits)`.
    pub det: Tensor,
    /// `b × global`.
    pub global: Tensor,
    /// `b × demand`.
    pub demand: Tensor,
}

impl GrounderInputs {
    pub fn batch(&self) -> usize {
        self.global.rows
    }

    pub fn build(frames: &[(&Observation, &[f64])]) -> Result<Self> {
        let k = frames.first().map_or(0, |f| f.0.detections.len());
        let mut det = Vec::new();
        let mut global = Vec::new();
        let mut demand = Vec::new();
        for (o, d) in frames {
            if o.detections.len() != k {
                return Err(DdnError::DimMismatch {
                    expected: k,
                    got: o.detections.len(),
                });
            }
            for x in &o.detections {
                let mut row = x.embedding.clone();
                row.extend_from_slice(&x.geometry_features());
                det.push(row);
            }
            global.push(o.global_feature.clone());
            demand.push(d.to_vec());
        }
        Ok(Self {
            k,
            det: Tensor::from_rows(&det),
            global: Tensor::from_rows(&global),
            demand: Tensor::from_rows(&demand),
        })
    }
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    config: &'a GrounderConfig,
    params: Box<RawValue>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    config: GrounderConfig,
    params: Box<RawValue>,
}

impl GrounderNet {
    pub fn new(config: &GrounderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.model_dim;
        let det = Linear::new(&mut ps, "g.det", config.object_dim + BBOX_DIM + LOGIT_DIM, d, &mut rng);
        let global = Linear::new(&mut ps, "g.global", GLOBAL_DIM, d, &mut rng);
        let demand = Linear::new(&mut ps, "g.demand", config.demand_dim, d, &mut rng);
        let cls = ps.add_normal("g.cls", 1, d, &mut rng);
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("g.enc{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let pointer = Linear::new(&mut ps, "g.pointer", d, d, &mut rng);
        Self {
            config: config.clone(),
            layout: GrounderLayout {
                det,
                global,
                demand,
                cls,
                encoder,
                pointer,
            },
            params: ps,
        }
    }

    /// `b × k` scores. Tokens per frame: CLS, global, demand, then detections.
    pub fn forward(&self, g: &mut Graph, x: &GrounderInputs) -> Result<Var> {
        let (b, k) = (x.batch(), x.k);
        if b == 0 || k == 0 {
            return Err(DdnError::Invalid("empty grounder input".into()));
        }
        let want = self.config.object_dim + BBOX_DIM + LOGIT_DIM;
        if x.det.cols != want {
            return Err(DdnError::DimMismatch {
                expected: want,
                got: x.det.cols,
            });
        }
        let l = &self.layout;
        let cls = g.param(l.cls);
        let cls = g.gather_rows(cls, &vec![0; b]);
        let gl = g.constant(x.global.clone());
        let gl = l.global.forward(g, gl);
        let dm = g.constant(x.demand.clone());
        let dm = l.demand.forward(g, dm);
        let dt = g.constant(x.det.clone());
        let dt = l.det.forward(g, dt);
        let stacked = g.concat_rows(&[cls, gl, dm, dt]);
        let n = k + 3;
        let mut order = Vec::with_capacity(b * n);
        for f in 0..b {
            order.extend([f, b + f, 2 * b + f]);
            order.extend((0..k).map(|i| 3 * b + f * k + i));
        }
        let mut h = g.gather_rows(stacked, &order);
        for layer in &l.encoder {
            h = layer.forward_grouped(g, h, n);
        }
        let cls_rows: Vec<usize> = (0..b).map(|f| f * n).collect();
        let det_rows: Vec<usize> = (0..b).flat_map(|f| (3..n).map(move |i| f * n + i)).collect();
        let cls_out = g.gather_rows(h, &cls_rows);
        let q = l.pointer.forward(g, cls_out);
        let q = g.gather_rows(q, &(0..b * k).map(|r| r / k).collect::<Vec<_>>());
        let dets = g.gather_rows(h, &det_rows);
        let prod = g.mul(q, dets);
        let ones = g.constant(Tensor::from_vec(self.config.model_dim, 1, vec![1.0; self.config.model_dim]));
        let s = g.matmul(prod, ones);
        let s = g.scale(s, 1.0 / (self.config.model_dim as f64).sqrt());
        Ok(g.reshape(s, b, k))
    }

    /// Scores and argmax (lowest index on ties) for one observation.
    pub fn ground(&self, obs: &Observation, demand_emb: &[f64]) -> Result<(Vec<f64>, usize)> {
        let x = GrounderInputs::build(&[(obs, demand_emb)])?;
        let mut g = Graph::new(&self.params);
        let s = self.forward(&mut g, &x)?;
        let scores = g.value(s).data.clone();
        let best = argmax(&scores);
        Ok((scores, best))
    }

    pub fn to_checkpoint_json(&self) -> String {
        let params = RawValue::from_string(self.params.to_checkpoint_json()).expect("valid JSON");
        serde_json::to_string(&CheckpointOut {
            config: &self.config,
            params,
        })
        .expect("checkpoint serialization")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let ck: CheckpointIn = serde_json::from_str(s)?;
        let mut net = Self::new(&ck.config, 0);
        net.params.load_from(&ParamSet::from_checkpoint_json(ck.params.get())?)?;
        Ok(net)
    }
}

pub fn grounder_loss(g: &mut Graph, net: &GrounderNet, x: &GrounderInputs, labels: &[usize]) -> Result<Var> {
    let s = net.forward(g, x)?;
    Ok(g.cross_entropy(s, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrounderTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for GrounderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 32,
            lr: 1e-3,
            grad_clip: 1.0,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrounderHistory {
    pub epoch_loss: Vec<f64>,
    /// Held-out accuracy before training, then after each epoch.
    pub heldout_accuracy: Vec<f64>,
}

/// Deterministic train/held-out split of frame indices.
pub fn split_frames(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e1])));
    let n_held = ((n as f64 * holdout_fraction).round() as usize).min(n.saturating_sub(1));
    let held = idx.split_off(n - n_held);
    (idx, held)
}

pub fn grounder_accuracy(net: &GrounderNet, frames: &[&GroundingFrame], universe: &Universe) -> Result<f64> {
    if frames.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0;
    for chunk in frames.chunks(64) {
        let embs = chunk
            .iter()
            .map(|f| universe.embed_demand(f.demand_id))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = chunk.iter().zip(&embs).map(|(f, e)| (&f.observation, *e)).collect();
        let x = GrounderInputs::build(&pairs)?;
        let mut g = Graph::new(&net.params);
        let s = net.forward(&mut g, &x)?;
        let sv = g.value(s);
        for (r, f) in chunk.iter().enumerate() {
            hit += usize::from(argmax(sv.row_slice(r)) == f.label);
        }
    }
    Ok(hit as f64 / frames.len() as f64)
}

pub fn train_grounder(
    net: &mut GrounderNet,
    frames: &[GroundingFrame],
    universe: &Universe,
    cfg: &GrounderTrainConfig,
) -> Result<GrounderHistory> {
    if frames.is_empty() {
        return Err(DdnError::Invalid("no grounding frames".into()));
    }
    let (train, held) = split_frames(frames.len(), cfg.holdout_fraction, cfg.seed);
    let held_frames: Vec<&GroundingFrame> = held.iter().map(|&i| &frames[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x6b]));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut hist = GrounderHistory {
        epoch_loss: Vec::new(),
        heldout_accuracy: vec![grounder_accuracy(net, &held_frames, universe)?],
    };
    let mut order = train;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let embs = chunk
                .iter()
                .map(|&i| universe.embed_demand(frames[i].demand_id))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<_> = chunk.iter().zip(&embs).map(|(&i, e)| (&frames[i].observation, *e)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| frames[i].label).collect();
            let x = GrounderInputs::build(&pairs)?;
            let mut g = Graph::new(&net.params);
            let l = grounder_loss(&mut g, net, &x, &labels)?;
            let loss = g.value(l).item();
            let mut grads: Grads = g.backward(l);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(DdnError::DivergenceDetected { step, loss });
            }
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip);
            }
            adam.step(&mut net.params, &grads);
            sum += loss;
            batches += 1;
            step += 1;
        }
        let acc = grounder_accuracy(net, &held_frames, universe)?;
        info!("grounder epoch {epoch}: loss {:.4}, held-out accuracy {acc:.3}", sum / batches as f64);
        hist.epoch_loss.push(sum / batches as f64);
        hist.heldout_accuracy.push(acc);
    }
    Ok(hist)
}

pub fn frames_to_jsonl(frames: &[GroundingFrame]) -> String {
    let mut s = String::new();
    for f in frames {
        s.push_str(&serde_json::to_string(f).expect("frame serialization"));
        s.push('\n');
    }
    s
}

pub fn frames_from_jsonl(s: &str) -> Result<Vec<GroundingFrame>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::Detection;

    fn random_obs(k: usize, rng: &mut ChaCha8Rng) -> Observation {
        Observation {
            detections: (0..k)
                .map(|_| {
                    let x0 = rng.random_range(0.0..60.0);
                    let l = rng.random_range(-1.0..3.0);
                    Detection {
                        bbox: crate::world::BBox::new(x0, 40.0, x0 + 20.0, 60.0),
                        logits: [-l, l],
                        embedding: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        source: DetectionSource::Clutter,
                    }
                })
                .collect(),
            global_feature: (0..22).map(|_| rng.random_range(0.0..1.0)).collect(),
            demand: DemandId(0),
            pose: Pose::new(0.0, 0.0, 0, 0),
        }
    }

    #[test]
    fn scores_shape_and_argmax() {
        let net = GrounderNet::new(&GrounderConfig::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = random_obs(16, &mut rng);
        let d: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (s, a) = net.ground(&obs, &d).unwrap();
        assert_eq!(s.len(), 16);
        assert!(s.iter().all(|v| v.is_finite()));
        assert_eq!(net.ground(&obs, &d).unwrap().1, a);
    }

    #[test]
    fn batched_matches_single() {
        let net = GrounderNet::new(&GrounderConfig::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs: Vec<Observation> = (0..3).map(|_| random_obs(16, &mut rng)).collect();
        let d: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pairs: Vec<_> = obs.iter().map(|o| (o, &d[..])).collect();
        let x = GrounderInputs::build(&pairs).unwrap();
        let mut g = Graph::new(&net.params);
        let s = net.forward(&mut g, &x).unwrap();
        let all = g.value(s).clone();
        for (r, o) in obs.iter().enumerate() {
            let (single, _) = net.ground(o, &d).unwrap();
            for c in 0..16 {
                assert!((single[c] - all.get(r, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn permuting_detections_permutes_scores() {
        let net = GrounderNet::new(&GrounderConfig::default(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obs = random_obs(16, &mut rng);
        let d: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (s, a) = net.ground(&obs, &d).unwrap();
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let mut p = obs.clone();
        p.detections = perm.iter().map(|&i| obs.detections[i].clone()).collect();
        let (sp, ap) = net.ground(&p, &d).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((sp[new] - s[old]).abs() < 1e-10);
        }
        assert_eq!(perm[ap], a);
    }

    #[test]
    fn label_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut obs = random_obs(4, &mut rng);
        for (i, l) in [1.0, 3.0, 3.0, 2.0].iter().enumerate() {
            obs.detections[i].logits = [-l, *l];
        }
        assert_eq!(pick_label(&obs, &[0, 1, 2, 3]), Some(1));
        assert_eq!(pick_label(&obs, &[3, 2]), Some(2));
        assert_eq!(pick_label(&obs, &[]), None);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (a, b) = split_frames(100, 0.1, 3);
        assert_eq!(b.len(), 10);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_frames(100, 0.1, 3), (a, b));
    }
}
