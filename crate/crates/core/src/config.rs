//! Run configuration: every knob of the pipeline in one JSON document.

use serde::{Deserialize, Serialize};

use crate::attribute::{AttributeConfig, AttributeTrainConfig};
use crate::demands::{Universe, UniverseConfig};
use crate::error::{DdnError, Result};
use crate::grounding::{GrounderConfig, GrounderTrainConfig};
use crate::ids::SceneId;
use crate::metrics::Thresholds;
use crate::perception::PerceptionConfig;
use crate::policy::{PolicyConfig, PolicyTrainConfig};
use crate::util::{derive_seed, sha256_hex};
use crate::world::{generate_scene, GridScene, SceneGenConfig};

/// Unseen scenes get ids from here up.
pub const UNSEEN_SCENE_ID_BASE: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes_per_split: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_split: 200,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub universe: UniverseConfig,
    pub scenes: SceneGenConfig,
    pub n_seen_scenes: usize,
    pub n_unseen_scenes: usize,
    pub n_train_demands: usize,
    pub n_test_demands: usize,
    /// Categories per language-grounding mapping.
    pub n_lg: usize,
    pub trajectories_per_demand: usize,
    pub grounding_frames_per_scene: usize,
    pub perception: PerceptionConfig,
    pub thresholds: Thresholds,
    pub attribute: AttributeConfig,
    pub attribute_train: AttributeTrainConfig,
    pub policy: PolicyConfig,
    pub policy_train: PolicyTrainConfig,
    pub grounder: GrounderConfig,
    pub grounder_train: GrounderTrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU desk scale: 30 seen scenes, 80 training demands.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            universe: UniverseConfig::default(),
            scenes: SceneGenConfig::default(),
            n_seen_scenes: 30,
            n_unseen_scenes: 10,
            n_train_demands: 80,
            n_test_demands: 120,
            n_lg: 10,
            trajectories_per_demand: 2,
            grounding_frames_per_scene: 125,
            perception: PerceptionConfig::default(),
            thresholds: Thresholds::default(),
            attribute: AttributeConfig::default(),
            attribute_train: AttributeTrainConfig::default(),
            policy: PolicyConfig::default(),
            policy_train: PolicyTrainConfig::default(),
            grounder: GrounderConfig::default(),
            grounder_train: GrounderTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Tiny end-to-end configuration on 6×6 rooms.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.universe.n_demands = 40;
        c.scenes = SceneGenConfig {
            width: 6,
            height: 6,
            wall_density: 0.0,
            n_objects: 4,
            ..SceneGenConfig::default()
        };
        c.n_seen_scenes = 4;
        c.n_unseen_scenes = 2;
        c.n_train_demands = 16;
        c.n_test_demands = 24;
        c.trajectories_per_demand = 1;
        c.grounding_frames_per_scene = 20;
        c.attribute_train.steps = 100;
        c.policy_train.epochs = 2;
        c.grounder_train.epochs = 2;
        c.eval = EvalConfig {
            episodes_per_split: 8,
            seeds: vec![0],
        };
        c
    }

    /// Published scale: ~2600 demands over 109 categories, 512-D features,
    /// 6 encoder layers. Documented for reference; not CPU-feasible.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.universe.n_scene_categories = 109;
        c.universe.n_demands = 2600;
        c.universe.n_prototypes = 48;
        c.universe.demand_dim = 1024;
        c.universe.object_dim = 512;
        c.n_seen_scenes = 200;
        c.n_unseen_scenes = 50;
        c.n_train_demands = 200;
        c.n_test_demands = 300;
        c.trajectories_per_demand = 3;
        c.grounding_frames_per_scene = 5000;
        c.attribute = AttributeConfig {
            demand_dim: 1024,
            object_dim: 512,
            hidden: 512,
            depth: 6,
            ff_hidden: 1024,
            out_dim: 512,
        };
        c.policy = PolicyConfig {
            model_dim: 512,
            heads: 8,
            layers: 6,
            ff_hidden: 1024,
            hidden: 512,
            query_hidden: 512,
            ..PolicyConfig::default()
        };
        c.grounder = GrounderConfig {
            model_dim: 512,
            heads: 8,
            layers: 6,
            ff_hidden: 1024,
            object_dim: 512,
            demand_dim: 1024,
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            "paper" => Ok(Self::paper()),
            other => Err(DdnError::Invalid(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let th = &self.thresholds;
        let positive = [th.c_navi, th.c_sele, th.plan_margin, self.attribute_train.tau];
        if positive.iter().any(|v| !(*v > 0.0)) || th.step_limit == 0 || self.perception.k == 0 {
            return Err(DdnError::Invalid("thresholds must be positive".into()));
        }
        if self.perception.sigma_align < 0.0 || self.perception.logit_noise < 0.0 {
            return Err(DdnError::Invalid("noise scales must be non-negative".into()));
        }
        if self.attribute.demand_dim != self.universe.demand_dim || self.attribute.object_dim != self.universe.object_dim
        {
            return Err(DdnError::Invalid("attribute dims must match the universe".into()));
        }
        if self.grounder.demand_dim != self.universe.demand_dim || self.grounder.object_dim != self.universe.object_dim {
            return Err(DdnError::Invalid("grounder dims must match the universe".into()));
        }
        if self.n_train_demands + self.n_test_demands > self.universe.n_demands {
            return Err(DdnError::InsufficientDemands {
                requested: self.n_train_demands + self.n_test_demands,
                available: self.universe.n_demands,
            });
        }
        if self.n_seen_scenes == 0 || self.n_unseen_scenes == 0 {
            return Err(DdnError::Invalid("need seen and unseen scenes".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(DdnError::Invalid("need at least one evaluation seed".into()));
        }
        Ok(())
    }

    /// Canonical JSON for hashing and embedding in artifacts.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialization")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// Seen and unseen scene sets over the universe's scene category pool.
pub fn generate_scene_sets(
    universe: &Universe,
    cfg: &SceneGenConfig,
    n_seen: usize,
    n_unseen: usize,
    seed: u64,
) -> Result<(Vec<GridScene>, Vec<GridScene>)> {
    let pool = universe.scene_pool();
    let make = |id: u64| -> Result<GridScene> {
        let mut s = generate_scene(cfg, &pool, derive_seed(seed, &[0x5c, id]))?;
        s.id = SceneId(id);
        Ok(s)
    };
    let seen = (0..n_seen as u64).map(make).collect::<Result<Vec<_>>>()?;
    let unseen = (0..n_unseen as u64)
        .map(|i| make(UNSEEN_SCENE_ID_BASE + i))
        .collect::<Result<Vec<_>>>()?;
    Ok((seen, unseen))
}
