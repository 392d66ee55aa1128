//! Agents acting in episodes: the learned policy and the baselines.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute::AttributeEncoder;
use crate::demands::{LgMappings, Universe};
use crate::error::Result;
use crate::expert::{plan, success_poses, PlanState};
use crate::ids::DemandId;
use crate::metrics::Thresholds;
use crate::perception::Observation;
use crate::policy::{select_action, FeatureBuilder, PolicyNet};
use crate::util::cosine;
use crate::world::{Action, GridScene, Pose, CELL_SIZE, HALF_FOV_DEG, IMAGE_SIZE};

/// Episode facts handed to [`Agent::reset`]. Only the oracle reads `scene`
/// and `start`.
pub struct EpisodeInfo<'a> {
    pub scene: &'a GridScene,
    pub universe: &'a Universe,
    pub demand: DemandId,
    pub start: Pose,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub hidden: Vec<f64>,
    /// `None` is the start token.
    pub prev_action: Option<Action>,
    /// Queued actions (oracle).
    pub plan: VecDeque<Action>,
    /// Sweep-pattern position (scripted).
    pub counter: u32,
}

pub trait Agent: Sync {
    fn name(&self) -> &str;

    fn reset(&self, ep: &EpisodeInfo<'_>) -> Result<AgentState>;

    fn act(
        &self,
        obs: &Observation,
        demand_emb: &[f64],
        state: &mut AgentState,
        rng: &mut ChaCha8Rng,
    ) -> Result<Action>;
}

/// Uniform over motions, Done with probability `p_done`.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    pub p_done: f64,
}

impl Default for RandomAgent {
    fn default() -> Self {
        Self { p_done: 0.02 }
    }
}

pub fn random_agent_act(rng: &mut impl Rng, p_done: f64) -> Action {
    if rng.random::<f64>() < p_done {
        Action::Done
    } else {
        Action::ALL[rng.random_range(0..5)]
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> &str {
        "random"
    }

    fn reset(&self, _ep: &EpisodeInfo<'_>) -> Result<AgentState> {
        Ok(AgentState::default())
    }

    fn act(&self, _obs: &Observation, _d: &[f64], state: &mut AgentState, rng: &mut ChaCha8Rng) -> Result<Action> {
        let a = random_agent_act(rng, self.p_done);
        state.prev_action = Some(a);
        Ok(a)
    }
}

/// Executes the expert plan from the start pose. Privileged: reads the scene.
#[derive(Debug, Clone, Default)]
pub struct OracleAgent {
    pub thresholds: Thresholds,
}

impl Agent for OracleAgent {
    fn name(&self) -> &str {
        "oracle"
    }

    fn reset(&self, ep: &EpisodeInfo<'_>) -> Result<AgentState> {
        let mut queue = VecDeque::new();
        let mut pose = ep.start;
        while pose.heading % 90 != 0 {
            queue.push_back(Action::RotateRight);
            pose.heading = (pose.heading + 30) % 360;
        }
        while pose.pitch > 0 {
            queue.push_back(Action::LookDown);
            pose.pitch -= 30;
        }
        while pose.pitch < -30 {
            queue.push_back(Action::LookUp);
            pose.pitch += 30;
        }
        let start = PlanState::from_pose(&pose).expect("snapped to a cardinal heading");
        let goals = success_poses(ep.scene, ep.demand, ep.universe, self.thresholds.plan_margin)?;
        queue.extend(plan(ep.scene, start, &goals)?);
        queue.push_back(Action::Done);
        Ok(AgentState {
            plan: queue,
            ..AgentState::default()
        })
    }

    fn act(&self, _obs: &Observation, _d: &[f64], state: &mut AgentState, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let a = state.plan.pop_front().unwrap_or(Action::Done);
        state.prev_action = Some(a);
        Ok(a)
    }
}

/// Language-grounded target seeking: match detections against the text
/// embeddings of the demand's LG categories and approach the best match.
#[derive(Debug, Clone)]
pub struct ScriptedTargetAgent {
    targets: BTreeMap<DemandId, Vec<Vec<f64>>>,
    /// Minimum cosine between a detection and an LG category.
    pub match_threshold: f64,
    /// Bearing (deg) beyond which the agent turns toward the target.
    pub center_tolerance_deg: f64,
    /// Box width (image units) at which the agent stops.
    pub done_width: f64,
}

const SWEEP: [Action; 8] = [
    Action::MoveAhead,
    Action::MoveAhead,
    Action::RotateRight,
    Action::RotateRight,
    Action::LookDown,
    Action::LookUp,
    Action::LookUp,
    Action::LookDown,
];

impl ScriptedTargetAgent {
    pub fn new(universe: &Universe, lg: &LgMappings) -> Result<Self> {
        let mut targets = BTreeMap::new();
        for (d, cats) in &lg.0 {
            let embs = cats
                .iter()
                .map(|c| universe.embed_category_text(*c).map(<[f64]>::to_vec))
                .collect::<Result<Vec<_>>>()?;
            targets.insert(*d, embs);
        }
        Ok(Self {
            targets,
            match_threshold: 0.85,
            center_tolerance_deg: 15.0,
            done_width: 22.0,
        })
    }

    fn ahead_blocked(obs: &Observation) -> bool {
        // free distance ahead is stored normalized by the 2 m clip
        obs.global_feature.get(16).is_some_and(|f| f * 2.0 <= CELL_SIZE + 1e-9)
    }

    fn sweep(obs: &Observation, state: &mut AgentState) -> Action {
        let a = SWEEP[state.counter as usize % SWEEP.len()];
        state.counter += 1;
        if a == Action::MoveAhead && Self::ahead_blocked(obs) {
            Action::RotateRight
        } else {
            a
        }
    }

    pub fn decide(&self, obs: &Observation, state: &mut AgentState) -> Action {
        let cats = self.targets.get(&obs.demand).map_or(&[][..], Vec::as_slice);
        let best = obs
            .detections
            .iter()
            .enumerate()
            .flat_map(|(i, d)| cats.iter().map(move |c| (i, cosine(&d.embedding, c))))
            .filter(|(_, c)| *c >= self.match_threshold)
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        let Some((idx, _)) = best else {
            return Self::sweep(obs, state);
        };
        let bbox = &obs.detections[idx].bbox;
        let bearing = (bbox.center_x() / (IMAGE_SIZE / 2.0) - 1.0) * HALF_FOV_DEG;
        if bearing > self.center_tolerance_deg {
            Action::RotateRight
        } else if bearing < -self.center_tolerance_deg {
            Action::RotateLeft
        } else if bbox.width() >= self.done_width || Self::ahead_blocked(obs) {
            Action::Done
        } else {
            Action::MoveAhead
        }
    }
}

impl Agent for ScriptedTargetAgent {
    fn name(&self) -> &str {
        "scripted"
    }

    fn reset(&self, _ep: &EpisodeInfo<'_>) -> Result<AgentState> {
        Ok(AgentState::default())
    }

    fn act(&self, obs: &Observation, _d: &[f64], state: &mut AgentState, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let a = self.decide(obs, state);
        state.prev_action = Some(a);
        Ok(a)
    }
}

/// The learned policy with argmax action selection.
pub struct PolicyAgent<'a> {
    pub name: String,
    pub net: &'a PolicyNet,
    /// Frozen encoder for the pretrained arm.
    pub encoder: Option<&'a AttributeEncoder>,
}

impl Agent for PolicyAgent<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&self, _ep: &EpisodeInfo<'_>) -> Result<AgentState> {
        Ok(AgentState {
            hidden: vec![0.0; self.net.config.hidden],
            ..AgentState::default()
        })
    }

    fn act(&self, obs: &Observation, demand_emb: &[f64], state: &mut AgentState, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let builder = FeatureBuilder {
            mode: self.net.mode,
            encoder: self.encoder,
        };
        let x = builder.build(&[obs], demand_emb, vec![state.prev_action])?;
        let (logits, h) = self.net.step(&x, &state.hidden)?;
        let a = select_action(&logits);
        state.hidden = h;
        state.prev_action = Some(a);
        Ok(a)
    }
}
