//! Episode runner and NSR / NSPL / SSR over the seen/unseen 2×2 splits.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, EpisodeInfo};
use crate::demands::{DemandSplit, Universe, WgMappings};
use crate::error::{DdnError, Result};
use crate::expert::{observe, shortest_translation, success_poses, PlanState};
use crate::grounding::GrounderNet;
use crate::ids::{DemandId, SceneId};
use crate::metrics::{is_nav_success, is_sel_success, spl, SplInput, Thresholds};
use crate::perception::PerceptionConfig;
use crate::util::{derive_seed, mean_and_sample_std};
use crate::world::{step, Action, BBox, EpisodeState, GridScene, Pose, CELL_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Seen scenes, seen (training) instructions.
    Ss,
    Su,
    Us,
    Uu,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Ss, Split::Su, Split::Us, Split::Uu];

    pub fn seen_scenes(self) -> bool {
        matches!(self, Split::Ss | Split::Su)
    }

    pub fn seen_instructions(self) -> bool {
        matches!(self, Split::Ss | Split::Us)
    }

    pub fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Ss => "ss",
            Split::Su => "su",
            Split::Us => "us",
            Split::Uu => "uu",
        })
    }
}

impl FromStr for Split {
    type Err = DdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ss" => Ok(Split::Ss),
            "su" => Ok(Split::Su),
            "us" => Ok(Split::Us),
            "uu" => Ok(Split::Uu),
            other => Err(DdnError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub scene_id: SceneId,
    pub demand_id: DemandId,
    pub start: Pose,
    pub step_limit: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scene_id: SceneId,
    pub demand_id: DemandId,
    pub nav_success: bool,
    pub sel_success: bool,
    pub steps: u32,
    pub path_length: f64,
    pub shortest_length: f64,
    pub chosen_bbox: Option<BBox>,
}

impl SplInput for EpisodeResult {
    fn success(&self) -> bool {
        self.nav_success
    }
    fn path_length(&self) -> f64 {
        self.path_length
    }
    fn shortest_length(&self) -> f64 {
        self.shortest_length
    }
}

/// Shared environment for running episodes.
pub struct EvalEnv<'a> {
    pub universe: &'a Universe,
    pub perception: &'a PerceptionConfig,
    pub thresholds: &'a Thresholds,
}

/// The single grounding path used for every agent at Done.
pub fn choose_box(grounder: &GrounderNet, obs: &crate::perception::Observation, demand_emb: &[f64]) -> Result<BBox> {
    let (_, idx) = grounder.ground(obs, demand_emb)?;
    Ok(obs.detections[idx].bbox)
}

pub fn run_episode(
    agent: &dyn Agent,
    grounder: &GrounderNet,
    spec: &EpisodeSpec,
    scene: &GridScene,
    env: &EvalEnv<'_>,
    seed: u64,
) -> Result<EpisodeResult> {
    let u = env.universe;
    let th = env.thresholds;
    let demand_emb = u.embed_demand(spec.demand_id)?;
    let shortest = shortest_translation(scene, &spec.start, spec.demand_id, u, th.c_navi)?;
    let mut obs_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut agent_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mut agent_state = agent.reset(&EpisodeInfo {
        scene,
        universe: u,
        demand: spec.demand_id,
        start: spec.start,
    })?;
    let mut state = EpisodeState::new(spec.start);
    let mut result = EpisodeResult {
        scene_id: scene.id,
        demand_id: spec.demand_id,
        nav_success: false,
        sel_success: false,
        steps: 0,
        path_length: 0.0,
        shortest_length: shortest,
        chosen_bbox: None,
    };
    while state.steps < spec.step_limit {
        let obs = observe(scene, &state, u, spec.demand_id, env.perception, &mut obs_rng)?;
        let action = agent.act(&obs, demand_emb, &mut agent_state, &mut agent_rng)?;
        let (next, collided) = step(&state, action, scene)?;
        if action == Action::MoveAhead && !collided {
            result.path_length += CELL_SIZE;
        }
        state = next;
        if action == Action::Done {
            result.nav_success = is_nav_success(scene, &state.pose, spec.demand_id, u, th.c_navi);
            if result.nav_success {
                let chosen = choose_box(grounder, &obs, demand_emb)?;
                result.sel_success = is_sel_success(&chosen, scene, &state.pose, spec.demand_id, u, th);
                result.chosen_bbox = Some(chosen);
            }
            break;
        }
    }
    result.steps = state.steps;
    Ok(result)
}

/// Episodes for one split: (scene, demand) pairs with the demand satisfiable
/// in the scene, cycled in shuffled order; starts drawn per seed on free
/// cells with a cardinal heading and level pitch, avoiding success poses
/// where possible.
pub fn build_episodes(
    scenes: &[GridScene],
    demands: &[DemandId],
    wg: &WgMappings,
    universe: &Universe,
    n_episodes: usize,
    th: &Thresholds,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    let sub = wg.restrict(demands);
    let mut pairs = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for d in sub.satisfiable_in(s.category_set()) {
            // demands whose satisfiers are never observable would be unsolvable
            if !success_poses(s, d, universe, th.c_navi)?.is_empty() {
                pairs.push((si, d));
            }
        }
    }
    if pairs.is_empty() {
        return Err(DdnError::EmptySplit(format!("seed {seed}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xe9]));
    pairs.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let (si, d) = pairs[e % pairs.len()];
        let scene = &scenes[si];
        let goals = success_poses(scene, d, universe, th.c_navi)?;
        let free = scene.traversable_cells();
        let mut start = None;
        for _ in 0..20 {
            let (i, j) = free[rng.random_range(0..free.len())];
            let s = PlanState {
                i,
                j,
                heading: rng.random_range(0..4),
                pitch: 1,
            };
            start = Some(s);
            if !goals.contains(&s) {
                break;
            }
        }
        out.push(EpisodeSpec {
            scene_id: scene.id,
            demand_id: d,
            start: start.expect("scene has free cells").pose(),
            step_limit: th.step_limit,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub sample_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub nsr: MeanStd,
    pub nspl: MeanStd,
    pub ssr: MeanStd,
    pub n_seeds: usize,
    pub n_episodes: usize,
    /// Per-seed (NSR, NSPL, SSR) in percent.
    pub per_seed: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub agent: String,
    pub splits: Vec<SplitMetrics>,
}

impl MetricsTable {
    pub fn get(&self, split: Split) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == split)
    }

    /// `split,metric,mean,sample_std,n_seeds,n_episodes`, one decimal place.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,metric,mean,sample_std,n_seeds,n_episodes\n");
        for m in &self.splits {
            for (name, v) in [("NSR", m.nsr), ("NSPL", m.nspl), ("SSR", m.ssr)] {
                s.push_str(&format!(
                    "{},{},{:.1},{:.1},{},{}\n",
                    m.split, name, v.mean, v.sample_std, m.n_seeds, m.n_episodes
                ));
            }
        }
        s
    }
}

/// NSR, NSPL and SSR in percent for one set of episodes.
pub fn episode_metrics(results: &[EpisodeResult]) -> [f64; 3] {
    if results.is_empty() {
        return [0.0; 3];
    }
    let n = results.len() as f64;
    let nav = results.iter().filter(|r| r.nav_success).count() as f64;
    let sel = results.iter().filter(|r| r.sel_success).count() as f64;
    [100.0 * nav / n, 100.0 * spl(results), 100.0 * sel / n]
}

pub fn aggregate(split: Split, per_seed: Vec<[f64; 3]>, n_episodes: usize) -> SplitMetrics {
    let col = |c: usize| {
        let xs: Vec<f64> = per_seed.iter().map(|r| r[c]).collect();
        let (mean, sample_std) = mean_and_sample_std(&xs);
        MeanStd { mean, sample_std }
    };
    SplitMetrics {
        split,
        nsr: col(0),
        nspl: col(1),
        ssr: col(2),
        n_seeds: per_seed.len(),
        n_episodes,
        per_seed,
    }
}

/// Scene and demand sets behind the four splits.
pub struct SplitSets<'a> {
    pub seen_scenes: &'a [GridScene],
    pub unseen_scenes: &'a [GridScene],
    pub demands: &'a DemandSplit,
    pub wg: &'a WgMappings,
}

impl SplitSets<'_> {
    pub fn scenes(&self, s: Split) -> &[GridScene] {
        if s.seen_scenes() {
            self.seen_scenes
        } else {
            self.unseen_scenes
        }
    }

    pub fn demand_ids(&self, s: Split) -> &[DemandId] {
        if s.seen_instructions() {
            &self.demands.train
        } else {
            &self.demands.test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub split: Split,
    pub seed: u64,
    pub index: usize,
    pub spec: EpisodeSpec,
    pub result: EpisodeResult,
}

/// Worker count from `DDN_LAB_THREADS` (unset or invalid → rayon default).
pub fn thread_count() -> Option<usize> {
    std::env::var("DDN_LAB_THREADS").ok()?.parse().ok().filter(|n| *n > 0)
}

/// Every split × seed; episodes run in parallel with per-episode RNG streams
/// so the thread count does not affect results.
pub fn evaluate(
    agent: &dyn Agent,
    grounder: &GrounderNet,
    sets: &SplitSets<'_>,
    env: &EvalEnv<'_>,
    splits: &[Split],
    episodes_per_split: usize,
    seeds: &[u64],
) -> Result<(MetricsTable, Vec<EpisodeLog>)> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| DdnError::Invalid(format!("thread pool: {e}")))?;
    let mut table = MetricsTable {
        agent: agent.name().to_string(),
        splits: Vec::new(),
    };
    let mut logs = Vec::new();
    for &split in splits {
        let scenes = sets.scenes(split);
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let specs = build_episodes(
                scenes,
                sets.demand_ids(split),
                sets.wg,
                env.universe,
                episodes_per_split,
                env.thresholds,
                derive_seed(seed, &[split.tag()]),
            )
            .map_err(|_| DdnError::EmptySplit(split.to_string()))?;
            let results: Vec<EpisodeResult> = pool.install(|| {
                specs
                    .par_iter()
                    .enumerate()
                    .map(|(i, spec)| {
                        let scene = scenes
                            .iter()
                            .find(|s| s.id == spec.scene_id)
                            .expect("episode scene from the split");
                        run_episode(agent, grounder, spec, scene, env, derive_seed(seed, &[split.tag(), i as u64, 0xe7]))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            per_seed.push(episode_metrics(&results));
            logs.extend(specs.into_iter().zip(results).enumerate().map(|(index, (spec, result))| EpisodeLog {
                split,
                seed,
                index,
                spec,
                result,
            }));
        }
        table.splits.push(aggregate(split, per_seed, episodes_per_split));
    }
    Ok((table, logs))
}
