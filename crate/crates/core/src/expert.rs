//! A* expert on the cardinal-heading lattice, success-pose goals, expert
//! trajectory collection and shortest translation lengths.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};

use log::{debug, info};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::demands::{Universe, WgMappings};
use crate::error::{DdnError, Result};
use crate::ids::{DemandId, InstanceId, SceneId};
use crate::metrics::{is_nav_success, Thresholds};
use crate::perception::{detect, Observation, PerceptionConfig};
use crate::util::{derive_seed, round6};
use crate::world::{
    cell_of, step, visible_objects, Action, EpisodeState, GridScene, ObjectInstance, Pose,
    CELL_SIZE,
};

/// Lattice planning state: cell, cardinal heading index (0 = +x, clockwise)
/// and pitch index (0 = −30°, 1 = 0°, 2 = +30°).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanState {
    pub i: i32,
    pub j: i32,
    pub heading: u8,
    pub pitch: u8,
}

impl PlanState {
    pub fn pose(&self) -> Pose {
        Pose::at_cell(self.i, self.j, u16::from(self.heading) * 90, self.pitch as i8 * 30 - 30)
    }

    /// Snap a pose whose heading is cardinal; `None` otherwise.
    pub fn from_pose(p: &Pose) -> Option<Self> {
        if p.heading % 90 != 0 || !matches!(p.pitch, -30 | 0 | 30) {
            return None;
        }
        let (i, j) = cell_of(p.x, p.y);
        Some(Self {
            i,
            j,
            heading: (p.heading / 90) as u8,
            pitch: ((p.pitch + 30) / 30) as u8,
        })
    }

    fn cardinal_step(&self) -> (i32, i32) {
        match self.heading {
            0 => (1, 0),
            1 => (0, 1),
            2 => (-1, 0),
            _ => (0, -1),
        }
    }
}

/// Macro moves on the lattice with their primitive actions.
fn successors(scene: &GridScene, s: PlanState) -> Vec<(PlanState, &'static [Action])> {
    const AHEAD: &[Action] = &[Action::MoveAhead];
    const RIGHT: &[Action] = &[Action::RotateRight; 3];
    const LEFT: &[Action] = &[Action::RotateLeft; 3];
    const UP: &[Action] = &[Action::LookUp];
    const DOWN: &[Action] = &[Action::LookDown];
    let mut out = Vec::with_capacity(5);
    let (di, dj) = s.cardinal_step();
    if scene.is_traversable(s.i + di, s.j + dj) {
        out.push((
            PlanState {
                i: s.i + di,
                j: s.j + dj,
                ..s
            },
            AHEAD,
        ));
    }
    out.push((
        PlanState {
            heading: (s.heading + 1) % 4,
            ..s
        },
        RIGHT,
    ));
    out.push((
        PlanState {
            heading: (s.heading + 3) % 4,
            ..s
        },
        LEFT,
    ));
    if s.pitch < 2 {
        out.push((
            PlanState {
                pitch: s.pitch + 1,
                ..s
            },
            UP,
        ));
    }
    if s.pitch > 0 {
        out.push((
            PlanState {
                pitch: s.pitch - 1,
                ..s
            },
            DOWN,
        ));
    }
    out
}

fn rotations(actions: &[Action]) -> u32 {
    actions
        .iter()
        .filter(|a| matches!(a, Action::RotateLeft | Action::RotateRight))
        .count() as u32
}

/// A* from `start` to any goal state. Cost is the action count, ties broken
/// by fewer rotations and then by expansion order.
pub fn plan(scene: &GridScene, start: PlanState, goals: &BTreeSet<PlanState>) -> Result<Vec<Action>> {
    if goals.is_empty() {
        return Err(DdnError::NoPath);
    }
    if !scene.is_traversable(start.i, start.j) {
        return Err(DdnError::Invalid("plan start is not on a free cell".into()));
    }
    let goal_cells: Vec<(i32, i32)> = goals.iter().map(|g| (g.i, g.j)).collect::<BTreeSet<_>>().into_iter().collect();
    let h = |s: &PlanState| -> u32 {
        goal_cells
            .iter()
            .map(|&(i, j)| (s.i - i).unsigned_abs() + (s.j - j).unsigned_abs())
            .min()
            .unwrap_or(0)
    };
    // (actions, rotations)
    let mut best: HashMap<PlanState, (u32, u32)> = HashMap::new();
    let mut parent: HashMap<PlanState, (PlanState, &'static [Action])> = HashMap::new();
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    best.insert(start, (0, 0));
    open.push(Reverse((h(&start), 0u32, seq, start)));
    while let Some(Reverse((f, rot, _, s))) = open.pop() {
        let g = best[&s];
        if (f, rot) != (g.0 + h(&s), g.1) {
            continue; // superseded entry
        }
        if goals.contains(&s) {
            let mut actions = Vec::new();
            let mut cur = s;
            while let Some(&(p, a)) = parent.get(&cur) {
                actions.extend(a.iter().rev());
                cur = p;
            }
            actions.reverse();
            return Ok(actions);
        }
        for (n, a) in successors(scene, s) {
            let cost = (g.0 + a.len() as u32, g.1 + rotations(a));
            if best.get(&n).is_none_or(|&b| cost < b) {
                best.insert(n, cost);
                parent.insert(n, (s, a));
                seq += 1;
                open.push(Reverse((cost.0 + h(&n), cost.1, seq, n)));
            }
        }
    }
    Err(DdnError::NoPath)
}

/// All lattice states in free cells.
pub fn all_plan_states(scene: &GridScene) -> Vec<PlanState> {
    let mut out = Vec::new();
    for (i, j) in scene.traversable_cells() {
        for heading in 0..4 {
            for pitch in 0..3 {
                out.push(PlanState { i, j, heading, pitch });
            }
        }
    }
    out
}

/// Lattice states from which one of `targets` is visible closer than `margin`.
pub fn success_poses_for(scene: &GridScene, targets: &[InstanceId], margin: f64) -> BTreeSet<PlanState> {
    all_plan_states(scene)
        .into_iter()
        .filter(|s| {
            visible_objects(scene, &s.pose())
                .iter()
                .any(|v| v.distance < margin && targets.contains(&v.object.id))
        })
        .collect()
}

pub fn satisfying_instances<'a>(
    scene: &'a GridScene,
    demand: DemandId,
    universe: &Universe,
) -> Result<Vec<&'a ObjectInstance>> {
    let mut out = Vec::new();
    for o in scene.objects() {
        if universe.satisfies(demand, o.category)? {
            out.push(o);
        }
    }
    Ok(out)
}

/// Lattice states from which some satisfier of `demand` is visible within `margin`.
/// Empty when every satisfier is unobservable; `NoSatisfier` when none exists.
pub fn success_poses(
    scene: &GridScene,
    demand: DemandId,
    universe: &Universe,
    margin: f64,
) -> Result<BTreeSet<PlanState>> {
    let targets: Vec<InstanceId> = satisfying_instances(scene, demand, universe)?
        .iter()
        .map(|o| o.id)
        .collect();
    if targets.is_empty() {
        return Err(DdnError::NoSatisfier {
            demand: demand.0,
            scene: scene.id.0,
        });
    }
    Ok(success_poses_for(scene, &targets, margin))
}

/// Fewest cell moves from `start`'s cell to a cell holding a goal state.
pub fn cells_to_goal(scene: &GridScene, start: (i32, i32), goals: &BTreeSet<PlanState>) -> Option<u32> {
    let goal_cells: BTreeSet<(i32, i32)> = goals.iter().map(|g| (g.i, g.j)).collect();
    let mut dist: HashMap<(i32, i32), u32> = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(start, 0);
    queue.push_back(start);
    while let Some(c) = queue.pop_front() {
        let d = dist[&c];
        if goal_cells.contains(&c) {
            return Some(d);
        }
        for (di, dj) in [(1, 0), (0, 1), (-1, 0), (0, -1)] {
            let n = (c.0 + di, c.1 + dj);
            if scene.is_traversable(n.0, n.1) && !dist.contains_key(&n) {
                dist.insert(n, d + 1);
                queue.push_back(n);
            }
        }
    }
    None
}

/// Shortest translation (m) to any success pose under the planning margin.
pub fn shortest_translation(
    scene: &GridScene,
    start: &Pose,
    demand: DemandId,
    universe: &Universe,
    margin: f64,
) -> Result<f64> {
    let goals = success_poses(scene, demand, universe, margin)?;
    let cells = cells_to_goal(scene, cell_of(start.x, start.y), &goals).ok_or(DdnError::NoPath)?;
    Ok(f64::from(cells) * CELL_SIZE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scene_id: SceneId,
    pub demand_id: DemandId,
    pub start: Pose,
    pub target_instance: InstanceId,
    pub actions: Vec<Action>,
    /// Observation before each action.
    pub frames: Vec<Observation>,
    pub translation_m: f64,
    /// Seed of the detector noise stream used for `frames`.
    pub obs_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub trajectories: usize,
    pub skipped_no_path: usize,
    pub mean_length: f64,
}

fn round_observation(o: &mut Observation) {
    for d in &mut o.detections {
        d.bbox.x_min = round6(d.bbox.x_min);
        d.bbox.y_min = round6(d.bbox.y_min);
        d.bbox.x_max = round6(d.bbox.x_max);
        d.bbox.y_max = round6(d.bbox.y_max);
        d.logits = [round6(d.logits[0]), round6(d.logits[1])];
        d.embedding.iter_mut().for_each(|v| *v = round6(*v));
    }
    o.global_feature.iter_mut().for_each(|v| *v = round6(*v));
}

/// Observation at a state, rounded to six decimals so that in-memory and
/// serialized frames are identical.
pub fn observe(
    scene: &GridScene,
    state: &EpisodeState,
    universe: &Universe,
    demand: DemandId,
    cfg: &PerceptionConfig,
    rng: &mut impl Rng,
) -> Result<Observation> {
    let mut o = detect(scene, state, universe, demand, cfg, rng)?;
    round_observation(&mut o);
    Ok(o)
}

/// Execute an action list from `start`, recording frames. Returns the
/// frames and the final state.
pub fn roll_out(
    scene: &GridScene,
    start: Pose,
    actions: &[Action],
    universe: &Universe,
    demand: DemandId,
    cfg: &PerceptionConfig,
    obs_seed: u64,
) -> Result<(Vec<Observation>, EpisodeState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(obs_seed);
    let mut state = EpisodeState::new(start);
    let mut frames = Vec::with_capacity(actions.len());
    for &a in actions {
        frames.push(observe(scene, &state, universe, demand, cfg, &mut rng)?);
        state = step(&state, a, scene)?.0;
    }
    Ok((frames, state))
}

/// Expert demonstrations: for each scene and each satisfiable demand,
/// `per_demand` trajectories from independent random starts toward
/// independently drawn satisfier targets.
pub fn collect_trajectories(
    scenes: &[GridScene],
    wg: &WgMappings,
    universe: &Universe,
    per_demand: usize,
    perception: &PerceptionConfig,
    th: &Thresholds,
    seed: u64,
) -> Result<(Vec<Trajectory>, CollectionStats)> {
    let mut out = Vec::new();
    let mut stats = CollectionStats::default();
    for scene in scenes {
        for demand in wg.satisfiable_in(scene.category_set()) {
            let sats = satisfying_instances(scene, demand, universe)?;
            let free = scene.traversable_cells();
            for r in 0..per_demand {
                let tags = [scene.id.0, u64::from(demand.0), r as u64];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tags));
                let target = sats[rng.random_range(0..sats.len())];
                let mut goals = success_poses_for(scene, &[target.id], th.plan_margin);
                let mut target_id = target.id;
                if goals.is_empty() {
                    // unobservable target: fall back to any satisfier
                    let ids: Vec<InstanceId> = sats.iter().map(|o| o.id).collect();
                    goals = success_poses_for(scene, &ids, th.plan_margin);
                }
                if goals.is_empty() {
                    stats.skipped_no_path += 1;
                    continue;
                }
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
                let start = start.expect("scene has free cells");
                let mut actions = match plan(scene, start, &goals) {
                    Ok(a) => a,
                    Err(DdnError::NoPath) => {
                        stats.skipped_no_path += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                actions.push(Action::Done);
                let obs_seed = derive_seed(seed, &[tags[0], tags[1], tags[2], 1]);
                let (frames, end) =
                    roll_out(scene, start.pose(), &actions, universe, demand, perception, obs_seed)?;
                if !is_nav_success(scene, &end.pose, demand, universe, th.c_navi) {
                    return Err(DdnError::Invalid(format!(
                        "expert trajectory in scene {} for demand {} ends without navigation success",
                        scene.id, demand
                    )));
                }
                let reached: Vec<InstanceId> = visible_objects(scene, &end.pose)
                    .iter()
                    .filter(|v| v.distance < th.plan_margin && sats.iter().any(|o| o.id == v.object.id))
                    .map(|v| v.object.id)
                    .collect();
                if !reached.contains(&target_id) {
                    target_id = reached.first().copied().unwrap_or(target_id);
                }
                let moves = actions.iter().filter(|a| **a == Action::MoveAhead).count();
                out.push(Trajectory {
                    scene_id: scene.id,
                    demand_id: demand,
                    start: start.pose(),
                    target_instance: target_id,
                    actions,
                    frames,
                    translation_m: moves as f64 * CELL_SIZE,
                    obs_seed,
                });
            }
        }
        debug!("scene {}: {} trajectories so far", scene.id, out.len());
    }
    stats.trajectories = out.len();
    stats.mean_length = if out.is_empty() {
        0.0
    } else {
        out.iter().map(|t| t.actions.len()).sum::<usize>() as f64 / out.len() as f64
    };
    info!(
        "collected {} trajectories (mean length {:.2}, skipped {})",
        stats.trajectories, stats.mean_length, stats.skipped_no_path
    );
    Ok((out, stats))
}

pub fn trajectories_to_jsonl(ts: &[Trajectory]) -> String {
    let mut s = String::new();
    for t in ts {
        s.push_str(&serde_json::to_string(t).expect("trajectory serialization"));
        s.push('\n');
    }
    s
}

pub fn trajectories_from_jsonl(s: &str) -> Result<Vec<Trajectory>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DdnError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::CategoryId;
    use crate::world::{cell_center, Band};

    fn room(w: usize, h: usize, walls: &[(i32, i32)], objects: Vec<ObjectInstance>) -> GridScene {
        let mut blocked = vec![false; w * h];
        for j in 0..h {
            for i in 0..w {
                blocked[j * w + i] = i == 0 || j == 0 || i == w - 1 || j == h - 1;
            }
        }
        for &(i, j) in walls {
            blocked[j as usize * w + i as usize] = true;
        }
        GridScene::new(SceneId(0), w, h, blocked, objects).unwrap()
    }

    fn obj(i: i32, j: i32) -> ObjectInstance {
        let (x, y) = cell_center(i, j);
        ObjectInstance {
            id: InstanceId(0),
            category: CategoryId(0),
            x,
            y,
            size: 0.5,
            band: Band::Mid,
        }
    }

    #[test]
    fn adjacent_aligned_goal_is_one_move() {
        let scene = room(6, 6, &[], Vec::new());
        let start = PlanState { i: 1, j: 1, heading: 0, pitch: 1 };
        let goal = PlanState { i: 2, ..start };
        let p = plan(&scene, start, &BTreeSet::from([goal])).unwrap();
        assert_eq!(p, vec![Action::MoveAhead]);
    }

    #[test]
    fn goal_behind_sealing_wall_has_no_path() {
        let scene = room(8, 6, &[(4, 1), (4, 2), (4, 3), (4, 4)], Vec::new());
        let start = PlanState { i: 1, j: 1, heading: 0, pitch: 1 };
        let goal = PlanState { i: 6, j: 2, heading: 0, pitch: 1 };
        assert!(matches!(plan(&scene, start, &BTreeSet::from([goal])), Err(DdnError::NoPath)));
    }

    #[test]
    fn turning_costs_three_rotations() {
        let scene = room(6, 6, &[], Vec::new());
        let start = PlanState { i: 2, j: 2, heading: 0, pitch: 1 };
        let goal = PlanState { heading: 1, ..start };
        let p = plan(&scene, start, &BTreeSet::from([goal])).unwrap();
        assert_eq!(p, vec![Action::RotateRight; 3]);
    }

    #[test]
    fn success_poses_in_open_room() {
        let scene = room(10, 10, &[], vec![obj(6, 5)]);
        let goals = success_poses_for(&scene, &[InstanceId(0)], 1.0);
        assert!(!goals.is_empty());
        for g in &goals {
            let v = visible_objects(&scene, &g.pose());
            assert!(v.iter().any(|v| v.distance < 1.5));
        }
    }

    #[test]
    fn sealed_closet_has_no_success_pose() {
        // object at (6,5) enclosed by walls on all sides
        let walls = [(5, 4), (6, 4), (7, 4), (5, 5), (7, 5), (5, 6), (6, 6), (7, 6)];
        let scene = room(10, 10, &walls, vec![obj(6, 5)]);
        assert!(success_poses_for(&scene, &[InstanceId(0)], 1.0).is_empty());
    }

    #[test]
    fn corridor_translation() {
        // 1-cell corridor along x; object at the far end facing the agent
        let mut walls = Vec::new();
        for i in 1..14 {
            walls.push((i, 2));
        }
        let scene = room(15, 4, &walls, vec![obj(13, 1)]);
        let goals = success_poses_for(&scene, &[InstanceId(0)], 1.0);
        // nearest goal cell: 3 cells (0.75 m) from the object → column 10
        let d = cells_to_goal(&scene, (2, 1), &goals).unwrap();
        assert_eq!(d, 8);
        assert_eq!(cells_to_goal(&scene, (10, 1), &goals), Some(0));
    }
}
