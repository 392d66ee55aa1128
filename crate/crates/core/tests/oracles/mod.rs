//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written from the behavioral rules alone: integer
//! geometry instead of floating-point clipping, plain BFS instead of A*,
//! rule-by-rule pair labels, and pixel counting instead of box algebra.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use ddn_core::attribute::{NegType, PairLabel, PairRef};
use ddn_core::expert::PlanState;
use ddn_core::world::{BBox, GridScene, ObjectInstance, Pose};

// ---------------------------------------------------------------------------
// Geometry on the eighth-meter lattice: cell centers and cell corners are
// integers after scaling by 8, so every predicate below is exact.

const SCALE: f64 = 8.0;

fn to_units(v: f64) -> i64 {
    let s = v * SCALE;
    assert!((s - s.round()).abs() < 1e-9, "coordinate {v} is off the lattice");
    s.round() as i64
}

fn orient(a: (i64, i64), b: (i64, i64), c: (i64, i64)) -> i64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Closed segment intersection.
fn segments_meet(p1: (i64, i64), p2: (i64, i64), q1: (i64, i64), q2: (i64, i64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)) {
        return true;
    }
    (d1 == 0 && on_segment(q1, q2, p1))
        || (d2 == 0 && on_segment(q1, q2, p2))
        || (d3 == 0 && on_segment(p1, p2, q1))
        || (d4 == 0 && on_segment(p1, p2, q2))
}

/// Whether the closed segment touches the closed square of cell `(i, j)`.
fn segment_touches_square(a: (i64, i64), b: (i64, i64), i: i32, j: i32) -> bool {
    let (x0, y0) = (2 * i64::from(i), 2 * i64::from(j));
    let (x1, y1) = (x0 + 2, y0 + 2);
    let inside = |p: (i64, i64)| p.0 >= x0 && p.0 <= x1 && p.1 >= y0 && p.1 <= y1;
    if inside(a) || inside(b) {
        return true;
    }
    let corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)];
    (0..4).any(|k| segments_meet(a, b, corners[k], corners[(k + 1) % 4]))
}

pub fn clear_line(scene: &GridScene, from: (f64, f64), to: (f64, f64)) -> bool {
    let a = (to_units(from.0), to_units(from.1));
    let b = (to_units(to.0), to_units(to.1));
    for j in 0..scene.height as i32 {
        for i in 0..scene.width as i32 {
            if scene.is_blocked(i, j) && segment_touches_square(a, b, i, j) {
                return false;
            }
        }
    }
    true
}

fn pitch_band_matches(pitch: i8, obj: &ObjectInstance) -> bool {
    use ddn_core::world::Band;
    let want = match pitch {
        -30 => Band::Low,
        0 => Band::Mid,
        30 => Band::High,
        p => panic!("bad pitch {p}"),
    };
    obj.band == want
}

fn within_fov(pose: &Pose, obj: &ObjectInstance) -> bool {
    let dx = to_units(obj.x) - to_units(pose.x);
    let dy = to_units(obj.y) - to_units(pose.y);
    if pose.heading % 90 == 0 {
        let (ux, uy) = match pose.heading {
            0 => (1, 0),
            90 => (0, 1),
            180 => (-1, 0),
            _ => (0, -1),
        };
        let forward = dx * ux + dy * uy;
        let lateral = (dx * -uy + dy * ux).abs();
        lateral <= forward
    } else {
        // 45° off a non-cardinal heading has irrational slope, so lattice
        // points never sit on the boundary
        let h = f64::from(pose.heading).to_radians();
        let (fx, fy) = (dx as f64, dy as f64);
        let forward = fx * h.cos() + fy * h.sin();
        let lateral = (-fx * h.sin() + fy * h.cos()).abs();
        lateral <= forward
    }
}

fn within_range(pose: &Pose, obj: &ObjectInstance, meters: f64, strict: bool) -> bool {
    let dx = to_units(obj.x) - to_units(pose.x);
    let dy = to_units(obj.y) - to_units(pose.y);
    let r = to_units(meters);
    let d2 = dx * dx + dy * dy;
    if strict {
        d2 < r * r
    } else {
        d2 <= r * r
    }
}

/// Visibility: FOV, 5 m range, pitch band and an unobstructed line of sight.
pub fn sees(scene: &GridScene, pose: &Pose, obj: &ObjectInstance) -> bool {
    within_fov(pose, obj)
        && within_range(pose, obj, 5.0, false)
        && pitch_band_matches(pose.pitch, obj)
        && clear_line(scene, (pose.x, pose.y), (obj.x, obj.y))
}

/// Ids of visible objects closer than `dist` (strict).
pub fn seen_within(scene: &GridScene, pose: &Pose, dist: f64) -> BTreeSet<u32> {
    scene
        .objects()
        .iter()
        .filter(|o| sees(scene, pose, o) && within_range(pose, o, dist, true))
        .map(|o| o.id.0)
        .collect()
}

// ---------------------------------------------------------------------------
// Planner: breadth-first search over primitive actions, 12 headings.

/// BFS distance (primitive actions) from `start` to any goal state. Forward
/// motion is only taken at cardinal headings, matching the expert lattice.
pub fn bfs_plan_cost(scene: &GridScene, start: PlanState, goals: &BTreeSet<PlanState>) -> Option<usize> {
    // (i, j, heading in 30° steps, pitch index)
    type S = (i32, i32, u8, u8);
    let is_goal = |s: &S| {
        s.2 % 3 == 0
            && goals.contains(&PlanState {
                i: s.0,
                j: s.1,
                heading: s.2 / 3,
                pitch: s.3,
            })
    };
    let s0: S = (start.i, start.j, start.heading * 3, start.pitch);
    let mut dist: HashMap<S, usize> = HashMap::from([(s0, 0)]);
    let mut q = VecDeque::from([s0]);
    while let Some(s) = q.pop_front() {
        let d = dist[&s];
        if is_goal(&s) {
            return Some(d);
        }
        let mut next = vec![(s.0, s.1, (s.2 + 1) % 12, s.3), (s.0, s.1, (s.2 + 11) % 12, s.3)];
        if s.3 < 2 {
            next.push((s.0, s.1, s.2, s.3 + 1));
        }
        if s.3 > 0 {
            next.push((s.0, s.1, s.2, s.3 - 1));
        }
        if s.2 % 3 == 0 {
            let (di, dj) = [(1, 0), (0, 1), (-1, 0), (0, -1)][usize::from(s.2 / 3)];
            if scene.is_traversable(s.0 + di, s.1 + dj) {
                next.push((s.0 + di, s.1 + dj, s.2, s.3));
            }
        }
        for n in next {
            if !dist.contains_key(&n) {
                dist.insert(n, d + 1);
                q.push_back(n);
            }
        }
    }
    None
}

/// Fewest forward moves to any goal state (turns and pitch are free).
pub fn min_moves(scene: &GridScene, start: (i32, i32), goals: &BTreeSet<PlanState>) -> Option<usize> {
    let cells: BTreeSet<(i32, i32)> = goals.iter().map(|g| (g.i, g.j)).collect();
    let mut dist = HashMap::from([(start, 0usize)]);
    let mut q = VecDeque::from([start]);
    while let Some(c) = q.pop_front() {
        if cells.contains(&c) {
            return Some(dist[&c]);
        }
        let d = dist[&c];
        for (di, dj) in [(0, -1), (-1, 0), (1, 0), (0, 1)] {
            let n = (c.0 + di, c.1 + dj);
            if scene.is_traversable(n.0, n.1) && !dist.contains_key(&n) {
                dist.insert(n, d + 1);
                q.push_back(n);
            }
        }
    }
    None
}

/// Every lattice state from which one of `targets` is seen closer than `margin`.
pub fn brute_force_success_states(scene: &GridScene, targets: &[u32], margin: f64) -> BTreeSet<PlanState> {
    let mut out = BTreeSet::new();
    for j in 0..scene.height as i32 {
        for i in 0..scene.width as i32 {
            if scene.is_blocked(i, j) || scene.object_at(i, j).is_some() {
                continue;
            }
            for heading in 0..4u8 {
                for pitch in 0..3u8 {
                    let s = PlanState { i, j, heading, pitch };
                    if seen_within(scene, &s.pose(), margin).iter().any(|id| targets.contains(id)) {
                        out.insert(s);
                    }
                }
            }
        }
    }
    out
}

/// Flood fill over cells accepted by `open`; true when they form one component.
pub fn flood_connected(width: usize, height: usize, open: impl Fn(i32, i32) -> bool) -> bool {
    let cells: Vec<(i32, i32)> = (0..height as i32)
        .flat_map(|j| (0..width as i32).map(move |i| (i, j)))
        .filter(|&(i, j)| open(i, j))
        .collect();
    let Some(&first) = cells.first() else {
        return true;
    };
    let mut seen = BTreeSet::from([first]);
    let mut stack = vec![first];
    while let Some((i, j)) = stack.pop() {
        for n in [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)] {
            if open(n.0, n.1) && seen.insert(n) {
                stack.push(n);
            }
        }
    }
    seen.len() == cells.len()
}

// ---------------------------------------------------------------------------
// Contrastive pair rules, applied literally.

pub fn pair_rule(sat: &[Vec<bool>], anchor: PairRef, cand: PairRef) -> Option<PairLabel> {
    let (d, o) = (anchor.demand, anchor.object);
    let (d2, o2) = (cand.demand, cand.object);
    if !sat[d][o] || (d2, o2) == (d, o) {
        return None;
    }
    let same_demand = d2 == d;
    let same_object = o2 == o;
    match (same_demand, same_object) {
        // another object satisfying the same demand
        (true, false) if sat[d][o2] => Some(PairLabel::Positive),
        // same demand, object that does not satisfy it
        (true, false) => Some(PairLabel::Negative(NegType::SameDemand)),
        // same object under a demand it does not satisfy
        (false, true) if !sat[d2][o] => Some(PairLabel::Negative(NegType::SameObject)),
        (false, true) => None,
        // unrelated pair, unless it carries the anchor's attribute too
        (false, false) if sat[d2][o2] && sat[d][o2] => None,
        (false, false) => Some(PairLabel::Negative(NegType::Different)),
        (true, true) => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Boxes

/// IoU by counting sample points on a grid of spacing `res`.
pub fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
    let lo_x = a.x_min.min(b.x_min);
    let hi_x = a.x_max.max(b.x_max);
    let lo_y = a.y_min.min(b.y_min);
    let hi_y = a.y_max.max(b.y_max);
    let nx = ((hi_x - lo_x) / res).ceil() as usize;
    let ny = ((hi_y - lo_y) / res).ceil() as usize;
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max;
    let (mut inter, mut union) = (0u64, 0u64);
    for r in 0..ny {
        let y = lo_y + (r as f64 + 0.5) * res;
        for c in 0..nx {
            let x = lo_x + (c as f64 + 0.5) * res;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks, one random draw each; return the worst
// relative error over sampled coordinates.

pub mod grad {
    use ddn_core::attribute::{batch_loss, AttributeConfig, AttributeEncoder};
    use ddn_core::grounding::{grounder_loss, GrounderConfig, GrounderInputs, GrounderNet};
    use ddn_core::perception::GLOBAL_DIM;
    use ddn_core::policy::{sequence_loss, AttrMode, PolicyConfig, PolicyNet, SeqInputs};
    use ddn_core::world::Action;
    use ddn_nn::gradcheck::{check_param_gradients, GradCheckConfig};
    use ddn_nn::{Graph, ParamSet, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_attr() -> AttributeConfig {
        AttributeConfig {
            demand_dim: 6,
            object_dim: 4,
            hidden: 8,
            depth: 2,
            ff_hidden: 8,
            out_dim: 5,
        }
    }

    fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Moves zero biases and unit gains off their initial values so every
    /// parameter path carries gradient.
    fn jitter(ps: &mut ParamSet, rng: &mut impl Rng) {
        for t in ps.tensors_mut() {
            for v in &mut t.data {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }

    fn cfg() -> GradCheckConfig {
        GradCheckConfig {
            h: 1e-5,
            coords_per_tensor: 4,
            ..GradCheckConfig::default()
        }
    }

    pub fn info_nce(draw: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let mut enc = AttributeEncoder::new(&small_attr(), draw);
        jitter(&mut enc.params, &mut rng);
        let group = 2 + rng.random_range(1..5);
        let x = random_tensor(3 * group, small_attr().in_dim(), &mut rng);
        let tau = rng.random_range(0.1..1.0);
        let run = |p: &ParamSet| {
            let mut g = Graph::new(p);
            let l = batch_loss(&mut g, &enc.layout, &x, group, tau).unwrap();
            (g.value(l).item(), g.backward(l))
        };
        let grads = run(&enc.params).1;
        check_param_gradients(&enc.params, |p| run(p).0, &grads, &cfg(), &mut rng).max_rel_err
    }

    pub fn policy(draw: u64) -> f64 {
        let pc = PolicyConfig {
            model_dim: 8,
            heads: 2,
            layers: 1,
            ff_hidden: 8,
            hidden: 6,
            action_emb_dim: 3,
            global_dim: GLOBAL_DIM,
            query_hidden: 6,
            memory_sink: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let mode = if draw % 2 == 0 { AttrMode::Pretrained } else { AttrMode::Joint };
        let mut net = PolicyNet::new(&pc, &small_attr(), mode, draw);
        jitter(&mut net.params, &mut rng);
        let (t, k) = (3, 4);
        let x = SeqInputs {
            k,
            det: random_tensor(t * k, net.det_dim(), &mut rng),
            geo: random_tensor(t * k, 6, &mut rng),
            ctx: random_tensor(t, GLOBAL_DIM + 6, &mut rng),
            prev: vec![None, Some(Action::MoveAhead), Some(Action::LookUp)],
        };
        let targets: Vec<Action> = (0..t).map(|_| Action::ALL[rng.random_range(0..6)]).collect();
        let run = |p: &ParamSet| {
            let mut g = Graph::new(p);
            let l = sequence_loss(&mut g, &net, &x, &targets).unwrap();
            (g.value(l).item(), g.backward(l))
        };
        let grads = run(&net.params).1;
        check_param_gradients(&net.params, |p| run(p).0, &grads, &cfg(), &mut rng).max_rel_err
    }

    pub fn grounder(draw: u64) -> f64 {
        let gc = GrounderConfig {
            model_dim: 8,
            heads: 2,
            layers: 1,
            ff_hidden: 8,
            object_dim: 4,
            demand_dim: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
        let mut net = GrounderNet::new(&gc, draw);
        jitter(&mut net.params, &mut rng);
        let (b, k) = (3, 5);
        let x = GrounderInputs {
            k,
            det: random_tensor(b * k, 4 + 6, &mut rng),
            global: random_tensor(b, GLOBAL_DIM, &mut rng),
            demand: random_tensor(b, 6, &mut rng),
        };
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let run = |p: &ParamSet| {
            let mut g = Graph::new(p);
            let l = grounder_loss(&mut g, &net, &x, &labels).unwrap();
            (g.value(l).item(), g.backward(l))
        };
        let grads = run(&net.params).1;
        check_param_gradients(&net.params, |p| run(p).0, &grads, &cfg(), &mut rng).max_rel_err
    }
}
