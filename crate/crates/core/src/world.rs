//! Procedural 2-D rooms, agent kinematics and view geometry.
//!
//! Coordinates are meters with `x` along grid columns and `y` along grid rows
//! (rows grow "down"), so heading 0 points along +x and positive angles turn
//! clockwise, i.e. to the agent's right.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::ids::{CategoryId, InstanceId, SceneId};
use crate::util::{round6, Fixed6};

pub const CELL_SIZE: f64 = 0.25;
pub const AGENT_RADIUS: f64 = 0.1;
pub const HALF_FOV_DEG: f64 = 45.0;
pub const VIEW_RANGE: f64 = 5.0;
pub const IMAGE_SIZE: f64 = 100.0;
pub const MIN_BOX_WIDTH: f64 = 2.0;
pub const HEADING_STEP: u16 = 30;
pub const PITCH_STEP: i8 = 30;
pub const MIN_OBJECT_SIZE: f64 = 0.3;
pub const MAX_OBJECT_SIZE: f64 = 1.0;

/// Vertical band an object occupies; only one band is in view per pitch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Low, Band::Mid, Band::High];

    pub fn for_pitch(pitch: i8) -> Band {
        match pitch {
            p if p < 0 => Band::Low,
            0 => Band::Mid,
            _ => Band::High,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: InstanceId,
    pub category: CategoryId,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub band: Band,
}

impl ObjectInstance {
    pub fn cell(&self) -> (i32, i32) {
        cell_of(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    MoveAhead,
    RotateRight,
    RotateLeft,
    LookUp,
    LookDown,
    Done,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::MoveAhead,
        Action::RotateRight,
        Action::RotateLeft,
        Action::LookUp,
        Action::LookDown,
        Action::Done,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

/// Agent position (meters), heading (degrees, multiple of 30) and pitch (−30, 0, +30).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: u16,
    pub pitch: i8,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: u16, pitch: i8) -> Self {
        Self {
            x,
            y,
            heading,
            pitch,
        }
    }

    /// Pose at the center of cell `(i, j)`.
    pub fn at_cell(i: i32, j: i32, heading: u16, pitch: i8) -> Self {
        let (x, y) = cell_center(i, j);
        Self::new(x, y, heading, pitch)
    }

    pub fn is_well_formed(&self) -> bool {
        self.heading < 360
            && self.heading % HEADING_STEP == 0
            && matches!(self.pitch, -30 | 0 | 30)
            && self.x.is_finite()
            && self.y.is_finite()
    }
}

/// Unit direction of a heading that is a multiple of 30°, exact at the cardinals.
pub fn heading_dir(heading: u16) -> (f64, f64) {
    const S3: f64 = 0.866_025_403_784_438_6;
    match heading % 360 {
        0 => (1.0, 0.0),
        30 => (S3, 0.5),
        60 => (0.5, S3),
        90 => (0.0, 1.0),
        120 => (-0.5, S3),
        150 => (-S3, 0.5),
        180 => (-1.0, 0.0),
        210 => (-S3, -0.5),
        240 => (-0.5, -S3),
        270 => (0.0, -1.0),
        300 => (0.5, -S3),
        330 => (S3, -0.5),
        h => {
            let r = f64::from(h).to_radians();
            (r.cos(), r.sin())
        }
    }
}

pub fn cell_of(x: f64, y: f64) -> (i32, i32) {
    ((x / CELL_SIZE).floor() as i32, (y / CELL_SIZE).floor() as i32)
}

pub fn cell_center(i: i32, j: i32) -> (f64, f64) {
    ((f64::from(i) + 0.5) * CELL_SIZE, (f64::from(j) + 0.5) * CELL_SIZE)
}

/// Bounding box in a 100×100 image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        let inside = |v: f64| (0.0..=IMAGE_SIZE).contains(&v);
        self.x_min <= self.x_max
            && self.y_min <= self.y_max
            && inside(self.x_min)
            && inside(self.x_max)
            && inside(self.y_min)
            && inside(self.y_max)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x_min + self.x_max)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneGenConfig {
    pub width: usize,
    pub height: usize,
    /// Fraction of interior cells turned into internal walls.
    pub wall_density: f64,
    pub n_objects: usize,
    pub max_attempts: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            width: 12,
            height: 12,
            wall_density: 0.15,
            n_objects: 12,
            max_attempts: 400,
        }
    }
}

/// Immutable room: walls, objects, and the set of categories present.
#[derive(Debug, Clone, PartialEq)]
pub struct GridScene {
    pub id: SceneId,
    pub width: usize,
    pub height: usize,
    blocked: Vec<bool>,
    objects: Vec<ObjectInstance>,
    category_set: BTreeSet<CategoryId>,
    object_cells: Vec<Option<usize>>,
}

impl GridScene {
    /// Build a scene, validating the structural invariants.
    pub fn new(
        id: SceneId,
        width: usize,
        height: usize,
        blocked: Vec<bool>,
        objects: Vec<ObjectInstance>,
    ) -> Result<Self> {
        if blocked.len() != width * height {
            return Err(DdnError::Invalid(format!(
                "blocked has {} cells, expected {}",
                blocked.len(),
                width * height
            )));
        }
        let mut scene = Self {
            id,
            width,
            height,
            blocked,
            objects: Vec::new(),
            category_set: BTreeSet::new(),
            object_cells: vec![None; width * height],
        };
        for i in 0..width as i32 {
            for j in [0, height as i32 - 1] {
                if !scene.is_blocked(i, j) {
                    return Err(DdnError::Invalid("outer boundary must be blocked".into()));
                }
            }
        }
        for j in 0..height as i32 {
            for i in [0, width as i32 - 1] {
                if !scene.is_blocked(i, j) {
                    return Err(DdnError::Invalid("outer boundary must be blocked".into()));
                }
            }
        }
        for o in objects {
            scene.insert_object(o)?;
        }
        Ok(scene)
    }

    fn insert_object(&mut self, o: ObjectInstance) -> Result<()> {
        let (i, j) = o.cell();
        if !self.in_bounds(i, j) || self.is_blocked(i, j) {
            return Err(DdnError::Invalid(format!(
                "object {} is not on a free cell",
                o.id.0
            )));
        }
        let idx = self.index(i, j);
        if self.object_cells[idx].is_some() {
            return Err(DdnError::Invalid(format!(
                "object {} shares a cell with another object",
                o.id.0
            )));
        }
        self.object_cells[idx] = Some(self.objects.len());
        self.category_set.insert(o.category);
        self.objects.push(o);
        Ok(())
    }

    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }

    pub fn object(&self, id: InstanceId) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn category_set(&self) -> &BTreeSet<CategoryId> {
        &self.category_set
    }

    pub fn blocked_cells(&self) -> &[bool] {
        &self.blocked
    }

    fn index(&self, i: i32, j: i32) -> usize {
        j as usize * self.width + i as usize
    }

    pub fn in_bounds(&self, i: i32, j: i32) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height
    }

    /// Wall cell (out-of-bounds counts as wall).
    pub fn is_blocked(&self, i: i32, j: i32) -> bool {
        !self.in_bounds(i, j) || self.blocked[self.index(i, j)]
    }

    pub fn object_at(&self, i: i32, j: i32) -> Option<&ObjectInstance> {
        if !self.in_bounds(i, j) {
            return None;
        }
        self.object_cells[self.index(i, j)].map(|k| &self.objects[k])
    }

    /// Wall or object: the agent cannot enter it.
    pub fn is_occupied(&self, i: i32, j: i32) -> bool {
        self.is_blocked(i, j) || self.object_at(i, j).is_some()
    }

    pub fn is_traversable(&self, i: i32, j: i32) -> bool {
        !self.is_occupied(i, j)
    }

    pub fn traversable_cells(&self) -> Vec<(i32, i32)> {
        let mut out = Vec::new();
        for j in 0..self.height as i32 {
            for i in 0..self.width as i32 {
                if self.is_traversable(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Whether a disc of the agent radius at `(x, y)` overlaps no occupied cell.
    pub fn disc_is_free(&self, x: f64, y: f64) -> bool {
        !self.segment_hits_occupied((x, y), (x, y), AGENT_RADIUS)
    }

    /// True when the capsule swept by a disc of `radius` along `a → b`
    /// comes closer than `radius` to any occupied cell.
    pub fn segment_hits_occupied(&self, a: (f64, f64), b: (f64, f64), radius: f64) -> bool {
        let (i0, j0) = cell_of(a.0.min(b.0) - radius, a.1.min(b.1) - radius);
        let (i1, j1) = cell_of(a.0.max(b.0) + radius, a.1.max(b.1) + radius);
        for j in j0..=j1 {
            for i in i0..=i1 {
                if self.is_occupied(i, j) && segment_square_distance(a, b, i, j) < radius {
                    return true;
                }
            }
        }
        false
    }

    /// Wall cells whose closed square the segment `a → b` touches (the supercover).
    pub fn line_of_sight(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (i0, j0) = cell_of(a.0.min(b.0), a.1.min(b.1));
        let (i1, j1) = cell_of(a.0.max(b.0), a.1.max(b.1));
        // closed squares: a point on a cell boundary also touches the previous cell
        for j in (j0 - 1)..=j1 {
            for i in (i0 - 1)..=i1 {
                if self.is_blocked(i, j) && segment_touches_cell(a, b, i, j) {
                    return false;
                }
            }
        }
        true
    }

    /// Free-space connectivity over non-wall cells.
    pub fn free_space_connected(&self) -> bool {
        connected(self.width, self.height, |i, j| !self.is_blocked(i, j))
    }

    /// Connectivity over cells the agent can enter.
    pub fn traversable_connected(&self) -> bool {
        connected(self.width, self.height, |i, j| self.is_traversable(i, j))
    }

    pub fn pose_is_valid(&self, pose: &Pose) -> bool {
        let (i, j) = cell_of(pose.x, pose.y);
        pose.is_well_formed() && self.is_traversable(i, j) && self.disc_is_free(pose.x, pose.y)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SceneRecordOut::from(self)).expect("scene serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: SceneRecordIn = serde_json::from_str(s)?;
        let blocked = rec.blocked.iter().map(|&b| b != 0).collect();
        GridScene::new(rec.id, rec.width, rec.height, blocked, rec.objects)
    }
}

/// Flood fill from the first cell satisfying `free`; true when it reaches all of them.
fn connected(width: usize, height: usize, free: impl Fn(i32, i32) -> bool) -> bool {
    let mut total = 0;
    let mut start = None;
    for j in 0..height as i32 {
        for i in 0..width as i32 {
            if free(i, j) {
                total += 1;
                start.get_or_insert((i, j));
            }
        }
    }
    let Some(start) = start else { return true };
    let mut seen = vec![false; width * height];
    let mut queue = VecDeque::from([start]);
    seen[start.1 as usize * width + start.0 as usize] = true;
    let mut reached = 0;
    while let Some((i, j)) = queue.pop_front() {
        reached += 1;
        for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < 0 || nj < 0 || ni as usize >= width || nj as usize >= height {
                continue;
            }
            let k = nj as usize * width + ni as usize;
            if !seen[k] && free(ni, nj) {
                seen[k] = true;
                queue.push_back((ni, nj));
            }
        }
    }
    reached == total
}

fn cell_bounds(i: i32, j: i32) -> (f64, f64, f64, f64) {
    (
        f64::from(i) * CELL_SIZE,
        f64::from(j) * CELL_SIZE,
        f64::from(i + 1) * CELL_SIZE,
        f64::from(j + 1) * CELL_SIZE,
    )
}

/// Liang–Barsky clip of the segment against the closed cell square.
fn segment_touches_cell(a: (f64, f64), b: (f64, f64), i: i32, j: i32) -> bool {
    let (x0, y0, x1, y1) = cell_bounds(i, j);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-dx, a.0 - x0),
        (dx, x1 - a.0),
        (-dy, a.1 - y0),
        (dy, y1 - a.1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    t0 <= t1
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn point_square_distance(p: (f64, f64), i: i32, j: i32) -> f64 {
    let (x0, y0, x1, y1) = cell_bounds(i, j);
    let dx = (x0 - p.0).max(0.0).max(p.0 - x1);
    let dy = (y0 - p.1).max(0.0).max(p.1 - y1);
    (dx * dx + dy * dy).sqrt()
}

/// Euclidean distance between a segment and a closed cell square.
fn segment_square_distance(a: (f64, f64), b: (f64, f64), i: i32, j: i32) -> f64 {
    if segment_touches_cell(a, b, i, j) {
        return 0.0;
    }
    let (x0, y0, x1, y1) = cell_bounds(i, j);
    let mut d = point_square_distance(a, i, j).min(point_square_distance(b, i, j));
    for c in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
        d = d.min(point_segment_distance(c, a, b));
    }
    d
}

#[derive(Serialize)]
struct ObjectRecordOut {
    id: InstanceId,
    category: CategoryId,
    x: Fixed6,
    y: Fixed6,
    size: Fixed6,
    band: Band,
}

#[derive(Serialize)]
struct SceneRecordOut {
    id: SceneId,
    width: usize,
    height: usize,
    blocked: Vec<u8>,
    objects: Vec<ObjectRecordOut>,
}

impl From<&GridScene> for SceneRecordOut {
    fn from(s: &GridScene) -> Self {
        Self {
            id: s.id,
            width: s.width,
            height: s.height,
            blocked: s.blocked.iter().map(|&b| u8::from(b)).collect(),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecordOut {
                    id: o.id,
                    category: o.category,
                    x: Fixed6(o.x),
                    y: Fixed6(o.y),
                    size: Fixed6(o.size),
                    band: o.band,
                })
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct SceneRecordIn {
    id: SceneId,
    width: usize,
    height: usize,
    blocked: Vec<u8>,
    objects: Vec<ObjectInstance>,
}

/// Generate a connected room with internal walls and `n_objects` objects whose
/// categories are drawn uniformly from `category_pool`.
pub fn generate_scene(
    config: &SceneGenConfig,
    category_pool: &[CategoryId],
    seed: u64,
) -> Result<GridScene> {
    if config.width < 6 || config.height < 6 {
        return Err(DdnError::Invalid("scene must be at least 6x6 cells".into()));
    }
    if config.n_objects == 0 {
        return Err(DdnError::Invalid("scene needs at least one object".into()));
    }
    if category_pool.is_empty() {
        return Err(DdnError::Invalid("empty category pool".into()));
    }
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocked = vec![false; w * h];
    for j in 0..h {
        for i in 0..w {
            if i == 0 || j == 0 || i == w - 1 || j == h - 1 {
                blocked[j * w + i] = true;
            }
        }
    }
    let interior = (w - 2) * (h - 2);
    let target_walls = (config.wall_density.clamp(0.0, 0.9) * interior as f64).round() as usize;
    let mut walls = 0;
    let mut attempts = 0;
    while walls < target_walls && attempts < config.max_attempts {
        attempts += 1;
        let horizontal = rng.random_bool(0.5);
        let len = rng.random_range(2..=(w.max(h) / 2).max(2));
        let i0 = rng.random_range(1..w - 1);
        let j0 = rng.random_range(1..h - 1);
        let mut trial = blocked.clone();
        let mut added = 0;
        for s in 0..len {
            let (i, j) = if horizontal { (i0 + s, j0) } else { (i0, j0 + s) };
            if i >= w - 1 || j >= h - 1 || walls + added >= target_walls {
                break;
            }
            if !trial[j * w + i] {
                trial[j * w + i] = true;
                added += 1;
            }
        }
        if added == 0 {
            continue;
        }
        let keeps_room = (interior - walls - added) >= config.n_objects + 2;
        if keeps_room && connected(w, h, |i, j| !trial[j as usize * w + i as usize]) {
            blocked = trial;
            walls += added;
        }
    }

    let mut scene = GridScene::new(SceneId(seed), w, h, blocked, Vec::new())?;
    let mut free: Vec<(i32, i32)> = scene.traversable_cells();
    free.shuffle(&mut rng);
    let mut placed = 0u32;
    let mut candidates = free.into_iter();
    while (placed as usize) < config.n_objects {
        let Some((i, j)) = candidates.next() else {
            return Err(DdnError::GenerationFailed(format!(
                "placed {placed} of {} objects in scene {seed}",
                config.n_objects
            )));
        };
        let (x, y) = cell_center(i, j);
        let obj = ObjectInstance {
            id: InstanceId(placed),
            category: category_pool[rng.random_range(0..category_pool.len())],
            x,
            y,
            size: round6(rng.random_range(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE)),
            band: Band::ALL[rng.random_range(0..3)],
        };
        let mut trial = scene.clone();
        trial.insert_object(obj)?;
        let has_access = [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|(di, dj)| trial.is_traversable(i + di, j + dj));
        if has_access && trial.traversable_connected() {
            scene = trial;
            placed += 1;
        }
    }
    Ok(scene)
}

/// Per-episode agent state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub pose: Pose,
    pub steps: u32,
    pub terminated: bool,
}

impl EpisodeState {
    pub fn new(pose: Pose) -> Self {
        Self {
            pose,
            steps: 0,
            terminated: false,
        }
    }
}

/// Apply one action. Returns the new state and whether a MoveAhead collided.
pub fn step(state: &EpisodeState, action: Action, scene: &GridScene) -> Result<(EpisodeState, bool)> {
    if state.terminated {
        return Err(DdnError::SteppedAfterDone);
    }
    let mut next = *state;
    next.steps += 1;
    let mut collided = false;
    let pose = &mut next.pose;
    match action {
        Action::MoveAhead => {
            let (dx, dy) = heading_dir(pose.heading);
            let target = (pose.x + CELL_SIZE * dx, pose.y + CELL_SIZE * dy);
            if scene.segment_hits_occupied((pose.x, pose.y), target, AGENT_RADIUS) {
                collided = true;
            } else {
                pose.x = target.0;
                pose.y = target.1;
            }
        }
        Action::RotateRight => pose.heading = (pose.heading + HEADING_STEP) % 360,
        Action::RotateLeft => pose.heading = (pose.heading + 360 - HEADING_STEP) % 360,
        Action::LookUp => pose.pitch = (pose.pitch + PITCH_STEP).min(PITCH_STEP),
        Action::LookDown => pose.pitch = (pose.pitch - PITCH_STEP).max(-PITCH_STEP),
        Action::Done => next.terminated = true,
    }
    Ok((next, collided))
}

/// Ground-plane distance between the agent and an object center.
pub fn horizontal_distance(pose: &Pose, obj: &ObjectInstance) -> f64 {
    (obj.x - pose.x).hypot(obj.y - pose.y)
}

/// Signed angle (degrees, in (−180, 180]) from the heading to the object; positive is to the right.
pub fn bearing(pose: &Pose, obj: &ObjectInstance) -> f64 {
    let abs = (obj.y - pose.y).atan2(obj.x - pose.x).to_degrees();
    let mut b = abs - f64::from(pose.heading);
    while b <= -180.0 {
        b += 360.0;
    }
    while b > 180.0 {
        b -= 360.0;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibleObject<'a> {
    pub object: &'a ObjectInstance,
    pub distance: f64,
    pub bearing: f64,
}

fn is_visible(scene: &GridScene, pose: &Pose, obj: &ObjectInstance) -> Option<(f64, f64)> {
    let distance = horizontal_distance(pose, obj);
    let bearing = bearing(pose, obj);
    let ok = bearing.abs() <= HALF_FOV_DEG
        && distance <= VIEW_RANGE
        && obj.band == Band::for_pitch(pose.pitch)
        && scene.line_of_sight((pose.x, pose.y), (obj.x, obj.y));
    ok.then_some((distance, bearing))
}

/// Objects inside the horizontal FOV, range and current pitch band with a clear
/// line of sight, nearest first.
pub fn visible_objects<'a>(scene: &'a GridScene, pose: &Pose) -> Vec<VisibleObject<'a>> {
    let mut out: Vec<VisibleObject<'a>> = scene
        .objects()
        .iter()
        .filter_map(|o| {
            is_visible(scene, pose, o).map(|(distance, bearing)| VisibleObject {
                object: o,
                distance,
                bearing,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.object.id.cmp(&b.object.id))
    });
    out
}

/// Box from bearing and apparent size; errors when the object is not visible.
pub fn project_bbox(scene: &GridScene, obj: &ObjectInstance, pose: &Pose) -> Result<BBox> {
    let (distance, bearing) =
        is_visible(scene, pose, obj).ok_or(DdnError::NotVisible(obj.id.0))?;
    Ok(bbox_from_geometry(bearing, distance, obj.size))
}

/// The projection formula itself, for callers that already know the geometry.
pub fn bbox_from_geometry(bearing: f64, distance: f64, size: f64) -> BBox {
    let half = IMAGE_SIZE / 2.0;
    let cx = half * (1.0 + bearing / HALF_FOV_DEG);
    let w = (half * size / distance.max(1e-9)).clamp(MIN_BOX_WIDTH, IMAGE_SIZE);
    let c = |v: f64| v.clamp(0.0, IMAGE_SIZE);
    BBox::new(c(cx - w / 2.0), c(half - w / 2.0), c(cx + w / 2.0), c(half + w / 2.0))
}
