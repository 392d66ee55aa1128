//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the verdict lines always
//! reach the console. Exits 0 after reporting; set `DDN_ACCEPTANCE_STRICT=1`
//! to exit non-zero when any criterion fails, and `DDN_ACCEPTANCE_QUICK=1`
//! to skip the long end-to-end criteria (4b, 5b, 7, 8).

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ddn_core::attribute::{
    clustering_report, construct_pairs, train_attribute, AttributeEncoder, NegType, PairLabel, PairRef, PairSpec,
    PairUniverse,
};
use ddn_core::config::{generate_scene_sets, RunConfig};
use ddn_core::demands::{build_lg_mappings, build_wg_mappings, split_demands, Universe};
use ddn_core::eval::EpisodeLog;
use ddn_core::expert::{plan, success_poses, trajectories_from_jsonl, PlanState};
use ddn_core::grounding::{collect_grounding_data, grounder_accuracy, split_frames, train_grounder, GrounderNet};
use ddn_core::ids::{CategoryId, DemandId};
use ddn_core::metrics::{is_nav_success, iou, spl, SplInput};
use ddn_core::util::derive_seed;
use ddn_core::world::{generate_scene, step, BBox, EpisodeState, GridScene, SceneGenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::value::RawValue;

// Stage tags used by the command-line pipeline when deriving seeds.
const SCENES: u64 = 1;
const MAPPINGS: u64 = 2;
const GROUNDER: u64 = 6;

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    skipped: bool,
    detail: String,
    secs: f64,
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    eprintln!("[acceptance] running {id}: {name}");
    let t = Instant::now();
    let (pass, detail) = f();
    let secs = t.elapsed().as_secs_f64();
    eprintln!("[acceptance] {id} done in {secs:.1}s");
    Verdict {
        id,
        name,
        pass,
        skipped: false,
        detail,
        secs,
    }
}

fn skipped(id: u8, name: &'static str) -> Verdict {
    Verdict {
        id,
        name,
        pass: true,
        skipped: true,
        detail: "not run in quick mode".into(),
        secs: 0.0,
    }
}

// ---------------------------------------------------------------------------
// 1. Pair rules

fn pair_table(sat: Vec<Vec<bool>>) -> PairUniverse {
    let (nd, no) = (sat.len(), sat[0].len());
    PairUniverse::from_table(
        (0..nd as u32).map(DemandId).collect(),
        (0..no as u32).map(CategoryId).collect(),
        vec![Vec::new(); nd],
        vec![Vec::new(); no],
        sat,
    )
}

fn check_pair_universe(sat: &[Vec<bool>], rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let pu = pair_table(sat.to_vec());
    let (nd, no) = (sat.len(), sat[0].len());
    let pr = |demand, object| PairRef { demand, object };
    let mut compared = 0;
    for ad in 0..nd {
        for ao in 0..no {
            for cd in 0..nd {
                for co in 0..no {
                    let (a, c) = (pr(ad, ao), pr(cd, co));
                    let (got, want) = (pu.classify(a, c), oracles::pair_rule(sat, a, c));
                    if got != want {
                        return Err(format!("{sat:?}: anchor {a:?} cand {c:?}: {got:?} vs {want:?}"));
                    }
                    compared += 1;
                }
            }
        }
    }
    if let Ok(batch) = construct_pairs(&pu, &PairSpec::default(), rng) {
        for s in &batch.samples {
            if oracles::pair_rule(sat, s.anchor, s.positive) != Some(PairLabel::Positive) {
                return Err(format!("bad positive {:?} for {:?}", s.positive, s.anchor));
            }
            for (n, t) in &s.negatives {
                if oracles::pair_rule(sat, s.anchor, *n) != Some(PairLabel::Negative(*t)) {
                    return Err(format!("bad negative {n:?} ({t:?}) for {:?}", s.anchor));
                }
                compared += 1;
            }
        }
    }
    Ok(compared)
}

fn criterion_1() -> (bool, String) {
    // D1: {a, b, c}, D2: {d, e, f}, D3: {g, h, i}
    let fig: Vec<Vec<bool>> = (0..3).map(|d| (0..9).map(|o| o / 3 == d).collect()).collect();
    let pu = pair_table(fig.clone());
    let anchor = PairRef { demand: 0, object: 0 };
    let positives: Vec<PairRef> = pu
        .enumerate_candidates(anchor)
        .into_iter()
        .filter(|(_, l)| *l == PairLabel::Positive)
        .map(|(p, _)| p)
        .collect();
    let fig_ok = positives == vec![PairRef { demand: 0, object: 1 }, PairRef { demand: 0, object: 2 }]
        && pu.classify(anchor, PairRef { demand: 0, object: 3 }) == Some(PairLabel::Negative(NegType::SameDemand))
        && pu.classify(anchor, PairRef { demand: 1, object: 0 }) == Some(PairLabel::Negative(NegType::SameObject))
        && pu.classify(anchor, PairRef { demand: 1, object: 2 }) == Some(PairLabel::Negative(NegType::Different));
    if !fig_ok {
        return (false, "figure examples mislabeled".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut compared = check_pair_universe(&fig, &mut rng).unwrap_or(0);
    for _ in 0..20 {
        let nd = rng.random_range(2..=5);
        let no = rng.random_range(2..=6);
        let sat: Vec<Vec<bool>> = (0..nd).map(|_| (0..no).map(|_| rng.random_bool(0.45)).collect()).collect();
        match check_pair_universe(&sat, &mut rng) {
            Ok(n) => compared += n,
            Err(e) => return (false, e),
        }
    }
    (true, format!("figure examples + 20 random universes, {compared} labels identical"))
}

// ---------------------------------------------------------------------------
// 2. Gradients

fn criterion_2() -> (bool, String) {
    let worst = |f: fn(u64) -> f64| (0..20).map(f).fold(0.0f64, f64::max);
    let (a, b, c) = (
        worst(oracles::grad::info_nce),
        worst(oracles::grad::policy),
        worst(oracles::grad::grounder),
    );
    (
        a.max(b).max(c) < 1e-4,
        format!("max rel err over 20 draws: InfoNCE {a:.2e}, policy {b:.2e}, grounder {c:.2e} (< 1e-4)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Attribute clustering

fn desk_pair_universe(cfg: &RunConfig) -> (Universe, PairUniverse) {
    let u = Universe::generate(&cfg.universe, cfg.seed).unwrap();
    let ms = derive_seed(cfg.seed, &[MAPPINGS]);
    let split = split_demands(&u, cfg.n_train_demands, cfg.n_test_demands, derive_seed(ms, &[2])).unwrap();
    let lg = build_lg_mappings(&u, cfg.n_lg, derive_seed(ms, &[1]));
    let pu = PairUniverse::from_lg(&u, &lg.restrict(&split.train)).unwrap();
    (u, pu)
}

fn criterion_3() -> (bool, String) {
    let cfg = RunConfig::desk();
    let (_, pu) = desk_pair_universe(&cfg);
    let (mut trained, mut untrained) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let mut enc = AttributeEncoder::new(&cfg.attribute, seed);
        untrained.push(clustering_report(|f| enc.encode_batch(f), &pu, 0, seed).unwrap().gap);
        let mut tc = cfg.attribute_train.clone();
        tc.seed = seed;
        train_attribute(&mut enc, &pu, &tc).unwrap();
        trained.push(clustering_report(|f| enc.encode_batch(f), &pu, 0, seed).unwrap().gap);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (t, u) = (mean(&trained), mean(&untrained));
    (
        t >= 0.2 && u.abs() < 0.05,
        format!("trained gap {t:.3} (>= 0.2), untrained |gap| {:.3} (< 0.05); seeds {trained:.3?} / {untrained:.3?}", u.abs()),
    )
}

// ---------------------------------------------------------------------------
// 4. Planner optimality

fn criterion_4a() -> (bool, String) {
    let u = Universe::generate(&RunConfig::desk().universe, 0).unwrap();
    let pool: BTreeSet<_> = u.scene_pool().into_iter().collect();
    let wg = build_wg_mappings(&u, &pool);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut equal, mut total) = (0, 0);
    for seed in 0..100u64 {
        let s = generate_scene(&SceneGenConfig::default(), &u.scene_pool(), 40_000 + seed).unwrap();
        let demands = wg.satisfiable_in(s.category_set());
        let d = demands[rng.random_range(0..demands.len())];
        let goals = success_poses(&s, d, &u, 1.0).unwrap();
        let free = s.traversable_cells();
        let (i, j) = free[rng.random_range(0..free.len())];
        let start = PlanState {
            i,
            j,
            heading: rng.random_range(0..4),
            pitch: rng.random_range(0..3),
        };
        let got = plan(&s, start, &goals).ok().map(|a| a.len());
        total += 1;
        equal += usize::from(got == oracles::bfs_plan_cost(&s, start, &goals));
    }
    (equal == total, format!("A* cost == BFS cost on {equal}/{total} random 12x12 scenes"))
}

#[derive(Deserialize)]
struct Envelope {
    data: Box<RawValue>,
}

#[derive(Deserialize)]
struct SceneSets {
    seen: Vec<Box<RawValue>>,
    unseen: Vec<Box<RawValue>>,
}

fn load_universe(dir: &Path) -> Universe {
    let env: Envelope = serde_json::from_str(&fs::read_to_string(dir.join("universe.json")).unwrap()).unwrap();
    Universe::from_json(env.data.get()).unwrap()
}

fn load_scenes(dir: &Path) -> Vec<GridScene> {
    let env: Envelope = serde_json::from_str(&fs::read_to_string(dir.join("scenes.json")).unwrap()).unwrap();
    let sets: SceneSets = serde_json::from_str(env.data.get()).unwrap();
    sets.seen
        .iter()
        .chain(&sets.unseen)
        .map(|r| GridScene::from_json(r.get()).unwrap())
        .collect()
}

fn jsonl_body(path: &Path) -> String {
    let s = fs::read_to_string(path).unwrap();
    s.split_once('\n').map(|(_, b)| b.to_string()).unwrap_or_default()
}

fn criterion_4b(run: &Path) -> (bool, String) {
    let u = load_universe(run);
    let scenes = load_scenes(run);
    let ts = trajectories_from_jsonl(&jsonl_body(&run.join("trajectories.jsonl"))).unwrap();
    let mut ok = 0;
    for t in &ts {
        let s = scenes.iter().find(|s| s.id == t.scene_id).unwrap();
        let mut st = EpisodeState::new(t.start);
        for a in &t.actions {
            st = step(&st, *a, s).unwrap().0;
        }
        ok += usize::from(st.terminated && is_nav_success(s, &st.pose, t.demand_id, &u, 1.5));
    }
    (
        ok == ts.len() && !ts.is_empty(),
        format!("{ok}/{} collected trajectories end in navigation success", ts.len()),
    )
}

// ---------------------------------------------------------------------------
// 5. Metric fidelity

struct Hand(bool, f64, f64);

impl SplInput for Hand {
    fn success(&self) -> bool {
        self.0
    }
    fn path_length(&self) -> f64 {
        self.1
    }
    fn shortest_length(&self) -> f64 {
        self.2
    }
}

fn criterion_5a() -> (bool, String) {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0);
    let raster = oracles::raster_iou(&a, &b, 0.01);
    let err = (iou(&a, &b) - raster).abs();
    let spl_ok = spl(&[Hand(false, 1.0, 1.0)]) == 0.0
        && spl(&[Hand(true, 2.0, 2.0)]) == 1.0
        && spl(&[Hand(true, 4.0, 2.0)]) == 0.5
        && spl(&[Hand(true, 0.0, 0.0)]) == 1.0;
    (
        err < 1e-3 && spl_ok,
        format!("IoU 1/7 vs rasterization |diff| {err:.1e} (< 1e-3); SPL hand cases exact: {spl_ok}"),
    )
}

fn criterion_5b(runs: &[PathBuf]) -> (bool, String) {
    let (mut n, mut bad) = (0, 0);
    for run in runs {
        let Ok(entries) = fs::read_dir(run.join("results")) else {
            continue;
        };
        for e in entries.flatten() {
            let p = e.path().join("episodes.jsonl");
            if !p.is_file() {
                continue;
            }
            for line in jsonl_body(&p).lines().filter(|l| !l.is_empty()) {
                let log: EpisodeLog = serde_json::from_str(line).unwrap();
                n += 1;
                bad += usize::from(log.result.sel_success && !log.result.nav_success);
            }
        }
    }
    (n > 0 && bad == 0, format!("sel_success => nav_success on {}/{n} logged episodes", n - bad))
}

// ---------------------------------------------------------------------------
// 6. Grounder sanity

fn criterion_6() -> (bool, String) {
    let mut cfg = RunConfig::desk();
    cfg.perception.sigma_align = 0.0;
    cfg.perception.logit_noise = 0.0;
    let u = Universe::generate(&cfg.universe, cfg.seed).unwrap();
    let (seen, _) =
        generate_scene_sets(&u, &cfg.scenes, cfg.n_seen_scenes, 0, derive_seed(cfg.seed, &[SCENES])).unwrap();
    let pool: BTreeSet<_> = u.scene_pool().into_iter().collect();
    let ms = derive_seed(cfg.seed, &[MAPPINGS]);
    let split = split_demands(&u, cfg.n_train_demands, cfg.n_test_demands, derive_seed(ms, &[2])).unwrap();
    let wg = build_wg_mappings(&u, &pool).restrict(&split.train);
    let frames = collect_grounding_data(
        &seen,
        &wg,
        &u,
        cfg.grounding_frames_per_scene,
        &cfg.perception,
        &cfg.thresholds,
        derive_seed(cfg.seed, &[GROUNDER, 1]),
    )
    .unwrap();
    let (_, held) = split_frames(frames.len(), cfg.grounder_train.holdout_fraction, cfg.grounder_train.seed);
    let held: Vec<_> = held.iter().map(|&i| &frames[i]).collect();
    // untrained accuracy averaged over several initializations
    let inits: Vec<f64> = (0..10)
        .map(|s| grounder_accuracy(&GrounderNet::new(&cfg.grounder, 100 + s), &held, &u).unwrap())
        .collect();
    let untrained = inits.iter().sum::<f64>() / inits.len() as f64;
    let mut net = GrounderNet::new(&cfg.grounder, 0);
    let hist = train_grounder(&mut net, &frames, &u, &cfg.grounder_train).unwrap();
    let trained = *hist.heldout_accuracy.last().unwrap();
    let chance = 1.0 / cfg.perception.k as f64;
    (
        trained >= 0.9 && (untrained - chance).abs() <= 0.03,
        format!(
            "held-out accuracy {:.1}% (>= 90%); untrained {:.1}% vs chance {:.2}% (±3 points), per init {:.1?}",
            100.0 * trained,
            100.0 * untrained,
            100.0 * chance,
            inits.iter().map(|a| 100.0 * a).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7/8. End-to-end through the command-line pipeline

fn lab(dir: &Path, preset: &str, args: &[&str], threads: Option<usize>) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddn-lab"));
    cmd.args(args).arg("--preset").arg(preset).arg("--dir").arg(dir);
    if let Some(n) = threads {
        cmd.env("DDN_LAB_THREADS", n.to_string());
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        let line = String::from_utf8_lossy(&out.stdout).trim().to_string();
        eprintln!("[acceptance]   {line}");
        Ok(line)
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

const AGENTS: [&str; 5] = ["random", "scripted", "policy", "policy-no-attr", "oracle"];

fn pipeline(dir: &Path, preset: &str, threads: Option<usize>) -> Result<(), String> {
    for stage in ["gen-universe", "gen-scenes", "gen-mappings", "collect-traj", "train-attr"] {
        lab(dir, preset, &[stage], threads)?;
    }
    lab(dir, preset, &["train-policy", "--agent", "policy"], threads)?;
    lab(dir, preset, &["train-policy", "--agent", "policy-no-attr"], threads)?;
    lab(dir, preset, &["train-grounder"], threads)?;
    for a in AGENTS {
        lab(dir, preset, &["eval", "--agent", a], threads)?;
    }
    lab(dir, preset, &["report"], threads)?;
    Ok(())
}

/// `agent -> split -> NSR mean` from the eval sidecars.
fn nsr_table(run: &Path) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for a in AGENTS {
        let p = run.join("results").join(a).join("results.meta.json");
        let Ok(s) = fs::read_to_string(p) else {
            continue;
        };
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        let mut row = BTreeMap::new();
        for sp in v["table"]["splits"].as_array().unwrap() {
            row.insert(sp["split"].as_str().unwrap().to_string(), sp["nsr"]["mean"].as_f64().unwrap());
        }
        out.insert(a.to_string(), row);
    }
    out
}

fn criterion_7(run: &Path) -> (bool, String) {
    if let Err(e) = pipeline(run, "desk", None) {
        return (false, format!("pipeline failed: {e}"));
    }
    let t = nsr_table(run);
    let ss = |a: &str| t.get(a).and_then(|r| r.get("ss")).copied().unwrap_or(f64::NAN);
    let (policy, no_attr, random) = (ss("policy"), ss("policy-no-attr"), ss("random"));
    let oracle_all = t
        .get("oracle")
        .is_some_and(|r| r.len() == 4 && r.values().all(|v| (*v - 100.0).abs() < 1e-9));
    let c1 = policy >= 2.0 * random;
    let c2 = policy >= no_attr;
    let table = fs::read_to_string(run.join("report").join("table.txt")).unwrap_or_default();
    eprintln!("{table}");
    (
        c1 && c2 && oracle_all,
        format!(
            "ss NSR: policy {policy:.1} vs 2x random {:.1} [{}]; policy {policy:.1} vs w/o-attr {no_attr:.1} [{}]; oracle 100 on all splits [{}]",
            2.0 * random,
            if c1 { "ok" } else { "violated" },
            if c2 { "ok" } else { "violated" },
            if oracle_all { "ok" } else { "violated" },
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_8(a: &Path, b: &Path) -> (bool, String) {
    for (dir, threads) in [(a, 1), (b, 2)] {
        if let Err(e) = pipeline(dir, "smoke", Some(threads)) {
            return (false, format!("pipeline failed: {e}"));
        }
    }
    let (fa, fb) = (files_under(a), files_under(b));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    (
        differing.is_empty() && !fa.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs (1 vs 2 evaluation threads)", fa.len())
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

fn main() {
    let quick = std::env::var("DDN_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let strict = std::env::var("DDN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let tmp = tempfile::tempdir().expect("temp dir");
    let desk = tmp.path().join("desk");
    let (sa, sb) = (tmp.path().join("smoke-a"), tmp.path().join("smoke-b"));
    let mut v = vec![
        timed(1, "pair-rule oracle equivalence", criterion_1),
        timed(2, "gradient correctness", criterion_2),
        timed(3, "attribute clustering", criterion_3),
        timed(6, "grounder sanity", criterion_6),
    ];
    let planner = timed(4, "planner optimality (A* vs BFS)", criterion_4a);
    let metrics = timed(5, "metric fidelity (IoU, SPL)", criterion_5a);
    if quick {
        v.push(skipped(7, "end-to-end ordering"));
        v.push(skipped(8, "determinism"));
        v.push(planner);
        v.push(metrics);
    } else {
        v.push(timed(7, "end-to-end ordering (desk)", || criterion_7(&desk)));
        let traj = timed(4, "expert trajectories succeed", || criterion_4b(&desk));
        v.push(Verdict {
            pass: planner.pass && traj.pass,
            detail: format!("{}; {}", planner.detail, traj.detail),
            secs: planner.secs + traj.secs,
            ..planner
        });
        v.push(timed(8, "determinism", || criterion_8(&sa, &sb)));
        let logged = timed(5, "sel => nav on logged episodes", || {
            criterion_5b(&[desk.clone(), sa.clone(), sb.clone()])
        });
        v.push(Verdict {
            pass: metrics.pass && logged.pass,
            detail: format!("{}; {}", metrics.detail, logged.detail),
            secs: metrics.secs + logged.secs,
            ..metrics
        });
    }
    v.sort_by_key(|x| x.id);
    println!();
    for x in &v {
        println!(
            "ACCEPTANCE {} {} — {}: {} [{:.1}s]",
            x.id,
            match (x.skipped, x.pass) {
                (true, _) => "SKIP",
                (_, true) => "PASS",
                _ => "FAIL",
            },
            x.name,
            x.detail,
            x.secs
        );
    }
    let failed = v.iter().filter(|x| !x.pass).count();
    let run = v.iter().filter(|x| !x.skipped).count();
    println!("ACCEPTANCE SUMMARY {}/{run} criteria pass ({} skipped)", run - failed, v.len() - run);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
