//! `ddn-lab` command-line pipeline: each subcommand reads artifacts from a
//! run directory, writes one artifact, and prints a one-line summary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddn_core::agents::{Agent, OracleAgent, PolicyAgent, RandomAgent, ScriptedTargetAgent};
use ddn_core::attribute::{clustering_report, train_attribute, AttributeEncoder, PairUniverse};
use ddn_core::config::{generate_scene_sets, RunConfig};
use ddn_core::demands::{build_lg_mappings, build_wg_mappings, split_demands, MappingsFile, Universe};
use ddn_core::eval::{evaluate, EpisodeLog, EvalEnv, MetricsTable, Split, SplitSets};
use ddn_core::expert::{collect_trajectories, trajectories_from_jsonl, trajectories_to_jsonl, Trajectory};
use ddn_core::grounding::{collect_grounding_data, frames_to_jsonl, train_grounder, GrounderNet};
use ddn_core::policy::{train_log_csv, train_policy, training_data, AttrMode, FeatureBuilder, PolicyNet};
use ddn_core::util::{derive_seed, sha256_hex};
use ddn_core::world::GridScene;
use ddn_core::DdnError;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

pub mod report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Stage tags mixed into the run seed.
mod stage {
    pub const SCENES: u64 = 1;
    pub const MAPPINGS: u64 = 2;
    pub const TRAJECTORIES: u64 = 3;
    pub const ATTRIBUTE: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const GROUNDER: u64 = 6;
    pub const EVAL: u64 = 7;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<DdnError> for CliError {
    fn from(e: DdnError) -> Self {
        match e {
            DdnError::Io(_) | DdnError::DivergenceDetected { .. } | DdnError::NoPath | DdnError::Nn(_) => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("malformed JSON: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ddn-lab", about = "Demand-driven navigation laboratory pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON); defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given: desk, smoke or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Base seed; overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory holding the pipeline's artifacts.
    #[arg(long, default_value = ".")]
    pub dir: PathBuf,
    /// Output path (defaults to the standard name inside the run directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AgentKind {
    Random,
    Scripted,
    Policy,
    PolicyNoAttr,
    Oracle,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Random => "random",
            AgentKind::Scripted => "scripted",
            AgentKind::Policy => "policy",
            AgentKind::PolicyNoAttr => "policy-no-attr",
            AgentKind::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Ss,
    Su,
    Us,
    Uu,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Ss => vec![Split::Ss],
            SplitArg::Su => vec![Split::Su],
            SplitArg::Us => vec![Split::Us],
            SplitArg::Uu => vec![Split::Uu],
            SplitArg::All => Split::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the semantic universe.
    GenUniverse(Common),
    /// Generate seen and unseen scenes.
    GenScenes(Common),
    /// Build WG/LG mappings and the train/test demand split.
    GenMappings(Common),
    /// Collect expert trajectories on seen scenes for training demands.
    CollectTraj(Common),
    /// Train the attribute encoder contrastively.
    TrainAttr(Common),
    /// Train a policy by behavior cloning (`--agent policy` or `policy-no-attr`).
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "policy")]
        agent: AgentKind,
    },
    /// Collect grounding frames and train the grounder.
    TrainGrounder(Common),
    /// Evaluate an agent on the seen/unseen splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        agent: AgentKind,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Merge evaluation results into a comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Result directories (default: every subdirectory of <dir>/results).
        #[arg(long)]
        results: Vec<PathBuf>,
    },
}

/// Provenance embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub universe_hash: Option<String>,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T: Serialize + ?Sized> {
    meta: &'a Meta,
    data: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    meta: Meta,
    data: Box<RawValue>,
}

/// A JSONL file starts with a `{"meta": ...}` header line.
#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    meta: Meta,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub seed: u64,
    pub dir: PathBuf,
    pub out: Option<PathBuf>,
}

impl Ctx {
    fn from_common(c: &Common) -> CliResult<Self> {
        let mut cfg = match &c.config {
            Some(p) => serde_json::from_str(&read(p)?)?,
            None => RunConfig::preset(&c.preset)?,
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(Self {
            seed: cfg.seed,
            cfg,
            dir: c.dir.clone(),
            out: c.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn out_or(&self, name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.path(name))
    }

    fn meta(&self, command: &str, universe_hash: Option<String>) -> Meta {
        Meta {
            command: command.to_string(),
            seed: self.seed,
            config_hash: self.cfg.hash(),
            universe_hash,
            config: self.cfg.clone(),
        }
    }

    fn stage_seed(&self, tag: u64) -> u64 {
        derive_seed(self.seed, &[tag])
    }
}

fn read(p: &Path) -> CliResult<String> {
    fs::read_to_string(p).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", p.display())))
}

fn write(p: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(p, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", p.display())))
}

fn write_json<T: Serialize + ?Sized>(p: &Path, meta: &Meta, data: &T) -> CliResult<()> {
    let s = serde_json::to_string(&EnvelopeOut { meta, data }).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(p, &(s + "\n"))
}

fn read_envelope(p: &Path) -> CliResult<EnvelopeIn> {
    Ok(serde_json::from_str(&read(p)?)?)
}

fn jsonl_with_header(meta: &Meta, body: &str) -> CliResult<String> {
    let h = serde_json::to_string(&JsonlHeader { meta: meta.clone() }).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(format!("{h}\n{body}"))
}

fn split_jsonl(s: &str) -> CliResult<(Meta, &str)> {
    let (head, body) = s.split_once('\n').unwrap_or((s, ""));
    let h: JsonlHeader = serde_json::from_str(head)?;
    Ok((h.meta, body))
}

/// Loaded inputs, with the universe hash they must all agree on.
struct Inputs {
    universe: Universe,
    universe_hash: String,
}

impl Inputs {
    fn load(ctx: &Ctx) -> CliResult<Self> {
        let env = read_envelope(&ctx.path("universe.json"))?;
        let universe_hash = sha256_hex(env.data.get().as_bytes());
        Ok(Self {
            universe: Universe::from_json(env.data.get())?,
            universe_hash,
        })
    }

    fn check(&self, what: &str, meta: &Meta) -> CliResult<()> {
        if meta.universe_hash.as_deref() != Some(self.universe_hash.as_str()) {
            return Err(CliError::Validation(format!(
                "{what} was built from a different universe"
            )));
        }
        Ok(())
    }

    fn scenes(&self, ctx: &Ctx) -> CliResult<(Vec<GridScene>, Vec<GridScene>)> {
        let env = read_envelope(&ctx.path("scenes.json"))?;
        self.check("scenes.json", &env.meta)?;
        let sets: ScenesIn = serde_json::from_str(env.data.get())?;
        let parse = |v: &[Box<RawValue>]| -> CliResult<Vec<GridScene>> {
            v.iter().map(|r| Ok(GridScene::from_json(r.get())?)).collect()
        };
        Ok((parse(&sets.seen)?, parse(&sets.unseen)?))
    }

    fn mappings(&self, ctx: &Ctx) -> CliResult<MappingsFile> {
        let env = read_envelope(&ctx.path("mappings.json"))?;
        self.check("mappings.json", &env.meta)?;
        Ok(serde_json::from_str(env.data.get())?)
    }

    fn trajectories(&self, ctx: &Ctx) -> CliResult<Vec<Trajectory>> {
        let s = read(&ctx.path("trajectories.jsonl"))?;
        let (meta, body) = split_jsonl(&s)?;
        self.check("trajectories.jsonl", &meta)?;
        Ok(trajectories_from_jsonl(body)?)
    }

    fn attribute(&self, ctx: &Ctx) -> CliResult<AttributeEncoder> {
        let env = read_envelope(&ctx.path("attr.json"))?;
        self.check("attr.json", &env.meta)?;
        Ok(AttributeEncoder::from_checkpoint_json(env.data.get())?)
    }

    fn policy(&self, ctx: &Ctx, name: &str) -> CliResult<PolicyNet> {
        let env = read_envelope(&ctx.path(name))?;
        self.check(name, &env.meta)?;
        Ok(PolicyNet::from_checkpoint_json(env.data.get())?)
    }

    fn grounder(&self, ctx: &Ctx) -> CliResult<GrounderNet> {
        let env = read_envelope(&ctx.path("grounder.json"))?;
        self.check("grounder.json", &env.meta)?;
        Ok(GrounderNet::from_checkpoint_json(env.data.get())?)
    }
}

#[derive(Serialize)]
struct ScenesOut {
    seen: Vec<Box<RawValue>>,
    unseen: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
struct ScenesIn {
    seen: Vec<Box<RawValue>>,
    unseen: Vec<Box<RawValue>>,
}

fn raw(s: String) -> Box<RawValue> {
    RawValue::from_string(s).expect("serializer emits valid JSON")
}

fn gen_universe(ctx: &Ctx) -> CliResult<String> {
    let u = Universe::generate(&ctx.cfg.universe, ctx.seed)?;
    let data = u.to_json();
    let hash = sha256_hex(data.as_bytes());
    let out = ctx.out_or("universe.json");
    write_json(&out, &ctx.meta("gen-universe", Some(hash.clone())), &raw(data))?;
    Ok(format!(
        "universe: {} demands, {} categories, hash {} -> {}",
        u.demands.len(),
        u.categories.len(),
        &hash[..12],
        out.display()
    ))
}

fn gen_scenes(ctx: &Ctx) -> CliResult<String> {
    let inp = Inputs::load(ctx)?;
    let c = &ctx.cfg;
    let (seen, unseen) = generate_scene_sets(
        &inp.universe,
        &c.scenes,
        c.n_seen_scenes,
        c.n_unseen_scenes,
        ctx.stage_seed(stage::SCENES),
    )?;
    let data = ScenesOut {
        seen: seen.iter().map(|s| raw(s.to_json())).collect(),
        unseen: unseen.iter().map(|s| raw(s.to_json())).collect(),
    };
    let out = ctx.out_or("scenes.json");
    write_json(&out, &ctx.meta("gen-scenes", Some(inp.universe_hash)), &data)?;
    Ok(format!("scenes: {} seen, {} unseen -> {}", seen.len(), unseen.len(), out.display()))
}

fn gen_mappings(ctx: &Ctx) -> CliResult<String> {
    let inp = Inputs::load(ctx)?;
    let u = &inp.universe;
    let c = &ctx.cfg;
    let seed = ctx.stage_seed(stage::MAPPINGS);
    let pool: BTreeSet<_> = u.scene_pool().into_iter().collect();
    let file = MappingsFile {
        wg: build_wg_mappings(u, &pool),
        lg: build_lg_mappings(u, c.n_lg, derive_seed(seed, &[1])),
        split: split_demands(u, c.n_train_demands, c.n_test_demands, derive_seed(seed, &[2]))?,
    };
    let out = ctx.out_or("mappings.json");
    write_json(&out, &ctx.meta("gen-mappings", Some(inp.universe_hash)), &file)?;
    Ok(format!(
        "mappings: {} WG, {} LG, split {}/{} -> {}",
        file.wg.len(),
        file.lg.len(),
        file.split.train.len(),
        file.split.test.len(),
        out.display()
    ))
}

fn collect_traj(ctx: &Ctx) -> CliResult<String> {
    let inp = Inputs::load(ctx)?;
    let (seen, _) = inp.scenes(ctx)?;
    let m = inp.mappings(ctx)?;
    let c = &ctx.cfg;
    let (trajs, stats) = collect_trajectories(
        &seen,
        &m.wg.restrict(&m.split.train),
        &inp.universe,
        c.trajectories_per_demand,
        &c.perception,
        &c.thresholds,
        ctx.stage_seed(stage::TRAJECTORIES),
    )?;
    let out = ctx.out_or("trajectories.jsonl");
    let meta = ctx.meta("collect-traj", Some(inp.universe_hash));
    write(&out, &jsonl_with_header(&meta, &trajectories_to_jsonl(&trajs))?)?;
    Ok(format!(
        "trajectories: {} (mean length {:.2}, skipped {}) -> {}",
        stats.trajectories,
        stats.mean_length,
        stats.skipped_no_path,
        out.display()
    ))
}

fn train_attr(ctx: &Ctx) -> CliResult<String> {
    let inp = Inputs::load(ctx)?;
    let m = inp.mappings(ctx)?;
    let c = &ctx.cfg;
    let seed = ctx.stage_seed(stage::ATTRIBUTE);
    let pu = PairUniverse::from_lg(&inp.universe, &m.lg.restrict(&m.split.train))?;
    let mut enc = AttributeEncoder::new(&c.attribute, derive_seed(seed, &[1]));
    let before = clustering_report(|f| enc.encode_batch(f), &pu, 0, seed)?;
    let mut tc = c.attribute_train.clone();
    tc.seed = derive_seed(seed, &[2]);
    let losses = train_attribute(&mut enc, &pu, &tc)?;
    enc.params.round_to_f32();
    let after = clustering_report(|f| enc.encode_batch(f), &pu, 0, seed)?;
    let out = ctx.out_or("attr.json");
    let meta = ctx.meta("train-attr", Some(inp.universe_hash));
    write_json(&out, &meta, &raw(enc.to_checkpoint_json()))?;
    let mut log = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{i},{l:.6}\n"));
    }
    write(&out.with_extension("log.csv"), &log)?;
    write_json(
        &out.with_extension("report.json"),
        &meta,
        &serde_json::json!({"untrained": before, "trained": after}),
    )?;
    Ok(format!(
        "attribute encoder: gap {:.3} -> {:.3} after {} steps -> {}",
        before.gap,
        after.gap,
        losses.len(),
        out.display()
    ))
}

fn policy_file(kind: AgentKind) -> CliResult<&'static str> {
    match kind {
        AgentKind::Policy => Ok("policy.json"),
        AgentKind::PolicyNoAttr => Ok("policy-no-attr.json"),
        other => Err(CliError::Validation(format!("agent {} is not trainable", other.name()))),
    }
}

fn train_policy_cmd(ctx: &Ctx, kind: AgentKind) -> CliResult<String> {
    let file = policy_file(kind)?;
    let inp = Inputs::load(ctx)?;
    let trajs = inp.trajectories(ctx)?;
    let c = &ctx.cfg;
    let (mode, enc) = if kind == AgentKind::Policy {
        (AttrMode::Pretrained, Some(inp.attribute(ctx)?))
    } else {
        (AttrMode::Joint, None)
    };
    let seed = ctx.stage_seed(stage::POLICY);
    let builder = FeatureBuilder {
        mode,
        encoder: enc.as_ref(),
    };
    let data = training_data(&trajs, &inp.universe, &builder)?;
    let mut net = PolicyNet::new(&c.policy, &c.attribute, mode, derive_seed(seed, &[1]));
    let mut tc = c.policy_train.clone();
    tc.seed = derive_seed(seed, &[2]);
    let log = train_policy(&mut net, &data, &tc)?;
    net.params.round_to_f32();
    let out = ctx.out_or(file);
    write_json(&out, &ctx.meta("train-policy", Some(inp.universe_hash)), &raw(net.to_checkpoint_json()))?;
    write(&out.with_extension("log.csv"), &train_log_csv(&log))?;
    let acc = log.iter().rev().find_map(|r| r.heldout_accuracy).unwrap_or(f64::NAN);
    Ok(format!(
        "{}: {} trajectories, held-out action accuracy {:.3} -> {}",
        kind.name(),
        trajs.len(),
        acc,
        out.display()
    ))
}

fn train_grounder_cmd(ctx: &Ctx) -> CliResult<String> {
    let inp = Inputs::load(ctx)?;
    let (seen, _) = inp.scenes(ctx)?;
    let m = inp.mappings(ctx)?;
    let c = &ctx.cfg;
    let seed = ctx.stage_seed(stage::GROUNDER);
    let frames = collect_grounding_data(
        &seen,
        &m.wg.restrict(&m.split.train),
        &inp.universe,
        c.grounding_frames_per_scene,
        &c.perception,
        &c.thresholds,
        derive_seed(seed, &[1]),
    )?;
    let mut net = GrounderNet::new(&c.grounder, derive_seed(seed, &[2]));
    let mut tc = c.grounder_train.clone();
    tc.seed = derive_seed(seed, &[3]);
    let hist = train_grounder(&mut net, &frames, &inp.universe, &tc)?;
    net.params.round_to_f32();
    let out = ctx.out_or("grounder.json");
    let meta = ctx.meta("train-grounder", Some(inp.universe_hash));
    write_json(&out, &meta, &raw(net.to_checkpoint_json()))?;
    write(&out.with_file_name("grounding.jsonl"), &jsonl_with_header(&meta, &frames_to_jsonl(&frames))?)?;
    write_json(&out.with_extension("history.json"), &meta, &hist)?;
    Ok(format!(
        "grounder: {} frames, held-out accuracy {:.3} -> {:.3} -> {}",
        frames.len(),
        hist.heldout_accuracy.first().copied().unwrap_or(0.0),
        hist.heldout_accuracy.last().copied().unwrap_or(0.0),
        out.display()
    ))
}

/// Sidecar for `results.csv`, which has a fixed column layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMeta {
    pub meta: Meta,
    pub table: MetricsTable,
}

fn eval_cmd(ctx: &Ctx, kind: AgentKind, split: SplitArg) -> CliResult<String> {
    let inp = Inputs::load(ctx)?;
    let (seen, unseen) = inp.scenes(ctx)?;
    let m = inp.mappings(ctx)?;
    let grounder = inp.grounder(ctx)?;
    let c = &ctx.cfg;
    let u = &inp.universe;
    let (random, oracle) = (
        RandomAgent::default(),
        OracleAgent {
            thresholds: c.thresholds.clone(),
        },
    );
    let scripted;
    let (net, enc);
    let agent_box: Box<dyn Agent + '_>;
    let agent: &dyn Agent = match kind {
        AgentKind::Random => &random,
        AgentKind::Oracle => &oracle,
        AgentKind::Scripted => {
            scripted = ScriptedTargetAgent::new(u, &m.lg)?;
            &scripted
        }
        AgentKind::Policy | AgentKind::PolicyNoAttr => {
            net = inp.policy(ctx, policy_file(kind)?)?;
            enc = if kind == AgentKind::Policy {
                Some(inp.attribute(ctx)?)
            } else {
                None
            };
            agent_box = Box::new(PolicyAgent {
                name: kind.name().to_string(),
                net: &net,
                encoder: enc.as_ref(),
            });
            agent_box.as_ref()
        }
    };
    let env = EvalEnv {
        universe: u,
        perception: &c.perception,
        thresholds: &c.thresholds,
    };
    let sets = SplitSets {
        seen_scenes: &seen,
        unseen_scenes: &unseen,
        demands: &m.split,
        wg: &m.wg,
    };
    let base = ctx.stage_seed(stage::EVAL);
    let seeds: Vec<u64> = c.eval.seeds.iter().map(|s| derive_seed(base, &[*s])).collect();
    let (mut table, logs) = evaluate(agent, &grounder, &sets, &env, &split.splits(), c.eval.episodes_per_split, &seeds)?;
    table.agent = kind.name().to_string();
    let out_dir = ctx.out.clone().unwrap_or_else(|| ctx.path("results").join(kind.name()));
    let meta = ctx.meta("eval", Some(inp.universe_hash));
    write(&out_dir.join("results.csv"), &table.to_csv())?;
    write(
        &out_dir.join("results.meta.json"),
        &(serde_json::to_string(&ResultsMeta {
            meta: meta.clone(),
            table: table.clone(),
        })? + "\n"),
    )?;
    write(&out_dir.join("episodes.jsonl"), &jsonl_with_header(&meta, &episodes_jsonl(&logs)?)?)?;
    let summary: Vec<String> = table
        .splits
        .iter()
        .map(|s| format!("{} NSR {:.1}", s.split, s.nsr.mean))
        .collect();
    Ok(format!("eval {}: {} -> {}", kind.name(), summary.join(", "), out_dir.display()))
}

fn episodes_jsonl(logs: &[EpisodeLog]) -> CliResult<String> {
    let mut s = String::new();
    for l in logs {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    Ok(s)
}

fn report_cmd(ctx: &Ctx, results: &[PathBuf]) -> CliResult<String> {
    let dirs: Vec<PathBuf> = if results.is_empty() {
        let root = ctx.path("results");
        let mut v: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|_| CliError::Validation(format!("missing results: no directory {}", root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("results.csv").is_file())
            .collect();
        v.sort();
        v
    } else {
        results.to_vec()
    };
    let mut tables = Vec::new();
    for d in &dirs {
        if !d.join("results.csv").is_file() {
            return Err(DdnError::MissingResults(d.display().to_string()).into());
        }
        let rm: ResultsMeta = serde_json::from_str(&read(&d.join("results.meta.json"))?)?;
        tables.push(rm);
    }
    if tables.is_empty() {
        return Err(DdnError::MissingResults("no results.csv found".into()).into());
    }
    let hash = tables[0].meta.universe_hash.clone();
    if tables.iter().any(|t| t.meta.universe_hash != hash) {
        return Err(CliError::Validation("results come from different universes".into()));
    }
    let mut ts: Vec<MetricsTable> = tables.into_iter().map(|t| t.table).collect();
    ts.sort_by(|a, b| a.agent.cmp(&b.agent));
    let out_dir = ctx.out.clone().unwrap_or_else(|| ctx.path("report"));
    write(&out_dir.join("table.csv"), &report::table_csv(&ts))?;
    write(&out_dir.join("table.txt"), &report::table_text(&ts))?;
    Ok(format!("report: {} agents -> {}", ts.len(), out_dir.display()))
}

pub fn dispatch(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenUniverse(c) => gen_universe(&Ctx::from_common(c)?),
        Command::GenScenes(c) => gen_scenes(&Ctx::from_common(c)?),
        Command::GenMappings(c) => gen_mappings(&Ctx::from_common(c)?),
        Command::CollectTraj(c) => collect_traj(&Ctx::from_common(c)?),
        Command::TrainAttr(c) => train_attr(&Ctx::from_common(c)?),
        Command::TrainPolicy { common, agent } => train_policy_cmd(&Ctx::from_common(common)?, *agent),
        Command::TrainGrounder(c) => train_grounder_cmd(&Ctx::from_common(c)?),
        Command::Eval { common, agent, split } => eval_cmd(&Ctx::from_common(common)?, *agent, *split),
        Command::Report { common, results } => report_cmd(&Ctx::from_common(common)?, results),
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
