//! Demand-conditioned attribute features and their contrastive training.

use ddn_nn::layers::{FeedForward, LayerNorm, Linear};
use ddn_nn::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::demands::{LgMappings, Universe};
use crate::error::{DdnError, Result};
use crate::ids::{CategoryId, DemandId};
use crate::util::{cosine, derive_seed, smooth};

/// Concatenated demand ‖ object embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandObjectFeature(pub Vec<f64>);

pub fn build_do_feature(
    demand_emb: &[f64],
    obj_emb: &[f64],
    demand_dim: usize,
    object_dim: usize,
) -> Result<DemandObjectFeature> {
    if demand_emb.len() != demand_dim {
        return Err(DdnError::DimMismatch {
            expected: demand_dim,
            got: demand_emb.len(),
        });
    }
    if obj_emb.len() != object_dim {
        return Err(DdnError::DimMismatch {
            expected: object_dim,
            got: obj_emb.len(),
        });
    }
    let mut v = Vec::with_capacity(demand_dim + object_dim);
    v.extend_from_slice(demand_emb);
    v.extend_from_slice(obj_emb);
    Ok(DemandObjectFeature(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub demand_dim: usize,
    pub object_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub ff_hidden: usize,
    pub out_dim: usize,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            demand_dim: 32,
            object_dim: 16,
            hidden: 64,
            depth: 2,
            ff_hidden: 64,
            out_dim: 32,
        }
    }
}

impl AttributeConfig {
    pub fn in_dim(&self) -> usize {
        self.demand_dim + self.object_dim
    }
}

/// Residual MLP with layer norm: `in → hidden → [LN → FF → +]×depth → LN → out → L2`.
///
/// Holds only parameter handles, so it can live inside a larger network's
/// parameter set (the jointly trained ablation arm does this).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeLayout {
    pub input: Linear,
    pub blocks: Vec<(LayerNorm, FeedForward)>,
    pub final_ln: LayerNorm,
    pub output: Linear,
}

impl AttributeLayout {
    pub fn new(ps: &mut ParamSet, prefix: &str, cfg: &AttributeConfig, rng: &mut impl Rng) -> Self {
        let input = Linear::new(ps, &format!("{prefix}.in"), cfg.in_dim(), cfg.hidden, rng);
        let blocks = (0..cfg.depth)
            .map(|i| {
                (
                    LayerNorm::new(ps, &format!("{prefix}.block{i}.ln"), cfg.hidden),
                    FeedForward::new(ps, &format!("{prefix}.block{i}.ff"), cfg.hidden, cfg.ff_hidden, rng),
                )
            })
            .collect();
        let final_ln = LayerNorm::new(ps, &format!("{prefix}.ln_out"), cfg.hidden);
        let output = Linear::new(ps, &format!("{prefix}.out"), cfg.hidden, cfg.out_dim, rng);
        Self {
            input,
            blocks,
            final_ln,
            output,
        }
    }

    /// Rows of demand-object features → rows before normalization.
    pub fn forward_raw(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = self.input.forward(g, x);
        for (ln, ff) in &self.blocks {
            let n = ln.forward(g, h);
            let f = ff.forward(g, n);
            h = g.add(h, f);
        }
        let h = self.final_ln.forward(g, h);
        self.output.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let raw = self.forward_raw(g, x);
        g.l2_normalize_rows(raw)
    }
}

#[derive(Debug, Clone)]
pub struct AttributeEncoder {
    pub config: AttributeConfig,
    pub layout: AttributeLayout,
    pub params: ParamSet,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    config: &'a AttributeConfig,
    params: Box<RawValue>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    config: AttributeConfig,
    params: Box<RawValue>,
}

impl AttributeEncoder {
    pub fn new(config: &AttributeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layout = AttributeLayout::new(&mut params, "attr", config, &mut rng);
        Self {
            config: config.clone(),
            layout,
            params,
        }
    }

    fn check_dim(&self, f: &DemandObjectFeature) -> Result<()> {
        if f.0.len() != self.config.in_dim() {
            return Err(DdnError::DimMismatch {
                expected: self.config.in_dim(),
                got: f.0.len(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, f: &DemandObjectFeature) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(f))?.remove(0))
    }

    pub fn encode_batch(&self, fs: &[DemandObjectFeature]) -> Result<Vec<Vec<f64>>> {
        if fs.is_empty() {
            return Ok(Vec::new());
        }
        for f in fs {
            self.check_dim(f)?;
        }
        let rows: Vec<Vec<f64>> = fs.iter().map(|f| f.0.clone()).collect();
        let mut g = Graph::new(&self.params);
        let x = g.constant(Tensor::from_rows(&rows));
        let y = self.layout.forward(&mut g, x);
        let out = g.value(y);
        Ok((0..out.rows).map(|r| out.row_slice(r).to_vec()).collect())
    }

    pub fn to_checkpoint_json(&self) -> String {
        let params = RawValue::from_string(self.params.to_checkpoint_json())
            .expect("checkpoint is valid JSON");
        serde_json::to_string(&CheckpointOut {
            config: &self.config,
            params,
        })
        .expect("checkpoint serialization")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let ck: CheckpointIn = serde_json::from_str(s)?;
        let loaded = ParamSet::from_checkpoint_json(ck.params.get())?;
        let mut enc = Self::new(&ck.config, 0);
        enc.params.load_from(&loaded)?;
        Ok(enc)
    }
}

// ---------------------------------------------------------------------------
// Pair construction

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NegType {
    /// Same demand, object that does not satisfy it.
    SameDemand = 1,
    /// Same object, a demand it does not satisfy.
    SameObject = 2,
    /// Different demand and different object.
    Different = 3,
}

impl NegType {
    pub const ALL: [NegType; 3] = [NegType::SameDemand, NegType::SameObject, NegType::Different];

    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Positive,
    Negative(NegType),
}

/// A demand-object combination, as indices into a [`PairUniverse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRef {
    pub demand: usize,
    pub object: usize,
}

/// Demands, the object vocabulary and the satisfaction table pairs are drawn from.
#[derive(Debug, Clone)]
pub struct PairUniverse {
    pub demand_ids: Vec<DemandId>,
    pub object_ids: Vec<CategoryId>,
    pub demand_emb: Vec<Vec<f64>>,
    pub object_emb: Vec<Vec<f64>>,
    sat: Vec<Vec<bool>>,
    /// Per demand, the vocabulary objects satisfying / not satisfying it.
    satisfiers: Vec<Vec<usize>>,
    non_satisfiers: Vec<Vec<usize>>,
    /// Per object, demands it does not satisfy.
    unsatisfied: Vec<Vec<usize>>,
    anchors: Vec<PairRef>,
}

impl PairUniverse {
    /// Build from a satisfaction table; embeddings may be empty for pure
    /// label tests.
    pub fn from_table(
        demand_ids: Vec<DemandId>,
        object_ids: Vec<CategoryId>,
        demand_emb: Vec<Vec<f64>>,
        object_emb: Vec<Vec<f64>>,
        sat: Vec<Vec<bool>>,
    ) -> Self {
        let nd = demand_ids.len();
        let no = object_ids.len();
        let satisfiers: Vec<Vec<usize>> =
            (0..nd).map(|d| (0..no).filter(|&o| sat[d][o]).collect()).collect();
        let non_satisfiers: Vec<Vec<usize>> =
            (0..nd).map(|d| (0..no).filter(|&o| !sat[d][o]).collect()).collect();
        let unsatisfied: Vec<Vec<usize>> =
            (0..no).map(|o| (0..nd).filter(|&d| !sat[d][o]).collect()).collect();
        let anchors = (0..nd)
            .filter(|&d| satisfiers[d].len() >= 2)
            .flat_map(|d| satisfiers[d].iter().map(move |&o| PairRef { demand: d, object: o }))
            .collect();
        Self {
            demand_ids,
            object_ids,
            demand_emb,
            object_emb,
            sat,
            satisfiers,
            non_satisfiers,
            unsatisfied,
            anchors,
        }
    }

    /// Demands of `lg` with the union of their LG objects as vocabulary;
    /// satisfaction comes from the universe's discriminator so that an LG
    /// object of another demand is never mislabeled as a non-satisfier.
    pub fn from_lg(u: &Universe, lg: &LgMappings) -> Result<Self> {
        let demand_ids: Vec<DemandId> = lg.0.keys().copied().collect();
        if demand_ids.len() < 2 {
            return Err(DdnError::Invalid("pair construction needs at least 2 demands".into()));
        }
        let mut object_ids: Vec<CategoryId> = lg.0.values().flatten().copied().collect();
        object_ids.sort();
        object_ids.dedup();
        let mut sat = Vec::with_capacity(demand_ids.len());
        let mut demand_emb = Vec::with_capacity(demand_ids.len());
        for &d in &demand_ids {
            if lg.0[&d].len() < 2 {
                return Err(DdnError::Invalid(format!("demand {d} has fewer than 2 LG objects")));
            }
            demand_emb.push(u.embed_demand(d)?.to_vec());
            sat.push(
                object_ids
                    .iter()
                    .map(|&o| u.satisfies(d, o))
                    .collect::<Result<Vec<bool>>>()?,
            );
        }
        let object_emb = object_ids
            .iter()
            .map(|&o| u.embed_category_text(o).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_table(demand_ids, object_ids, demand_emb, object_emb, sat))
    }

    pub fn n_demands(&self) -> usize {
        self.demand_ids.len()
    }

    pub fn n_objects(&self) -> usize {
        self.object_ids.len()
    }

    pub fn sat(&self, p: PairRef) -> bool {
        self.sat[p.demand][p.object]
    }

    /// Satisfying pairs that have at least one positive partner.
    pub fn anchors(&self) -> &[PairRef] {
        &self.anchors
    }

    pub fn feature(&self, p: PairRef) -> DemandObjectFeature {
        let mut v = self.demand_emb[p.demand].clone();
        v.extend_from_slice(&self.object_emb[p.object]);
        DemandObjectFeature(v)
    }

    /// Label of `cand` relative to `anchor`; `None` when the pair is neither
    /// positive nor one of the three negative kinds (or the anchor itself
    /// does not satisfy its demand).
    pub fn classify(&self, anchor: PairRef, cand: PairRef) -> Option<PairLabel> {
        if !self.sat(anchor) || cand == anchor {
            return None;
        }
        let (d, o) = (anchor.demand, anchor.object);
        if cand.demand == d {
            return Some(if self.sat(cand) {
                PairLabel::Positive
            } else {
                PairLabel::Negative(NegType::SameDemand)
            });
        }
        if cand.object == o {
            return (!self.sat(cand)).then_some(PairLabel::Negative(NegType::SameObject));
        }
        // a pair whose object satisfies both its own demand and the anchor's
        // demand shares the anchor's attribute and is not used as a negative
        let shared = self.sat(cand) && self.sat[d][cand.object];
        (!shared).then_some(PairLabel::Negative(NegType::Different))
    }

    /// Every labeled candidate for an anchor, in (demand, object) order.
    pub fn enumerate_candidates(&self, anchor: PairRef) -> Vec<(PairRef, PairLabel)> {
        let mut out = Vec::new();
        for demand in 0..self.n_demands() {
            for object in 0..self.n_objects() {
                let c = PairRef { demand, object };
                if let Some(l) = self.classify(anchor, c) {
                    out.push((c, l));
                }
            }
        }
        out
    }

    fn has_type(&self, a: PairRef, t: NegType) -> bool {
        match t {
            NegType::SameDemand => !self.non_satisfiers[a.demand].is_empty(),
            NegType::SameObject => !self.unsatisfied[a.object].is_empty(),
            NegType::Different => (0..self.n_demands()).filter(|&d| d != a.demand).any(|d| {
                (0..self.n_objects()).any(|o| {
                    o != a.object && !(self.sat[d][o] && self.sat[a.demand][o])
                })
            }),
        }
    }

    fn sample_type(&self, a: PairRef, t: NegType, rng: &mut impl Rng) -> PairRef {
        match t {
            NegType::SameDemand => {
                let s = &self.non_satisfiers[a.demand];
                PairRef {
                    demand: a.demand,
                    object: s[rng.random_range(0..s.len())],
                }
            }
            NegType::SameObject => {
                let s = &self.unsatisfied[a.object];
                PairRef {
                    demand: s[rng.random_range(0..s.len())],
                    object: a.object,
                }
            }
            NegType::Different => loop {
                // rejection from the uniform product is uniform on the set
                let c = PairRef {
                    demand: rng.random_range(0..self.n_demands()),
                    object: rng.random_range(0..self.n_objects()),
                };
                if c.demand != a.demand
                    && c.object != a.object
                    && self.classify(a, c) == Some(PairLabel::Negative(NegType::Different))
                {
                    break c;
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub batch_size: usize,
    pub negatives: usize,
    pub types: Vec<NegType>,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            batch_size: 64,
            negatives: 15,
            types: NegType::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub anchor: PairRef,
    pub positive: PairRef,
    pub negatives: Vec<(PairRef, NegType)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub samples: Vec<PairSample>,
}

/// Validates that every requested negative type exists somewhere; returns
/// the anchors usable under `spec` with their available types.
fn usable_anchors(pu: &PairUniverse, spec: &PairSpec) -> Result<Vec<(PairRef, Vec<NegType>)>> {
    if pu.n_demands() < 2 {
        return Err(DdnError::Invalid("pair construction needs at least 2 demands".into()));
    }
    if spec.negatives == 0 || spec.types.is_empty() {
        return Err(DdnError::Invalid("at least one negative is required".into()));
    }
    let mut seen = vec![false; 3];
    let mut out = Vec::new();
    for &a in pu.anchors() {
        let types: Vec<NegType> = spec
            .types
            .iter()
            .copied()
            .filter(|&t| pu.has_type(a, t))
            .collect();
        for t in &types {
            seen[t.number() as usize - 1] = true;
        }
        if !types.is_empty() {
            out.push((a, types));
        }
    }
    for t in &spec.types {
        if !seen[t.number() as usize - 1] {
            return Err(DdnError::InsufficientNegatives(t.number()));
        }
    }
    Ok(out)
}

/// Pair sampler with the per-anchor type availability precomputed.
pub struct PairSampler<'a> {
    pu: &'a PairUniverse,
    spec: PairSpec,
    anchors: Vec<(PairRef, Vec<NegType>)>,
}

impl<'a> PairSampler<'a> {
    pub fn new(pu: &'a PairUniverse, spec: &PairSpec) -> Result<Self> {
        let anchors = usable_anchors(pu, spec)?;
        Ok(Self {
            pu,
            spec: spec.clone(),
            anchors,
        })
    }

    /// Anchors uniformly at random; one positive; each negative picks a type
    /// uniformly among those available for the anchor, then a member uniformly.
    pub fn sample(&self, rng: &mut impl Rng) -> PairBatch {
        let pu = self.pu;
        let samples = (0..self.spec.batch_size)
            .map(|_| {
                let (a, types) = &self.anchors[rng.random_range(0..self.anchors.len())];
                let sats = &pu.satisfiers[a.demand];
                let positive = loop {
                    let o = sats[rng.random_range(0..sats.len())];
                    if o != a.object {
                        break PairRef {
                            demand: a.demand,
                            object: o,
                        };
                    }
                };
                let negatives = (0..self.spec.negatives)
                    .map(|_| {
                        let t = types[rng.random_range(0..types.len())];
                        (pu.sample_type(*a, t, rng), t)
                    })
                    .collect();
                PairSample {
                    anchor: *a,
                    positive,
                    negatives,
                }
            })
            .collect();
        PairBatch { samples }
    }
}

pub fn construct_pairs(pu: &PairUniverse, spec: &PairSpec, rng: &mut impl Rng) -> Result<PairBatch> {
    Ok(PairSampler::new(pu, spec)?.sample(rng))
}

// ---------------------------------------------------------------------------
// InfoNCE

/// InfoNCE from precomputed similarities.
pub fn info_nce_from_similarities(s_ap: f64, s_an: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(DdnError::InvalidTemperature(tau));
    }
    if s_an.is_empty() {
        return Err(DdnError::Invalid("InfoNCE needs at least one negative".into()));
    }
    let mut logits = vec![s_ap / tau];
    logits.extend(s_an.iter().map(|s| s / tau));
    Ok(ddn_nn::graph::log_sum_exp(&logits) - logits[0])
}

/// Mean InfoNCE over groups of `group` consecutive rows of unit-norm
/// features `z`, each laid out as `[anchor, positive, negatives…]`.
pub fn info_nce_graph(g: &mut Graph, z: Var, group: usize, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(DdnError::InvalidTemperature(tau));
    }
    if group < 3 {
        return Err(DdnError::Invalid("InfoNCE needs at least one negative".into()));
    }
    let (rows, _) = g.shape(z);
    let n = rows / group;
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let a = g.slice_rows(z, i * group, 1);
        let c = g.slice_rows(z, i * group + 1, group - 1);
        let s = g.matmul_bt(a, c);
        logits.push(g.scale(s, 1.0 / tau));
    }
    let all = g.concat_rows(&logits);
    Ok(g.cross_entropy(all, &vec![0; n]))
}

/// Stacks a batch as `[a, p, n_1..n_m]` per sample.
pub fn batch_matrix(pu: &PairUniverse, batch: &PairBatch) -> Tensor {
    let mut rows = Vec::new();
    for s in &batch.samples {
        rows.push(pu.feature(s.anchor).0);
        rows.push(pu.feature(s.positive).0);
        rows.extend(s.negatives.iter().map(|(p, _)| pu.feature(*p).0));
    }
    Tensor::from_rows(&rows)
}

/// Loss of one batch through an encoder layout, as a graph node.
pub fn batch_loss(
    g: &mut Graph,
    layout: &AttributeLayout,
    x: &Tensor,
    group: usize,
    tau: f64,
) -> Result<Var> {
    let xv = g.constant(x.clone());
    let z = layout.forward(g, xv);
    info_nce_graph(g, z, group, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub tau: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for AttributeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            negatives: 15,
            tau: 0.1,
            lr: 1e-3,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

/// Trains in place and returns the per-step loss history.
pub fn train_attribute(
    enc: &mut AttributeEncoder,
    pu: &PairUniverse,
    cfg: &AttributeTrainConfig,
) -> Result<Vec<f64>> {
    if !(cfg.tau > 0.0) {
        return Err(DdnError::InvalidTemperature(cfg.tau));
    }
    let spec = PairSpec {
        batch_size: cfg.batch_size,
        negatives: cfg.negatives,
        types: NegType::ALL.to_vec(),
    };
    let sampler = PairSampler::new(pu, &spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xa77]));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &enc.params,
    );
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.sample(&mut rng);
        let x = batch_matrix(pu, &batch);
        let (loss, mut grads) = {
            let mut g = Graph::new(&enc.params);
            let l = batch_loss(&mut g, &enc.layout, &x, cfg.negatives + 2, cfg.tau)?;
            (g.value(l).item(), g.backward(l))
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(DdnError::DivergenceDetected { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            grads.clip_global_norm(cfg.grad_clip);
        }
        adam.step(&mut enc.params, &grads);
        history.push(loss);
    }
    Ok(history)
}

/// Smoothed first vs last loss, the trend check used after training.
pub fn loss_trend(history: &[f64], window: usize) -> Option<(f64, f64)> {
    let s = smooth(history, window);
    let w = window.min(history.len());
    if w == 0 {
        return None;
    }
    Some((s[w - 1], *s.last()?))
}

// ---------------------------------------------------------------------------
// Clustering diagnostics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCluster {
    pub demand: DemandId,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub n_satisfiers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub demand: DemandId,
    pub object: CategoryId,
    pub satisfies: bool,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    /// Mean cosine over positive pairs (same demand, both objects satisfy it).
    pub intra_mean: f64,
    /// Mean cosine over same-demand satisfier/non-satisfier pairs.
    pub inter_mean: f64,
    pub gap: f64,
    /// Mean cosine per negative type (1, 2, 3).
    pub inter_by_type: [f64; 3],
    pub per_demand: Vec<DemandCluster>,
    pub pca: Vec<PcaPoint>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Two leading principal components of the rows.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    if rows.is_empty() {
        return Vec::new();
    }
    let n = rows.len();
    let d = rows[0].len();
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let means: Vec<f64> = (0..d).map(|j| m.column(j).mean()).collect();
    for j in 0..d {
        for i in 0..n {
            m[(i, j)] -= means[j];
        }
    }
    let cov = m.transpose() * &m / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let comps: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // fix the sign so exports are stable
            if v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc }) < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    (0..n)
        .map(|i| {
            let r = m.row(i);
            let p = |c: &Vec<f64>| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), comps.get(1).map_or(0.0, p)]
        })
        .collect()
}

/// Quantifies how well attribute features of co-satisfying objects cluster.
pub fn clustering_report(
    encode: impl Fn(&[DemandObjectFeature]) -> Result<Vec<Vec<f64>>>,
    pu: &PairUniverse,
    pca_demands: usize,
    seed: u64,
) -> Result<ClusteringReport> {
    if pu.n_demands() < 2 {
        return Err(DdnError::Invalid("clustering needs at least 2 demands".into()));
    }
    let (nd, no) = (pu.n_demands(), pu.n_objects());
    let mut feats = Vec::with_capacity(nd * no);
    for demand in 0..nd {
        for object in 0..no {
            feats.push(pu.feature(PairRef { demand, object }));
        }
    }
    let z = encode(&feats)?;
    let at = |d: usize, o: usize| &z[d * no + o];

    let mut intra_all = Vec::new();
    let mut inter_all = Vec::new();
    let mut per_demand = Vec::new();
    for d in 0..nd {
        let sats = &pu.satisfiers[d];
        let non = &pu.non_satisfiers[d];
        let mut intra = Vec::new();
        for (i, &a) in sats.iter().enumerate() {
            for &b in &sats[i + 1..] {
                intra.push(cosine(at(d, a), at(d, b)));
            }
        }
        let mut inter = Vec::new();
        for &a in sats {
            for &b in non {
                inter.push(cosine(at(d, a), at(d, b)));
            }
        }
        per_demand.push(DemandCluster {
            demand: pu.demand_ids[d],
            intra_mean: mean(&intra),
            inter_mean: mean(&inter),
            n_satisfiers: sats.len(),
        });
        intra_all.extend(intra);
        inter_all.extend(inter);
    }

    let mut type2 = Vec::new();
    for &a in pu.anchors() {
        for &d2 in &pu.unsatisfied[a.object] {
            type2.push(cosine(at(a.demand, a.object), at(d2, a.object)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut type3 = Vec::new();
    if !pu.anchors().is_empty() {
        for _ in 0..20_000 {
            let a = pu.anchors()[rng.random_range(0..pu.anchors().len())];
            let c = PairRef {
                demand: rng.random_range(0..nd),
                object: rng.random_range(0..no),
            };
            if pu.classify(a, c) == Some(PairLabel::Negative(NegType::Different)) {
                type3.push(cosine(at(a.demand, a.object), at(c.demand, c.object)));
            }
        }
    }

    let mut pca_rows = Vec::new();
    let mut pca_meta = Vec::new();
    for d in 0..nd.min(pca_demands) {
        for o in 0..no {
            pca_rows.push(at(d, o).clone());
            pca_meta.push((pu.demand_ids[d], pu.object_ids[o], pu.sat[d][o]));
        }
    }
    let pca = pca_2d(&pca_rows)
        .into_iter()
        .zip(pca_meta)
        .map(|([x, y], (demand, object, satisfies))| PcaPoint {
            demand,
            object,
            satisfies,
            x,
            y,
        })
        .collect();

    let intra_mean = mean(&intra_all);
    let inter_mean = mean(&inter_all);
    Ok(ClusteringReport {
        intra_mean,
        inter_mean,
        gap: intra_mean - inter_mean,
        inter_by_type: [inter_mean, mean(&type2), mean(&type3)],
        per_demand,
        pca,
    })
}
