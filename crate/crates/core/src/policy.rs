//! Navigation policy: detection tokens → self-attention encoder →
//! cross-attention decoder queried by global ‖ demand features → GRU → action
//! logits. Trained by behavior cloning on expert trajectories.

use ddn_nn::layers::{CrossAttentionBlock, EncoderLayer, GruCell, Linear};
use ddn_nn::{Adam, AdamConfig, Graph, ParamId, ParamSet, Tensor, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::attribute::{AttributeConfig, AttributeEncoder, AttributeLayout, DemandObjectFeature};
use crate::demands::Universe;
use crate::error::{DdnError, Result};
use crate::expert::Trajectory;
use crate::perception::{Observation, BBOX_DIM, GLOBAL_DIM, LOGIT_DIM};
use crate::util::{argmax, derive_seed};
use crate::world::Action;

/// How detection embeddings become attribute features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttrMode {
    /// A contrastively pretrained encoder, frozen.
    Pretrained,
    /// An encoder inside the policy, trained from scratch by imitation.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub hidden: usize,
    pub action_emb_dim: usize,
    pub global_dim: usize,
    /// Hidden GELU layer in the query projection (0 = single linear map).
    pub query_hidden: usize,
    /// Learned extra memory slot the decoder can attend to when no
    /// detection matches the demand.
    pub memory_sink: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            layers: 2,
            ff_hidden: 128,
            hidden: 64,
            action_emb_dim: 16,
            global_dim: GLOBAL_DIM,
            query_hidden: 64,
            memory_sink: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub token: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub query: Linear,
    pub query_out: Option<Linear>,
    pub decoder: CrossAttentionBlock,
    pub sink: Option<ParamId>,
    pub action_emb: ParamId,
    pub gru: GruCell,
    pub head: Linear,
    pub attr: Option<AttributeLayout>,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub attr_config: AttributeConfig,
    pub mode: AttrMode,
    pub layout: PolicyLayout,
    pub params: ParamSet,
}

/// Per-trajectory (or per-step) network inputs.
#[derive(Debug, Clone)]
pub struct SeqInputs {
    pub k: usize,
    /// `T·k` rows: attribute features (pretrained) or demand-object features (joint).
    pub det: Tensor,
    /// `T·k × 6`: box/100 ‖ logits.
    pub geo: Tensor,
    /// `T × (global ‖ demand)`.
    pub ctx: Tensor,
    /// Previous action per step (`None` = start token).
    pub prev: Vec<Option<Action>>,
}

impl SeqInputs {
    pub fn len(&self) -> usize {
        self.prev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_empty()
    }
}

/// Builds per-step inputs from observations.
pub struct FeatureBuilder<'a> {
    pub mode: AttrMode,
    /// Required in pretrained mode.
    pub encoder: Option<&'a AttributeEncoder>,
}

impl FeatureBuilder<'_> {
    pub fn build(
        &self,
        frames: &[&Observation],
        demand_emb: &[f64],
        prev: Vec<Option<Action>>,
    ) -> Result<SeqInputs> {
        let k = frames.first().map_or(0, |f| f.detections.len());
        let mut do_rows = Vec::with_capacity(frames.len() * k);
        let mut geo_rows = Vec::with_capacity(frames.len() * k);
        let mut ctx_rows = Vec::with_capacity(frames.len());
        for f in frames {
            if f.detections.len() != k {
                return Err(DdnError::DimMismatch {
                    expected: k,
                    got: f.detections.len(),
                });
            }
            for d in &f.detections {
                let mut v = demand_emb.to_vec();
                v.extend_from_slice(&d.embedding);
                do_rows.push(DemandObjectFeature(v));
                geo_rows.push(d.geometry_features().to_vec());
            }
            let mut c = f.global_feature.clone();
            c.extend_from_slice(demand_emb);
            ctx_rows.push(c);
        }
        let det = match self.mode {
            AttrMode::Joint => Tensor::from_rows(&do_rows.into_iter().map(|f| f.0).collect::<Vec<_>>()),
            AttrMode::Pretrained => {
                let enc = self
                    .encoder
                    .ok_or_else(|| DdnError::Invalid("pretrained mode needs an attribute encoder".into()))?;
                Tensor::from_rows(&enc.encode_batch(&do_rows)?)
            }
        };
        Ok(SeqInputs {
            k,
            det,
            geo: Tensor::from_rows(&geo_rows),
            ctx: Tensor::from_rows(&ctx_rows),
            prev,
        })
    }

    pub fn for_trajectory(&self, t: &Trajectory, universe: &Universe) -> Result<SeqInputs> {
        let frames: Vec<&Observation> = t.frames.iter().collect();
        let prev = std::iter::once(None)
            .chain(t.actions.iter().take(t.actions.len().saturating_sub(1)).map(|a| Some(*a)))
            .collect();
        self.build(&frames, universe.embed_demand(t.demand_id)?, prev)
    }
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    config: &'a PolicyConfig,
    attr_config: &'a AttributeConfig,
    mode: AttrMode,
    params: Box<RawValue>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    config: PolicyConfig,
    attr_config: AttributeConfig,
    mode: AttrMode,
    params: Box<RawValue>,
}

impl PolicyNet {
    pub fn new(config: &PolicyConfig, attr_config: &AttributeConfig, mode: AttrMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.model_dim;
        let attr = (mode == AttrMode::Joint).then(|| AttributeLayout::new(&mut ps, "attr", attr_config, &mut rng));
        let token = Linear::new(&mut ps, "token", attr_config.out_dim + BBOX_DIM + LOGIT_DIM, d, &mut rng);
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("enc{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect();
        let ctx_dim = config.global_dim + attr_config.demand_dim;
        let (query, query_out) = if config.query_hidden == 0 {
            (Linear::new(&mut ps, "query", ctx_dim, d, &mut rng), None)
        } else {
            let h = config.query_hidden;
            (
                Linear::new(&mut ps, "query", ctx_dim, h, &mut rng),
                Some(Linear::new(&mut ps, "query_out", h, d, &mut rng)),
            )
        };
        let decoder = CrossAttentionBlock::new(&mut ps, "dec", d, config.heads, config.ff_hidden, &mut rng);
        let sink = config.memory_sink.then(|| ps.add_normal("sink", 1, d, &mut rng));
        let action_emb = ps.add_normal("action_emb", Action::COUNT, config.action_emb_dim, &mut rng);
        let gru = GruCell::new(&mut ps, "gru", d + config.action_emb_dim, config.hidden, &mut rng);
        let head = Linear::new(&mut ps, "head", config.hidden, Action::COUNT, &mut rng);
        Self {
            config: config.clone(),
            attr_config: attr_config.clone(),
            mode,
            layout: PolicyLayout {
                token,
                encoder,
                query,
                query_out,
                decoder,
                sink,
                action_emb,
                gru,
                head,
                attr,
            },
            params: ps,
        }
    }

    pub fn det_dim(&self) -> usize {
        match self.mode {
            AttrMode::Pretrained => self.attr_config.out_dim,
            AttrMode::Joint => self.attr_config.in_dim(),
        }
    }

    /// Runs `T` steps; returns `T × 6` logits and the final hidden state.
    pub fn forward(&self, g: &mut Graph, x: &SeqInputs, h0: Option<&[f64]>) -> Result<(Var, Var)> {
        let t = x.len();
        let k = x.k;
        if t == 0 || k == 0 {
            return Err(DdnError::Invalid("empty policy input".into()));
        }
        if x.det.cols != self.det_dim() {
            return Err(DdnError::DimMismatch {
                expected: self.det_dim(),
                got: x.det.cols,
            });
        }
        if x.det.rows != t * k || x.geo.rows != t * k || x.ctx.rows != t {
            return Err(DdnError::Invalid("policy input rows inconsistent".into()));
        }
        let l = &self.layout;
        let det = g.constant(x.det.clone());
        let attr = match &l.attr {
            Some(a) => a.forward(g, det),
            None => det,
        };
        let geo = g.constant(x.geo.clone());
        let tok = g.concat_cols(&[attr, geo]);
        let mut mem = l.token.forward(g, tok);
        for layer in &l.encoder {
            mem = layer.forward_grouped(g, mem, k);
        }
        let ctx = g.constant(x.ctx.clone());
        let mut q = l.query.forward(g, ctx);
        if let Some(out) = &l.query_out {
            q = g.gelu(q);
            q = out.forward(g, q);
        }
        let dec = match l.sink {
            Some(sink) => {
                // Append the sink after each step's k detections.
                let sink = g.param(sink);
                let all = g.concat_rows(&[mem, sink]);
                let index: Vec<usize> = (0..t)
                    .flat_map(|i| (i * k..(i + 1) * k).chain(std::iter::once(t * k)))
                    .collect();
                let mem = g.gather_rows(all, &index);
                l.decoder.forward_grouped(g, q, mem, 1, k + 1)
            }
            None => l.decoder.forward_grouped(g, q, mem, 1, k),
        };

        let mut onehot = Tensor::zeros(t, Action::COUNT);
        for (i, p) in x.prev.iter().enumerate() {
            if let Some(a) = p {
                onehot.set(i, a.index(), 1.0);
            }
        }
        let onehot = g.constant(onehot);
        let table = g.param(l.action_emb);
        let prev = g.matmul(onehot, table);
        let gru_in = g.concat_cols(&[dec, prev]);
        let xi = l.gru.input.forward(g, gru_in);

        let hd = self.config.hidden;
        let mut h = g.constant(Tensor::row(h0.map_or_else(|| vec![0.0; hd], <[f64]>::to_vec)));
        let mut hs = Vec::with_capacity(t);
        for i in 0..t {
            let xr = g.slice_rows(xi, i, 1);
            h = gru_step(g, &l.gru, xr, h);
            hs.push(h);
        }
        let all = if hs.len() == 1 { hs[0] } else { g.concat_rows(&hs) };
        Ok((l.head.forward(g, all), h))
    }

    /// One step of inference from an explicit hidden state.
    pub fn step(&self, x: &SeqInputs, hidden: &[f64]) -> Result<([f64; 6], Vec<f64>)> {
        let mut g = Graph::new(&self.params);
        let (logits, h) = self.forward(&mut g, x, Some(hidden))?;
        let lv = g.value(logits);
        let row = lv.row_slice(lv.rows - 1);
        let mut out = [0.0; 6];
        out.copy_from_slice(row);
        Ok((out, g.value(h).data.clone()))
    }

    pub fn to_checkpoint_json(&self) -> String {
        let params = RawValue::from_string(self.params.to_checkpoint_json()).expect("valid JSON");
        serde_json::to_string(&CheckpointOut {
            config: &self.config,
            attr_config: &self.attr_config,
            mode: self.mode,
            params,
        })
        .expect("checkpoint serialization")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let ck: CheckpointIn = serde_json::from_str(s)?;
        let mut net = Self::new(&ck.config, &ck.attr_config, ck.mode, 0);
        net.params.load_from(&ParamSet::from_checkpoint_json(ck.params.get())?)?;
        Ok(net)
    }
}

/// GRU update with a precomputed input projection row.
fn gru_step(g: &mut Graph, cell: &GruCell, xi: Var, h: Var) -> Var {
    let d = cell.hidden_dim;
    let hh = cell.hidden.forward(g, h);
    let xr = g.slice_cols(xi, 0, d);
    let xz = g.slice_cols(xi, d, d);
    let xn = g.slice_cols(xi, 2 * d, d);
    let hr = g.slice_cols(hh, 0, d);
    let hz = g.slice_cols(hh, d, d);
    let hn = g.slice_cols(hh, 2 * d, d);
    let r = g.add(xr, hr);
    let r = g.sigmoid(r);
    let z = g.add(xz, hz);
    let z = g.sigmoid(z);
    let rh = g.mul(r, hn);
    let n = g.add(xn, rh);
    let n = g.tanh(n);
    let diff = g.sub(h, n);
    let zd = g.mul(z, diff);
    g.add(n, zd)
}

/// Mean per-step cross-entropy of a trajectory against expert actions.
pub fn sequence_loss(g: &mut Graph, net: &PolicyNet, x: &SeqInputs, targets: &[Action]) -> Result<Var> {
    if targets.len() != x.len() {
        return Err(DdnError::DimMismatch {
            expected: x.len(),
            got: targets.len(),
        });
    }
    let (logits, _) = net.forward(g, x, None)?;
    let t: Vec<usize> = targets.iter().map(|a| a.index()).collect();
    Ok(g.cross_entropy(logits, &t))
}

/// Argmax with the lowest index winning ties; invariant under positive rescaling.
pub fn select_action(logits: &[f64; 6]) -> Action {
    Action::from_index(argmax(logits)).expect("six logits")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Trajectories per optimizer step.
    pub batch_trajectories: usize,
    pub grad_clip: f64,
    /// Every n-th trajectory (by position) is held out for accuracy.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_trajectories: 8,
            grad_clip: 1.0,
            holdout_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    /// Held-out expert-action accuracy, recorded at epoch ends.
    pub heldout_accuracy: Option<f64>,
}

/// Teacher-forced expert-action accuracy over a set of sequences.
pub fn action_accuracy(net: &PolicyNet, data: &[(SeqInputs, Vec<Action>)]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (x, y) in data {
        let mut g = Graph::new(&net.params);
        let (logits, _) = net.forward(&mut g, x, None)?;
        let lv = g.value(logits);
        for (r, a) in y.iter().enumerate() {
            let mut row = [0.0; 6];
            row.copy_from_slice(lv.row_slice(r));
            hit += usize::from(select_action(&row) == *a);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Behavior cloning with teacher forcing through the recurrent state.
pub fn train_policy(
    net: &mut PolicyNet,
    data: &[(SeqInputs, Vec<Action>)],
    cfg: &PolicyTrainConfig,
) -> Result<Vec<TrainLogRow>> {
    if data.is_empty() {
        return Err(DdnError::Invalid("no trajectories to train on".into()));
    }
    let (train, held): (Vec<usize>, Vec<usize>) = (0..data.len())
        .partition(|i| cfg.holdout_every == 0 || data.len() < 2 || i % cfg.holdout_every != cfg.holdout_every - 1);
    let held_data: Vec<(SeqInputs, Vec<Action>)> = held.iter().map(|&i| data[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xb0c]));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut log = Vec::new();
    let mut step = 0;
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_trajectories.max(1)) {
            let total: usize = chunk.iter().map(|&i| data[i].1.len()).sum();
            let mut grads = ddn_nn::Grads::zeros_like(&net.params);
            let mut loss = 0.0;
            for &i in chunk {
                let (x, y) = &data[i];
                let mut g = Graph::new(&net.params);
                let l = sequence_loss(&mut g, net, x, y)?;
                let w = y.len() as f64 / total as f64;
                loss += w * g.value(l).item();
                let mut gr = g.backward(l);
                gr.scale(w);
                grads.accumulate(&gr);
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(DdnError::DivergenceDetected { step, loss });
            }
            if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip);
            }
            adam.step(&mut net.params, &grads);
            log.push(TrainLogRow {
                step,
                loss,
                heldout_accuracy: None,
            });
            step += 1;
        }
        if !held_data.is_empty() {
            let acc = action_accuracy(net, &held_data)?;
            if let Some(last) = log.last_mut() {
                last.heldout_accuracy = Some(acc);
            }
            info!("policy epoch {epoch}: held-out accuracy {acc:.3}");
        }
    }
    Ok(log)
}

pub fn training_data(
    trajectories: &[Trajectory],
    universe: &Universe,
    builder: &FeatureBuilder<'_>,
) -> Result<Vec<(SeqInputs, Vec<Action>)>> {
    trajectories
        .iter()
        .map(|t| Ok((builder.for_trajectory(t, universe)?, t.actions.clone())))
        .collect()
}

pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("step,loss,heldout_accuracy\n");
    for r in rows {
        let acc = r.heldout_accuracy.map_or(String::new(), |a| format!("{a:.6}"));
        s.push_str(&format!("{},{:.6},{}\n", r.step, r.loss, acc));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(net: &PolicyNet, t: usize, k: usize, seed: u64) -> SeqInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        SeqInputs {
            k,
            det: m(t * k, net.det_dim()),
            geo: m(t * k, 6),
            ctx: m(t, 22 + 32),
            prev: (0..t).map(|i| if i == 0 { None } else { Action::from_index(i % 6) }).collect(),
        }
    }

    #[test]
    fn logits_shape_and_determinism() {
        let net = PolicyNet::new(&PolicyConfig::default(), &AttributeConfig::default(), AttrMode::Pretrained, 1);
        let x = random_inputs(&net, 3, 16, 2);
        let (a, ha) = net.step(&x, &[0.0; 64]).unwrap();
        let (b, hb) = net.step(&x, &[0.0; 64]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sequential_equals_batched() {
        let net = PolicyNet::new(&PolicyConfig::default(), &AttributeConfig::default(), AttrMode::Joint, 3);
        let x = random_inputs(&net, 4, 16, 5);
        let mut g = Graph::new(&net.params);
        let (all, _) = net.forward(&mut g, &x, None).unwrap();
        let all = g.value(all).clone();
        let mut h = vec![0.0; 64];
        for t in 0..4 {
            let xt = SeqInputs {
                k: 16,
                det: Tensor::from_vec(16, x.det.cols, x.det.data[t * 16 * x.det.cols..(t + 1) * 16 * x.det.cols].to_vec()),
                geo: Tensor::from_vec(16, 6, x.geo.data[t * 96..(t + 1) * 96].to_vec()),
                ctx: Tensor::row(x.ctx.row_slice(t).to_vec()),
                prev: vec![x.prev[t]],
            };
            let (l, h2) = net.step(&xt, &h).unwrap();
            for c in 0..6 {
                assert!((l[c] - all.get(t, c)).abs() < 1e-10);
            }
            h = h2;
        }
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        let l = [0.1, 2.0, -1.0, 2.0, 0.0, 1.5];
        let a = select_action(&l);
        assert_eq!(a, Action::RotateRight);
        for s in [0.01, 1.0, 37.0] {
            let scaled = l.map(|v| v * s);
            assert_eq!(select_action(&scaled), a);
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut net = PolicyNet::new(&PolicyConfig::default(), &AttributeConfig::default(), AttrMode::Pretrained, 1);
        let before = net.params.clone();
        let x = random_inputs(&net, 2, 16, 4);
        let data = vec![(x, vec![Action::MoveAhead, Action::Done])];
        let cfg = PolicyTrainConfig {
            epochs: 3,
            lr: 0.0,
            ..PolicyTrainConfig::default()
        };
        train_policy(&mut net, &data, &cfg).unwrap();
        assert_eq!(net.params, before);
    }

    #[test]
    fn memorizes_single_step() {
        let mut net = PolicyNet::new(&PolicyConfig::default(), &AttributeConfig::default(), AttrMode::Pretrained, 7);
        let x = random_inputs(&net, 1, 16, 8);
        let data = vec![(x, vec![Action::LookDown])];
        let cfg = PolicyTrainConfig {
            epochs: 500,
            batch_trajectories: 1,
            holdout_every: 0,
            ..PolicyTrainConfig::default()
        };
        let mut reached = None;
        for step in 0..cfg.epochs {
            let one = PolicyTrainConfig { epochs: 1, seed: step as u64, ..cfg.clone() };
            train_policy(&mut net, &data, &one).unwrap();
            if action_accuracy(&net, &data).unwrap() == 1.0 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = PolicyNet::new(&PolicyConfig::default(), &AttributeConfig::default(), AttrMode::Joint, 1);
        net.params.round_to_f32();
        let back = PolicyNet::from_checkpoint_json(&net.to_checkpoint_json()).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.mode, AttrMode::Joint);
    }
}
