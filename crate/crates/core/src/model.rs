//! Session encoder and prediction heads.
//!
//! ```text
//!  turns ──► shared turn encoder ──┬─ previous turns ─► prev GRU ─► prev MLP ─┐
//!                                  ├─ targeted turn ──────────────► target MLP ├─► mean ─► z ─► heads
//!                                  └─ next turns ─────► next GRU ─► next MLP ─┘
//! ```
//!
//! The turn encoder embeds utterance and response tokens, mean-pools each
//! into `u` and `r`, and applies `tanh(W·[u; r; u⊙r] + b)`. The product term
//! lets the projection score utterance/response agreement. A turn
//! with neither utterance nor response tokens pools to zeros and therefore
//! maps to the learned vector `tanh(b)`.
//!
//! Context summarizers are stacked (optionally bidirectional) GRUs. The
//! summary of a side is the concatenation of the top layer's final states
//! in both directions. A side without turns contributes a zero vector to
//! the pool in place of its branch output.
//!
//! Batches are right-aligned per side and padded steps are masked, so a
//! session's `z` does not depend on what else is in its batch.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{Session, Turn};
use crate::error::{Error, Result};
use crate::params::{Layer, LrTier, ParamSet, Role};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Turn vector width (the language-model width at full scale).
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub bidirectional: bool,
    pub head_hidden: usize,
    /// Turns of context kept on each side of the targeted turn.
    pub context_t: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; the full-size network uses 768-wide turn
    /// vectors, 256-unit two-layer bidirectional GRUs and 256-unit heads.
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            embed_dim: 32,
            gru_hidden: 32,
            gru_layers: 2,
            bidirectional: true,
            head_hidden: 32,
            context_t: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.gru_hidden == 0
            || self.gru_layers == 0
            || self.head_hidden == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Width of a context summary.
    pub fn summary_dim(&self) -> usize {
        self.gru_hidden * self.directions()
    }

    /// Width of `z` (and of each branch MLP output).
    pub fn z_dim(&self) -> usize {
        self.gru_hidden
    }
}

/// Prediction heads attached to `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadId {
    /// Real-vs-shuffled session discriminator (source task).
    Contrastive,
    /// SAT/DSAT classifier (target task); its logit scores DSAT.
    Satisfaction,
}

impl HeadId {
    pub fn role(self) -> Role {
        match self {
            HeadId::Contrastive => Role::HeadS,
            HeadId::Satisfaction => Role::HeadT,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            HeadId::Contrastive => "contrastive_head",
            HeadId::Satisfaction => "satisfaction_head",
        }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadId::Contrastive => "contrastive",
            HeadId::Satisfaction => "satisfaction",
        })
    }
}

impl FromStr for HeadId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(HeadId::Contrastive),
            "satisfaction" => Ok(HeadId::Satisfaction),
            o => Err(Error::Contract(format!("unknown head `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Prev,
    Next,
}

/// Tensor order inside a GRU layer.
const GRU_W_Z: usize = 0;
const GRU_U_Z: usize = 1;
const GRU_B_Z: usize = 2;
const GRU_W_R: usize = 3;
const GRU_U_R: usize = 4;
const GRU_B_R: usize = 5;
const GRU_W_N: usize = 6;
const GRU_U_N: usize = 7;
const GRU_B_N: usize = 8;

/// Layer positions inside a [`ParamSet`] built by [`Model::init_params`].
#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    turn_proj: usize,
    /// `[side][layer][direction]`
    gru: [Vec<Vec<usize>>; 2],
    target_mlp: usize,
    prev_mlp: usize,
    next_mlp: usize,
    contrastive: (usize, usize),
    satisfaction: (usize, usize),
}

/// The session encoder for one [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
}

fn layer_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the layer name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape matches data")
}

/// Fan-in scaled uniform weight.
fn weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

/// Bias of the GRU update gate; positive values start cells near carry-through.
pub const UPDATE_GATE_BIAS: f64 = 1.0;

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let embedding = take();
        let turn_proj = take();
        let mut gru: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
        for side in &mut gru {
            for _ in 0..cfg.gru_layers {
                side.push((0..cfg.directions()).map(|_| take()).collect());
            }
        }
        let layout = Layout {
            embedding,
            turn_proj,
            gru,
            target_mlp: take(),
            prev_mlp: take(),
            next_mlp: take(),
            contrastive: (take(), take()),
            satisfaction: (take(), take()),
        };
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn gru_name(side: usize, layer: usize, dir: usize) -> String {
        format!(
            "{}_gru.l{layer}.{}",
            ["prev", "next"][side],
            ["fwd", "bwd"][dir]
        )
    }

    fn build_layer(&self, idx: usize, seed: u64) -> Layer {
        let c = &self.cfg;
        let (e, h, d, hh) = (c.embed_dim, c.gru_hidden, c.z_dim(), c.head_hidden);
        let l = &self.layout;
        let mk = |name: String, role, tier, tensors| Layer {
            name,
            role,
            tier,
            tensors,
        };
        let name_of = |idx: usize| -> String {
            if idx == l.embedding {
                "embedding".into()
            } else if idx == l.turn_proj {
                "turn_proj".into()
            } else if idx == l.target_mlp {
                "target_mlp".into()
            } else if idx == l.prev_mlp {
                "prev_mlp".into()
            } else if idx == l.next_mlp {
                "next_mlp".into()
            } else if idx == l.contrastive.0 {
                "contrastive_head.hidden".into()
            } else if idx == l.contrastive.1 {
                "contrastive_head.out".into()
            } else if idx == l.satisfaction.0 {
                "satisfaction_head.hidden".into()
            } else if idx == l.satisfaction.1 {
                "satisfaction_head.out".into()
            } else {
                for (s, side) in l.gru.iter().enumerate() {
                    for (li, dirs) in side.iter().enumerate() {
                        if let Some(di) = dirs.iter().position(|&x| x == idx) {
                            return Self::gru_name(s, li, di);
                        }
                    }
                }
                unreachable!("layer index {idx} not in layout")
            }
        };
        let name = name_of(idx);
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, &name));
        let zeros = |n: usize| Tensor::zeros(&[n]);

        if idx == l.embedding {
            return mk(
                name,
                Role::Body,
                LrTier::Encoder,
                vec![uniform(&mut rng, &[c.vocab_size, e], 1.0)],
            );
        }
        if idx == l.turn_proj {
            return mk(
                name,
                Role::Body,
                LrTier::Encoder,
                vec![weight(&mut rng, 3 * e, e), zeros(e)],
            );
        }
        if idx == l.target_mlp {
            return mk(
                name,
                Role::Body,
                LrTier::Other,
                vec![weight(&mut rng, e, d), zeros(d)],
            );
        }
        if idx == l.prev_mlp || idx == l.next_mlp {
            let s = c.summary_dim();
            return mk(
                name,
                Role::Body,
                LrTier::Other,
                vec![weight(&mut rng, s, d), zeros(d)],
            );
        }
        for head in [HeadId::Contrastive, HeadId::Satisfaction] {
            let (hid, out) = self.head_layers(head);
            if idx == hid {
                return mk(
                    name,
                    head.role(),
                    LrTier::Other,
                    vec![weight(&mut rng, d, hh), zeros(hh)],
                );
            }
            if idx == out {
                return mk(
                    name,
                    head.role(),
                    LrTier::Other,
                    vec![weight(&mut rng, hh, 1), zeros(1)],
                );
            }
        }
        // GRU layer
        let layer_no: usize = name
            .split(".l")
            .nth(1)
            .and_then(|r| r.split('.').next())
            .and_then(|x| x.parse().ok())
            .expect("gru layer name");
        let input = if layer_no == 0 { e } else { c.summary_dim() };
        let mut t = Vec::with_capacity(9);
        for gate in 0..3 {
            t.push(weight(&mut rng, input, h));
            t.push(weight(&mut rng, h, h));
            t.push(if gate == 0 {
                Tensor::filled(&[h], UPDATE_GATE_BIAS)
            } else {
                zeros(h)
            });
        }
        mk(name, Role::Body, LrTier::Other, t)
    }

    fn num_layers(&self) -> usize {
        self.layout.satisfaction.1 + 1
    }

    fn head_layers(&self, head: HeadId) -> (usize, usize) {
        match head {
            HeadId::Contrastive => self.layout.contrastive,
            HeadId::Satisfaction => self.layout.satisfaction,
        }
    }

    /// Fresh parameters drawn under the config seed: fan-in scaled uniform
    /// weights, `U(-1, 1)` embeddings, zero biases except the GRU update
    /// gate, which starts at [`UPDATE_GATE_BIAS`].
    pub fn init_params(&self) -> ParamSet {
        let layers = (0..self.num_layers())
            .map(|i| self.build_layer(i, self.cfg.seed))
            .collect();
        ParamSet::new(layers).expect("layout has unique names")
    }

    /// Closed-form parameter count for this config.
    pub fn expected_param_count(&self) -> usize {
        let c = &self.cfg;
        let (v, e, h, d, hh) = (
            c.vocab_size,
            c.embed_dim,
            c.gru_hidden,
            c.z_dim(),
            c.head_hidden,
        );
        let dirs = c.directions();
        let s = c.summary_dim();
        let gru_layer = |input: usize| 3 * (input * h + h * h + h);
        let per_side: usize = (0..c.gru_layers)
            .map(|l| dirs * gru_layer(if l == 0 { e } else { s }))
            .sum();
        let head = d * hh + hh + hh + 1;
        v * e + (3 * e * e + e) + 2 * per_side + (e * d + d) + 2 * (s * d + d) + 2 * head
    }

    /// Redraws the layers of one head from `seed`; all other layers are
    /// copied bit for bit. Body layers cannot be reinitialized.
    pub fn reinit_head(&self, params: &ParamSet, role: Role, seed: u64) -> Result<ParamSet> {
        let head = match role {
            Role::HeadS => HeadId::Contrastive,
            Role::HeadT => HeadId::Satisfaction,
            Role::Body => return Err(Error::Contract("the body cannot be reinitialized".into())),
        };
        self.check(params)?;
        let (hid, out) = self.head_layers(head);
        let mut layers = params.layers().to_vec();
        layers[hid] = self.build_layer(hid, seed);
        layers[out] = self.build_layer(out, seed);
        ParamSet::new(layers)
    }

    /// Errors unless `params` has this model's structure.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        if params.layers().len() != self.num_layers() {
            return Err(Error::Contract(
                "parameter set does not match the model".into(),
            ));
        }
        let reference = self.init_params();
        if !reference.same_structure(params) {
            return Err(Error::Contract(
                "parameter set does not match the model".into(),
            ));
        }
        Ok(())
    }

    /// Encodes a list of turns into a `[n × embed_dim]` matrix.
    fn encode_turns(&self, g: &mut Graph, p: &[Vec<NodeId>], turns: &[&Turn]) -> Result<NodeId> {
        let l = &self.layout;
        let utter = turns.iter().map(|t| t.utterance.clone()).collect();
        let resp = turns.iter().map(|t| t.response.clone()).collect();
        let u = g.embed_mean(p[l.embedding][0], utter)?;
        let r = g.embed_mean(p[l.embedding][0], resp)?;
        let both = g.mul(u, r)?;
        let ur = g.concat_cols(u, r)?;
        let ur = g.concat_cols(ur, both)?;
        let pre = g.linear(ur, p[l.turn_proj][0], p[l.turn_proj][1])?;
        Ok(g.tanh(pre))
    }

    fn gru_cell(&self, g: &mut Graph, w: &[NodeId], x: NodeId, h: NodeId) -> Result<NodeId> {
        let gate =
            |g: &mut Graph, wi: usize, ui: usize, bi: usize, hin: NodeId| -> Result<NodeId> {
                let a = g.matmul(x, w[wi])?;
                let b = g.matmul(hin, w[ui])?;
                let s = g.add(a, b)?;
                g.add_bias(s, w[bi])
            };
        let zp = gate(g, GRU_W_Z, GRU_U_Z, GRU_B_Z, h)?;
        let z = g.sigmoid(zp);
        let rp = gate(g, GRU_W_R, GRU_U_R, GRU_B_R, h)?;
        let r = g.sigmoid(rp);
        let rh = g.mul(r, h)?;
        let np = gate(g, GRU_W_N, GRU_U_N, GRU_B_N, rh)?;
        let n = g.tanh(np);
        let diff = g.sub(h, n)?;
        let carry = g.mul(z, diff)?;
        g.add(n, carry)
    }

    /// `h + m ⊙ (h_new - h)`: masked rows keep their state exactly.
    fn masked_update(g: &mut Graph, h: NodeId, h_new: NodeId, mask: NodeId) -> Result<NodeId> {
        let d = g.sub(h_new, h)?;
        let md = g.mul(mask, d)?;
        g.add(h, md)
    }

    /// Runs one side's stacked GRU over right-aligned sequences and returns
    /// the `[batch × summary_dim]` summary.
    fn summarize(
        &self,
        g: &mut Graph,
        p: &[Vec<NodeId>],
        side: Side,
        turn_vecs: NodeId,
        seqs: &[Vec<usize>],
    ) -> Result<NodeId> {
        let c = &self.cfg;
        let b = seqs.len();
        let h = c.gru_hidden;
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let side_idx = match side {
            Side::Prev => 0,
            Side::Next => 1,
        };
        if steps == 0 {
            return Ok(g.constant(Tensor::zeros(&[b, c.summary_dim()])));
        }
        // Step s holds element s - (steps - len) of each sequence.
        let element = |s: usize, seq: &Vec<usize>| -> Option<usize> {
            let pad = steps - seq.len();
            (s >= pad).then(|| seq[s - pad])
        };
        let masks: Vec<NodeId> = (0..steps)
            .map(|s| {
                let mut m = Vec::with_capacity(b * h);
                for seq in seqs {
                    let v = if element(s, seq).is_some() { 1.0 } else { 0.0 };
                    m.extend(std::iter::repeat_n(v, h));
                }
                g.constant(Tensor::new(vec![b, h], m).expect("mask shape"))
            })
            .collect();
        let mut inputs: Vec<NodeId> = (0..steps)
            .map(|s| g.gather_rows(turn_vecs, seqs.iter().map(|q| element(s, q)).collect()))
            .collect::<Result<_>>()?;

        let mut finals = Vec::new();
        for layer in 0..c.gru_layers {
            let mut outs: Vec<Vec<NodeId>> = Vec::new();
            finals.clear();
            for dir in 0..c.directions() {
                let w = p[self.layout.gru[side_idx][layer][dir]].clone();
                let mut state = g.constant(Tensor::zeros(&[b, h]));
                let mut out = vec![state; steps];
                let order: Vec<usize> = if dir == 0 {
                    (0..steps).collect()
                } else {
                    (0..steps).rev().collect()
                };
                for s in order {
                    let cand = self.gru_cell(g, &w, inputs[s], state)?;
                    state = Self::masked_update(g, state, cand, masks[s])?;
                    out[s] = state;
                }
                finals.push(state);
                outs.push(out);
            }
            if layer + 1 < c.gru_layers {
                inputs = (0..steps)
                    .map(|s| {
                        if outs.len() == 2 {
                            g.concat_cols(outs[0][s], outs[1][s])
                        } else {
                            Ok(outs[0][s])
                        }
                    })
                    .collect::<Result<_>>()?;
            }
        }
        if finals.len() == 2 {
            g.concat_cols(finals[0], finals[1])
        } else {
            Ok(finals[0])
        }
    }

    /// Session representations `[batch × z_dim]` for windowed sessions.
    pub fn forward_z(&self, g: &mut Graph, p: &[Vec<NodeId>], batch: &[Session]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut turns: Vec<&Turn> = Vec::new();
        let mut target_rows = Vec::with_capacity(batch.len());
        let mut prev_seqs = Vec::with_capacity(batch.len());
        let mut next_seqs = Vec::with_capacity(batch.len());
        for s in batch {
            let base = turns.len();
            turns.extend(s.turns.iter());
            target_rows.push(Some(base + s.targeted_index));
            prev_seqs.push((base..base + s.targeted_index).collect::<Vec<_>>());
            next_seqs.push((base + s.targeted_index + 1..base + s.turns.len()).collect::<Vec<_>>());
        }
        let tv = self.encode_turns(g, p, &turns)?;
        let l = &self.layout;
        let d = self.cfg.z_dim();

        let target = g.gather_rows(tv, target_rows)?;
        let tpre = g.linear(target, p[l.target_mlp][0], p[l.target_mlp][1])?;
        let mut z = g.tanh(tpre);
        for (side, seqs, mlp) in [
            (Side::Prev, &prev_seqs, l.prev_mlp),
            (Side::Next, &next_seqs, l.next_mlp),
        ] {
            if seqs.iter().all(Vec::is_empty) {
                continue;
            }
            let summary = self.summarize(g, p, side, tv, seqs)?;
            let pre = g.linear(summary, p[mlp][0], p[mlp][1])?;
            let out = g.tanh(pre);
            let mut m = Vec::with_capacity(seqs.len() * d);
            for s in seqs.iter() {
                let v = if s.is_empty() { 0.0 } else { 1.0 };
                m.extend(std::iter::repeat_n(v, d));
            }
            let mask = g.constant(Tensor::new(vec![seqs.len(), d], m)?);
            let masked = g.mul(out, mask)?;
            z = g.add(z, masked)?;
        }
        Ok(g.scale(z, 1.0 / 3.0))
    }

    /// Logits `[batch]` of `head` for `z` `[batch × z_dim]`.
    pub fn head_logits(
        &self,
        g: &mut Graph,
        p: &[Vec<NodeId>],
        z: NodeId,
        head: HeadId,
    ) -> Result<NodeId> {
        let (hid, out) = self.head_layers(head);
        let a = g.linear(z, p[hid][0], p[hid][1])?;
        let a = g.relu(a);
        let o = g.linear(a, p[out][0], p[out][1])?;
        let n = g.value(o).shape()[0];
        g.reshape(o, &[n])
    }

    /// Logits of `head` for a batch of windowed sessions.
    pub fn logits(
        &self,
        g: &mut Graph,
        p: &[Vec<NodeId>],
        batch: &[Session],
        head: HeadId,
    ) -> Result<NodeId> {
        let z = self.forward_z(g, p, batch)?;
        self.head_logits(g, p, z, head)
    }

    /// Inference: logits for many sessions, windowed to `context_t` and
    /// evaluated in chunks.
    pub fn predict(
        &self,
        params: &ParamSet,
        sessions: &[Session],
        head: HeadId,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(sessions.len());
        for chunk in sessions.chunks(256) {
            let windowed: Vec<Session> = chunk
                .iter()
                .map(|s| crate::data::window(s, self.cfg.context_t))
                .collect();
            let mut g = Graph::new();
            let p = g.bind(params);
            let l = self.logits(&mut g, &p, &windowed, head)?;
            out.extend_from_slice(g.value(l).data());
        }
        Ok(out)
    }

    /// The `[embed_dim]` vector of a single turn.
    pub fn encode_turn(&self, params: &ParamSet, turn: &Turn) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(params);
        let v = self.encode_turns(&mut g, &p, &[turn])?;
        g.value(v).reshaped(&[self.cfg.embed_dim])
    }

    /// `z` for one windowed session.
    pub fn session_representation(&self, params: &ParamSet, windowed: &Session) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(params);
        let z = self.forward_z(&mut g, &p, std::slice::from_ref(windowed))?;
        g.value(z).reshaped(&[self.cfg.z_dim()])
    }

    /// Logit of `head` for a single representation vector.
    pub fn head_forward(&self, params: &ParamSet, z: &Tensor, head: HeadId) -> Result<f64> {
        if z.len() != self.cfg.z_dim() {
            return Err(Error::Shape(format!(
                "z has {} values, head expects {}",
                z.len(),
                self.cfg.z_dim()
            )));
        }
        let mut g = Graph::new();
        let p = g.bind(params);
        let zn = g.constant(z.reshaped(&[1, self.cfg.z_dim()])?);
        let l = self.head_logits(&mut g, &p, zn, head)?;
        Ok(g.value(l).data()[0])
    }

    /// Names of layers belonging to `head`.
    pub fn head_layer_names(&self, head: HeadId) -> [String; 2] {
        [
            format!("{}.hidden", head.prefix()),
            format!("{}.out", head.prefix()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{all_coordinates, grad_check_coords};
    use crate::data::{generate_corpus, window, GeneratorConfig};

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embed_dim: 6,
            gru_hidden: 5,
            head_hidden: 4,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn corpus() -> crate::data::Corpus {
        generate_corpus(&GeneratorConfig {
            num_labeled: 60,
            num_unlabeled: 10,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn param_count_matches_closed_form() {
        for bidirectional in [true, false] {
            for gru_layers in [1, 2, 3] {
                let m = Model::new(ModelConfig {
                    bidirectional,
                    gru_layers,
                    ..tiny_cfg(50)
                })
                .unwrap();
                assert_eq!(m.init_params().num_params(), m.expected_param_count());
            }
        }
        // Hand count for the default desk config.
        let m = Model::new(ModelConfig::default()).unwrap();
        let per_side = 2 * 3 * (32 * 32 + 32 * 32 + 32) + 2 * 3 * (64 * 32 + 32 * 32 + 32);
        let expected = 1024 * 32
            + (96 * 32 + 32)
            + 2 * per_side
            + (32 * 32 + 32)
            + 2 * (64 * 32 + 32)
            + 2 * (32 * 32 + 32 + 32 + 1);
        assert_eq!(m.init_params().num_params(), expected);
    }

    #[test]
    fn init_is_deterministic_and_has_all_roles() {
        let m = Model::new(tiny_cfg(30)).unwrap();
        assert_eq!(m.init_params(), m.init_params());
        let p = m.init_params();
        for role in [Role::Body, Role::HeadS, Role::HeadT] {
            assert!(p.layers_with_role(role).count() > 0);
        }
        let gru = p.layer("prev_gru.l0.fwd").unwrap();
        assert!(gru.tensors[GRU_B_Z]
            .data()
            .iter()
            .all(|&b| b == UPDATE_GATE_BIAS));
        assert!(gru.tensors[GRU_B_R].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn turn_encoding_properties() {
        let c = corpus();
        let m = Model::new(tiny_cfg(c.vocab.len())).unwrap();
        let p = m.init_params();
        let t = c.labeled[0].targeted().clone();
        let a = m.encode_turn(&p, &t).unwrap();
        assert_eq!(a.shape(), &[6]);
        assert_eq!(a, m.encode_turn(&p, &t).unwrap());
        let mut permuted = t.clone();
        permuted.utterance.reverse();
        let b = m.encode_turn(&p, &permuted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let empty = Turn {
            utterance: vec![],
            response: vec![],
            raw_utterance: String::new(),
            raw_response: String::new(),
        };
        let e = m.encode_turn(&p, &empty).unwrap();
        let bias = p.layer("turn_proj").unwrap().tensors[1].map(f64::tanh);
        assert_eq!(e, bias);
    }

    #[test]
    fn empty_context_gives_target_branch_only() {
        let c = corpus();
        let m = Model::new(tiny_cfg(c.vocab.len())).unwrap();
        let p = m.init_params();
        let s = window(&c.labeled[0], 0);
        assert_eq!(s.turns.len(), 1);
        let z = m.session_representation(&p, &s).unwrap();
        let tv = m.encode_turn(&p, s.targeted()).unwrap();
        let mlp = p.layer("target_mlp").unwrap();
        let (w, b) = (&mlp.tensors[0], &mlp.tensors[1]);
        let d = m.config().z_dim();
        for j in 0..d {
            let mut acc = b.data()[j];
            for i in 0..6 {
                acc += tv.data()[i] * w.data()[i * d + j];
            }
            assert!((z.data()[j] - acc.tanh() / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn z_shape_is_constant_and_batch_independent() {
        let c = corpus();
        let m = Model::new(tiny_cfg(c.vocab.len())).unwrap();
        let p = m.init_params();
        let windows: Vec<Session> = c.labeled.iter().map(|s| window(s, 2)).collect();
        let mut g = Graph::new();
        let ids = g.bind(&p);
        let z = m.forward_z(&mut g, &ids, &windows).unwrap();
        let d = m.config().z_dim();
        assert_eq!(g.value(z).shape(), &[windows.len(), d]);
        for (i, s) in windows.iter().enumerate() {
            let alone = m.session_representation(&p, s).unwrap();
            assert_eq!(alone.data(), &g.value(z).data()[i * d..(i + 1) * d]);
        }
    }

    #[test]
    fn previous_turn_order_matters() {
        let c = corpus();
        let m = Model::new(tiny_cfg(c.vocab.len())).unwrap();
        let p = m.init_params();
        let s = c
            .labeled
            .iter()
            .map(|s| window(s, 2))
            .find(|w| w.targeted_index == 2 && w.turns[0] != w.turns[1])
            .expect("session with two previous turns");
        let mut rev = s.clone();
        rev.turns.swap(0, 1);
        let a = m.session_representation(&p, &s).unwrap();
        let b = m.session_representation(&p, &rev).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn head_forward_matches_hand_evaluation() {
        let m = Model::new(tiny_cfg(20)).unwrap();
        let p = m.init_params();
        let d = m.config().z_dim();
        let z = Tensor::vector((0..d).map(|i| (i as f64 * 0.37).sin()).collect());
        let hid = p.layer("satisfaction_head.hidden").unwrap();
        let out = p.layer("satisfaction_head.out").unwrap();
        let hh = m.config().head_hidden;
        let mut logit = out.tensors[1].data()[0];
        for j in 0..hh {
            let mut a = hid.tensors[1].data()[j];
            for i in 0..d {
                a += z.data()[i] * hid.tensors[0].data()[i * hh + j];
            }
            logit += a.max(0.0) * out.tensors[0].data()[j];
        }
        let got = m.head_forward(&p, &z, HeadId::Satisfaction).unwrap();
        assert!((got - logit).abs() < 1e-12);

        let big = z.map(|x| x * 1e3);
        assert!(m
            .head_forward(&p, &big, HeadId::Contrastive)
            .unwrap()
            .is_finite());

        let mut zero_head = p.clone();
        for name in m.head_layer_names(HeadId::Contrastive) {
            let i = zero_head.layer_index(&name).unwrap();
            for t in &mut zero_head.layers_mut()[i].tensors {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let zero_z = Tensor::zeros(&[d]);
        assert_eq!(
            m.head_forward(&zero_head, &zero_z, HeadId::Contrastive)
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn unknown_head_is_contract_error() {
        assert!(matches!(
            "satisfaction_x".parse::<HeadId>(),
            Err(Error::Contract(_))
        ));
        assert_eq!(
            "contrastive".parse::<HeadId>().unwrap(),
            HeadId::Contrastive
        );
    }

    #[test]
    fn reinit_head_isolation() {
        let c = corpus();
        let m = Model::new(tiny_cfg(c.vocab.len())).unwrap();
        let p = m.init_params();
        let q = m.reinit_head(&p, Role::HeadT, 99).unwrap();
        assert_eq!(q, m.reinit_head(&p, Role::HeadT, 99).unwrap());
        for (a, b) in p.layers().iter().zip(q.layers()) {
            if a.role == Role::HeadT {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(matches!(
            m.reinit_head(&p, Role::Body, 1),
            Err(Error::Contract(_))
        ));
        let s = window(&c.labeled[3], 2);
        let before = m
            .predict(&p, std::slice::from_ref(&s), HeadId::Satisfaction)
            .unwrap();
        let after = m.predict(&q, &[s], HeadId::Satisfaction).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn context_gradients_reach_shared_encoder() {
        let c = corpus();
        let m = Model::new(tiny_cfg(c.vocab.len())).unwrap();
        let p = m.init_params();
        let s = c
            .labeled
            .iter()
            .map(|s| window(s, 2))
            .find(|w| w.turns.len() >= 2)
            .unwrap();
        // Only a context token that does not occur in the targeted turn.
        let target_tokens: Vec<usize> = s
            .targeted()
            .utterance
            .iter()
            .chain(&s.targeted().response)
            .copied()
            .collect();
        let ctx_token = s
            .turns
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != s.targeted_index)
            .flat_map(|(_, t)| t.utterance.iter().chain(&t.response))
            .copied()
            .find(|t| !target_tokens.contains(t))
            .expect("distinct context token");
        let mut g = Graph::new();
        let ids = g.bind(&p);
        let l = m.logits(&mut g, &ids, &[s], HeadId::Satisfaction).unwrap();
        let loss = g.sum(l);
        let grads = g.backward(loss).unwrap();
        let emb = grads.by_name(&p, "embedding/0").unwrap();
        let e = m.config().embed_dim;
        assert!(emb.data()[ctx_token * e..(ctx_token + 1) * e]
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn full_model_gradient_check() {
        let c = corpus();
        let m = Model::new(tiny_cfg(c.vocab.len())).unwrap();
        let p = m.init_params();
        let batch: Vec<Session> = c.labeled[..4].iter().map(|s| window(s, 2)).collect();
        let targets = Tensor::vector(batch.iter().map(|s| s.label.unwrap().target()).collect());
        let f = |g: &mut Graph, p: &ParamSet| {
            let ids = g.bind(p);
            let l = m.logits(g, &ids, &batch, HeadId::Satisfaction)?;
            g.bce_with_logits(l, &targets)
        };
        // The embedding table is mostly rows the batch never touches.
        let coords: Vec<_> = all_coordinates(&p)
            .into_iter()
            .filter(|(k, _)| k.layer != 0)
            .collect();
        let r = grad_check_coords(&f, &p, 1e-5, &coords).unwrap();
        // Below 1e-6 a central difference of an O(1) loss resolves only
        // ~ulp(loss) / 2eps, so those coordinates are held to an absolute bound.
        assert!(r.max_relative_error_above(1e-6) < 1e-4, "{:?}", r.worst());
        assert!(r.max_absolute_error_below(1e-6) < 1e-10);
    }
}
