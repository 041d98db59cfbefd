use serde::{Deserialize, Serialize};

use super::layers::{conv_out, Conv2d, Linear, LstmCell, Mlp};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Which algorithm variant the model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Gace,
    GaceGdan,
    /// Ablation: the discriminator query is concatenated to the head input
    /// instead of going through the attention.
    GaceConcat,
}

impl Variant {
    pub fn uses_gace(self) -> bool {
        self != Variant::Base
    }

    pub fn uses_query(self) -> bool {
        matches!(self, Variant::GaceGdan | Variant::GaceConcat)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Gace => "gace",
            Variant::GaceGdan => "gace_gdan",
            Variant::GaceConcat => "gace_concat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "base" => Variant::Base,
            "gace" => Variant::Gace,
            "gace_gdan" => Variant::GaceGdan,
            "gace_concat" => Variant::GaceConcat,
            _ => return None,
        })
    }
}

/// Whether RL gradients may reach the discriminator through the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryGrad {
    Stop,
    Flow,
}

/// What the attention output `h` is concatenated with before the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdanConcat {
    /// The recurrent (or linear) core output.
    Recurrent,
    /// The gated-attention vector `M`.
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    Lstm,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "dim")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    pub fn dim(self) -> usize {
        match self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Observation shape `[C, H, W]`.
    pub obs_shape: [usize; 3],
    pub encoder: EncoderKind,
    /// Hidden widths of the MLP encoder before its `d_e` output layer.
    pub encoder_hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub d_e: usize,
    /// Number of instructable targets N.
    pub n_goals: usize,
    /// Discriminator outputs: N, or N + 1 with the negative class.
    pub disc_classes: usize,
    pub embed_dim: usize,
    pub d_q: usize,
    pub core: CoreKind,
    /// Core width; key and value are its two halves.
    pub hidden: usize,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub action: ActionSpace,
    pub variant: Variant,
    pub query_grad: QueryGrad,
    pub gdan_concat: GdanConcat,
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.hidden / 2
    }

    pub fn d_v(&self) -> usize {
        self.hidden - self.hidden / 2
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Mlp(Mlp),
    Conv { convs: Vec<Conv2d>, fc: Linear },
}

#[derive(Debug, Clone)]
enum Core {
    Lstm(LstmCell),
    Linear(Linear),
}

/// Recurrent state carried between steps, outside any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Tensor,
    pub c: Tensor,
}

impl RecurrentState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(vec![batch, hidden]),
            c: Tensor::zeros(vec![batch, hidden]),
        }
    }
}

/// Recurrent state as graph values.
#[derive(Debug, Clone, Copy)]
pub struct CoreState {
    pub h: Var,
    pub c: Var,
}

/// Query, key, value, attention and attended vectors for one step.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub u: Var,
    pub h: Var,
}

/// Intermediate values of one actor-critic step.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub e: Var,
    pub gate: Var,
    pub m: Var,
    pub core_out: Var,
    pub state: CoreState,
    pub query: Option<Var>,
    pub attention: Option<AttentionVars>,
    pub heads_in: Var,
}

/// Feature extractor σ, goal-discriminator d and actor-critic f in one
/// parameter store.
#[derive(Debug, Clone)]
pub struct GoalModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    disc1: Linear,
    disc2: Linear,
    embed_table: ParamId,
    embed_proj: Linear,
    core: Core,
    w_q: Option<ParamId>,
    w_k: Option<ParamId>,
    policy: Mlp,
    value: Mlp,
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    use rand::Rng as _;
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

impl GoalModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = ParamStore::new();
        let [c, h, w] = config.obs_shape;
        let encoder = match config.encoder {
            EncoderKind::Mlp => {
                let mut widths = config.encoder_hidden.clone();
                widths.push(config.d_e);
                Encoder::Mlp(Mlp::new(&mut p, "encoder", ParamGroup::Encoder, c * h * w, &widths, true, rng))
            }
            EncoderKind::Conv => {
                let mut convs = Vec::new();
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for (i, &oc) in config.conv_channels.iter().enumerate() {
                    convs.push(Conv2d::new(&mut p, &format!("encoder.conv{i}"), ParamGroup::Encoder, ch, oc, 3, 2, 1, rng));
                    ch = oc;
                    hh = conv_out(hh, 3, 2, 1);
                    ww = conv_out(ww, 3, 2, 1);
                }
                let fc = Linear::new(&mut p, "encoder.fc", ParamGroup::Encoder, ch * hh * ww, config.d_e, rng);
                Encoder::Conv { convs, fc }
            }
        };
        let disc1 = Linear::new(&mut p, "disc.0", ParamGroup::Discriminator, config.d_e, config.d_q, rng);
        let disc2 = Linear::new(&mut p, "disc.1", ParamGroup::Discriminator, config.d_q, config.disc_classes, rng);
        let embed_table = p.add(
            "trunk.embed",
            ParamGroup::Trunk,
            init_matrix(rng, config.n_goals, config.embed_dim),
        );
        let embed_proj = Linear::new(&mut p, "trunk.embed_proj", ParamGroup::Trunk, config.embed_dim, config.d_e, rng);
        let core_in = 2 * config.d_e;
        let core = match config.core {
            CoreKind::Lstm => Core::Lstm(LstmCell::new(&mut p, "trunk.lstm", ParamGroup::Trunk, core_in, config.hidden, rng)),
            CoreKind::Linear => Core::Linear(Linear::new(&mut p, "trunk.linear", ParamGroup::Trunk, core_in, config.hidden, rng)),
        };
        let (w_q, w_k) = if config.variant == Variant::GaceGdan {
            (
                Some(p.add("trunk.w_q", ParamGroup::Trunk, init_matrix(rng, config.d_q, config.d_v()))),
                Some(p.add("trunk.w_k", ParamGroup::Trunk, init_matrix(rng, config.d_k(), config.d_v()))),
            )
        } else {
            (None, None)
        };
        let heads_in = match config.variant {
            Variant::Base | Variant::Gace => config.hidden + config.d_e,
            Variant::GaceGdan => {
                config.d_v()
                    + match config.gdan_concat {
                        GdanConcat::Recurrent => config.hidden,
                        GdanConcat::Gated => config.d_e,
                    }
            }
            Variant::GaceConcat => config.hidden + config.d_q,
        };
        let mut pw = config.policy_hidden.clone();
        pw.push(config.action.dim());
        let policy = Mlp::new(&mut p, "policy", ParamGroup::PolicyHead, heads_in, &pw, false, rng);
        let mut vw = config.value_hidden.clone();
        vw.push(1);
        let value_in = match config.action {
            ActionSpace::Discrete(_) => heads_in,
            ActionSpace::Continuous(d) => heads_in + d,
        };
        let value = Mlp::new(&mut p, "value", ParamGroup::ValueHead, value_in, &vw, false, rng);
        Ok(Self {
            config,
            params: p,
            encoder,
            disc1,
            disc2,
            embed_table,
            embed_proj,
            core,
            w_q,
            w_k,
            policy,
            value,
        })
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        RecurrentState::zeros(batch, self.config.hidden)
    }

    pub fn state_vars(&self, g: &mut Graph, s: &RecurrentState) -> CoreState {
        CoreState {
            h: g.constant(s.h.clone()),
            c: g.constant(s.c.clone()),
        }
    }

    /// Observation batch `[B, C, H, W]` as a graph input.
    pub fn obs_input(&self, g: &mut Graph, obs: &[&Tensor], requires_grad: bool) -> Result<Var> {
        let [c, h, w] = self.config.obs_shape;
        let stacked = Tensor::stack_rows(obs)?;
        if stacked.cols() != c * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "obs_input",
                lhs: obs[0].shape().to_vec(),
                rhs: self.config.obs_shape.to_vec(),
            });
        }
        let t = stacked.reshape(vec![obs.len(), c, h, w])?;
        Ok(g.input(t, requires_grad))
    }

    /// σ: observation batch → encoding `e` of width `d_e`.
    pub fn encode(&self, g: &mut Graph, obs: Var) -> Result<Var> {
        let expected = self.config.obs_len();
        let got: usize = g.shape(obs)[1..].iter().product();
        if got != expected {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: g.shape(obs).to_vec(),
                rhs: self.config.obs_shape.to_vec(),
            });
        }
        match &self.encoder {
            Encoder::Mlp(mlp) => {
                let x = g.flatten(obs)?;
                mlp.forward(g, x)
            }
            Encoder::Conv { convs, fc } => {
                let b = g.shape(obs)[0];
                let [c, h, w] = self.config.obs_shape;
                let mut x = g.reshape(obs, &[b, c, h, w])?;
                for conv in convs {
                    x = conv.forward(g, x)?;
                    x = g.relu(x)?;
                }
                let x = g.flatten(x)?;
                let y = fc.forward(g, x)?;
                g.relu(y)
            }
        }
    }

    /// First discriminator layer: the query `q`.
    pub fn query(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let z = self.disc1.forward(g, e)?;
        g.relu(z)
    }

    /// d: encoding → class probabilities (clamped below at `eps_clip`) and
    /// the first-layer activation `q`.
    pub fn discriminate(&self, g: &mut Graph, e: Var, eps_clip: f64) -> Result<(Var, Var)> {
        let q = self.query(g, e)?;
        let logits = self.disc2.forward(g, q)?;
        let p = g.softmax(logits)?;
        let p = g.clamp_min(p, eps_clip)?;
        Ok((p, q))
    }

    /// Returns `(M, sigmoid(I'))` with `M = e ⊙ sigmoid(Linear(Embed(z)))`.
    pub fn gated_attention(&self, g: &mut Graph, e: Var, goals: &[usize]) -> Result<(Var, Var)> {
        if let Some(&bad) = goals.iter().find(|&&z| z >= self.config.n_goals) {
            return Err(TensorError::IndexOutOfRange {
                op: "gated_attention",
                index: bad,
                extent: self.config.n_goals,
            });
        }
        let table = g.param(self.embed_table);
        let emb = g.gather_rows(table, goals)?;
        let proj = self.embed_proj.forward(g, emb)?;
        let gate = g.sigmoid(proj)?;
        let m = g.mul(e, gate)?;
        Ok((m, gate))
    }

    /// `u = tanh(q·W_q + k·W_k)`, `h = v ⊙ u`.
    pub fn gdan_attend(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (Some(wq), Some(wk)) = (self.w_q, self.w_k) else {
            return Err(TensorError::InvalidShape {
                op: "gdan_attend",
                shape: vec![],
                reason: "model variant has no attention weights".into(),
            });
        };
        let wq = g.param(wq);
        let wk = g.param(wk);
        let a = g.matmul(q, wq)?;
        let b = g.matmul(k, wk)?;
        let s = g.add(a, b)?;
        let u = g.tanh(s)?;
        let h = g.mul(v, u)?;
        Ok((u, h))
    }

    /// One step of the actor-critic trunk for a batch of observations.
    pub fn features(&self, g: &mut Graph, obs: Var, goals: &[usize], state: CoreState) -> Result<Features> {
        let e = self.encode(g, obs)?;
        self.features_from_encoding(g, e, goals, state)
    }

    pub fn features_from_encoding(&self, g: &mut Graph, e: Var, goals: &[usize], state: CoreState) -> Result<Features> {
        let (m, gate) = self.gated_attention(g, e, goals)?;
        let core_in = g.concat(&[m, gate])?;
        let (core_out, new_state) = match &self.core {
            Core::Lstm(cell) => {
                let (h, c) = cell.forward(g, core_in, state.h, state.c)?;
                (h, CoreState { h, c })
            }
            Core::Linear(lin) => {
                let z = lin.forward(g, core_in)?;
                (g.relu(z)?, state)
            }
        };
        let query = if self.config.variant.uses_query() {
            let q = self.query(g, e)?;
            Some(match self.config.query_grad {
                QueryGrad::Stop => g.detach(q),
                QueryGrad::Flow => q,
            })
        } else {
            None
        };
        let (attention, heads_in) = match self.config.variant {
            Variant::Base | Variant::Gace => (None, g.concat(&[core_out, m])?),
            Variant::GaceConcat => (None, g.concat(&[core_out, query.expect("query")])?),
            Variant::GaceGdan => {
                let q = query.expect("query");
                let dk = self.config.d_k();
                let k = g.slice_cols(core_out, 0, dk)?;
                let v = g.slice_cols(core_out, dk, self.config.hidden)?;
                let (u, h) = self.gdan_attend(g, q, k, v)?;
                let other = match self.config.gdan_concat {
                    GdanConcat::Recurrent => core_out,
                    GdanConcat::Gated => m,
                };
                (Some(AttentionVars { q, k, v, u, h }), g.concat(&[h, other])?)
            }
        };
        Ok(Features {
            e,
            gate,
            m,
            core_out,
            state: new_state,
            query,
            attention,
            heads_in,
        })
    }

    /// Discrete: action logits. Continuous: action in [−1, 1].
    pub fn policy(&self, g: &mut Graph, f: &Features) -> Result<Var> {
        self.policy_from(g, f.heads_in)
    }

    pub fn policy_from(&self, g: &mut Graph, heads_in: Var) -> Result<Var> {
        let out = self.policy.forward(g, heads_in)?;
        match self.config.action {
            ActionSpace::Discrete(_) => Ok(out),
            ActionSpace::Continuous(_) => g.tanh(out),
        }
    }

    /// Discrete: `V(s, I)`. Continuous: `Q(s, a, I)` for the given actions.
    pub fn value(&self, g: &mut Graph, f: &Features, action: Option<Var>) -> Result<Var> {
        self.value_from(g, f.heads_in, action)
    }

    pub fn value_from(&self, g: &mut Graph, heads_in: Var, action: Option<Var>) -> Result<Var> {
        let x = match (self.config.action, action) {
            (ActionSpace::Discrete(_), _) => heads_in,
            (ActionSpace::Continuous(_), Some(a)) => g.concat(&[heads_in, a])?,
            (ActionSpace::Continuous(_), None) => {
                return Err(TensorError::InvalidShape {
                    op: "value",
                    shape: vec![],
                    reason: "continuous critic needs an action".into(),
                })
            }
        };
        self.value.forward(g, x)
    }

    /// Parameters of one of the named parts, for tests and routing checks.
    pub fn group_params(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.group(id) == group).collect()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_params(&mut self, prefix: &str) {
        for id in self.params.ids().collect::<Vec<_>>() {
            if self.params.name(id).starts_with(prefix) {
                self.params.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    pub fn layer_ids(&self) -> LayerIds {
        LayerIds {
            encoder: match &self.encoder {
                Encoder::Mlp(m) => m.layers.iter().map(|l| (l.w, l.b)).collect(),
                Encoder::Conv { .. } => Vec::new(),
            },
            disc: [(self.disc1.w, self.disc1.b), (self.disc2.w, self.disc2.b)],
            embed_table: self.embed_table,
            embed_proj: (self.embed_proj.w, self.embed_proj.b),
            lstm: match &self.core {
                Core::Lstm(c) => Some((c.w_x, c.w_h, c.b)),
                Core::Linear(_) => None,
            },
            core_linear: match &self.core {
                Core::Linear(l) => Some((l.w, l.b)),
                Core::Lstm(_) => None,
            },
            w_q: self.w_q,
            w_k: self.w_k,
            policy: self.policy.layers.iter().map(|l| (l.w, l.b)).collect(),
            value: self.value.layers.iter().map(|l| (l.w, l.b)).collect(),
        }
    }
}

/// Raw parameter handles, exposed so that tests can re-evaluate the network
/// by hand.
#[derive(Debug, Clone)]
pub struct LayerIds {
    pub encoder: Vec<(ParamId, ParamId)>,
    pub disc: [(ParamId, ParamId); 2],
    pub embed_table: ParamId,
    pub embed_proj: (ParamId, ParamId),
    pub lstm: Option<(ParamId, ParamId, ParamId)>,
    pub core_linear: Option<(ParamId, ParamId)>,
    pub w_q: Option<ParamId>,
    pub w_k: Option<ParamId>,
    pub policy: Vec<(ParamId, ParamId)>,
    pub value: Vec<(ParamId, ParamId)>,
}
