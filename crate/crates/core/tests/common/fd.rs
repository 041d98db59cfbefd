//! Finite-difference suites shared by the unit-level tests and the
//! acceptance binary.

use gace_core::gace::{gace_loss, Reduction};
use gace_core::nets::{ActionSpace, EncoderKind, GoalModel, QueryGrad, RecurrentState, Variant};
use gace_core::rng::Rng;
use gace_core::tensor::gradcheck::{check_inputs, check_params};
use gace_core::tensor::{Graph, Result, Tensor, Var};
use rand::Rng as _;

use super::{away_from_zero, rng, tiny_model, uniform};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CONFIGS: u64 = 20;

/// Networks are checked with a smaller step than the primitives: with dozens
/// of relu units some pre-activation occasionally lies within 1e-5 of zero.
pub const NET_STEP: f64 = 1e-6;

pub const VARIANTS: [Variant; 4] = [Variant::Base, Variant::Gace, Variant::GaceGdan, Variant::GaceConcat];

/// Turns any output into a scalar through fixed random weights, so every
/// output entry contributes to the checked gradient.
pub fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut rng(seed ^ 0xabcd), g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Inputs = Box<dyn Fn(&mut Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Graph, &[Var], u64) -> Result<Var>>;

pub struct Primitive {
    pub name: &'static str,
    inputs: Inputs,
    build: Build,
}

impl Primitive {
    fn new(
        name: &'static str,
        inputs: impl Fn(&mut Rng) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Graph, &[Var], u64) -> Result<Var> + 'static,
    ) -> Self {
        Primitive {
            name,
            inputs: Box::new(inputs),
            build: Box::new(build),
        }
    }

    /// Worst relative error over the random configurations, and how many
    /// entries were checked.
    pub fn max_error(&self) -> (f64, usize) {
        let mut worst = (0.0f64, 0);
        for cfg in 0..CONFIGS {
            let mut r = rng(1000 + cfg);
            let xs = (self.inputs)(&mut r);
            let res = check_inputs(&xs, |g, v| (self.build)(g, v, cfg), STEP).unwrap();
            worst = (worst.0.max(res.max_rel_error), worst.1 + res.checked);
        }
        worst
    }
}

fn dims(r: &mut Rng) -> (usize, usize) {
    (r.gen_range(1..5), r.gen_range(1..6))
}

fn matrix(r: &mut Rng) -> Vec<Tensor> {
    let (m, n) = dims(r);
    vec![uniform(r, &[m, n], -1.0, 1.0)]
}

/// Every differentiable primitive, each wrapped so its output reduces to a
/// scalar.
pub fn primitives() -> Vec<Primitive> {
    type Bin = fn(&mut Graph, Var, Var) -> Result<Var>;
    type Un = fn(&mut Graph, Var) -> Result<Var>;
    let mut out = vec![Primitive::new(
        "matmul",
        |r| {
            let (m, k) = dims(r);
            let n = r.gen_range(1..5);
            vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)]
        },
        |g, v, s| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, s)
        },
    )];

    let binary: [(&'static str, Bin); 3] =
        [("add", |g, a, b| g.add(a, b)), ("sub", |g, a, b| g.sub(a, b)), ("mul", |g, a, b| g.mul(a, b))];
    for (name, op) in binary {
        out.push(Primitive::new(
            name,
            |r| {
                let (m, n) = dims(r);
                vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)]
            },
            move |g, v, s| {
                let y = op(g, v[0], v[1])?;
                weighted(g, y, s)
            },
        ));
    }
    out.push(Primitive::new(
        "add_row",
        |r| {
            let (m, n) = dims(r);
            vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[1, n], -1.0, 1.0)]
        },
        |g, v, s| {
            let y = g.add_row(v[0], v[1])?;
            weighted(g, y, s)
        },
    ));
    out.push(Primitive::new("scale", matrix, |g, v, s| {
        let y = g.scale(v[0], -1.7 + s as f64 * 0.3)?;
        weighted(g, y, s)
    }));

    let unary: [(&'static str, Un); 7] = [
        ("relu", |g, a| g.relu(a)),
        ("tanh", |g, a| g.tanh(a)),
        ("sigmoid", |g, a| g.sigmoid(a)),
        ("exp", |g, a| g.exp(a)),
        ("square", |g, a| g.square(a)),
        ("flatten", |g, a| g.flatten(a)),
        ("clamp_min", |g, a| g.clamp_min(a, 0.0)),
    ];
    for (name, op) in unary {
        out.push(Primitive::new(
            name,
            |r| {
                let (m, n) = dims(r);
                vec![away_from_zero(r, &[m, n])]
            },
            move |g, v, s| {
                let y = op(g, v[0])?;
                weighted(g, y, s)
            },
        ));
    }
    out.push(Primitive::new(
        "log",
        |r| {
            let (m, n) = dims(r);
            vec![uniform(r, &[m, n], 0.2, 3.0)]
        },
        |g, v, s| {
            let y = g.log(v[0])?;
            weighted(g, y, s)
        },
    ));

    let logits = |r: &mut Rng| {
        let (m, n) = dims(r);
        vec![uniform(r, &[m, n + 1], -2.0, 2.0)]
    };
    out.push(Primitive::new("softmax", logits, |g, v, s| {
        let y = g.softmax(v[0])?;
        weighted(g, y, s)
    }));
    out.push(Primitive::new("log_softmax", logits, |g, v, s| {
        let y = g.log_softmax(v[0])?;
        weighted(g, y, s)
    }));

    out.push(Primitive::new(
        "concat",
        |r| {
            let m = r.gen_range(1..4);
            (0..r.gen_range(1..4))
                .map(|_| {
                    let n = r.gen_range(1..4);
                    uniform(r, &[m, n], -1.0, 1.0)
                })
                .collect()
        },
        |g, v, s| {
            let y = g.concat(v)?;
            weighted(g, y, s)
        },
    ));
    out.push(Primitive::new(
        "slice_cols",
        |r| {
            let (m, n) = dims(r);
            vec![uniform(r, &[m, n + 2], -1.0, 1.0)]
        },
        |g, v, s| {
            let n = g.shape(v[0])[1];
            let start = s as usize % (n - 1);
            let y = g.slice_cols(v[0], start, n)?;
            weighted(g, y, s)
        },
    ));
    out.push(Primitive::new(
        "reshape",
        |r| {
            let (m, n) = dims(r);
            vec![uniform(r, &[m, n, 2], -1.0, 1.0)]
        },
        |g, v, s| {
            let sh = g.shape(v[0]).to_vec();
            let y = g.reshape(v[0], &[sh[0] * sh[1], 2])?;
            weighted(g, y, s)
        },
    ));

    out.push(Primitive::new("sum", matrix, |g, v, _| {
        let y = g.square(v[0])?;
        g.sum(y)
    }));
    out.push(Primitive::new("mean", matrix, |g, v, _| {
        let y = g.square(v[0])?;
        g.mean(y)
    }));
    out.push(Primitive::new("sum_cols", matrix, |g, v, s| {
        let y = g.sum_cols(v[0])?;
        weighted(g, y, s)
    }));

    out.push(Primitive::new("pick", matrix, |g, v, s| {
        let [m, n] = [g.shape(v[0])[0], g.shape(v[0])[1]];
        let idx: Vec<usize> = (0..m).map(|i| (i + s as usize) % n).collect();
        let y = g.pick(v[0], &idx)?;
        weighted(g, y, s)
    }));
    out.push(Primitive::new("gather_rows", matrix, |g, v, s| {
        let m = g.shape(v[0])[0];
        // repeated rows exercise gradient accumulation
        let idx: Vec<usize> = (0..m + 2).map(|i| (i * 7 + s as usize) % m).collect();
        let y = g.gather_rows(v[0], &idx)?;
        weighted(g, y, s)
    }));

    out.push(Primitive::new(
        "conv2d",
        |r| {
            let n = r.gen_range(1..3);
            let c = r.gen_range(1..3);
            let o = r.gen_range(1..3);
            let h = r.gen_range(3..6);
            let w = r.gen_range(3..6);
            vec![
                uniform(r, &[n, c, h, w], -1.0, 1.0),
                uniform(r, &[o, c, 3, 3], -1.0, 1.0),
                uniform(r, &[o], -1.0, 1.0),
            ]
        },
        |g, v, s| {
            let stride = 1 + s as usize % 2;
            let pad = (s as usize / 2) % 2;
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted(g, y, s)
        },
    ));
    out
}

pub fn random_state(r: &mut Rng, batch: usize, hidden: usize) -> RecurrentState {
    RecurrentState {
        h: uniform(r, &[batch, hidden], -0.5, 0.5),
        c: uniform(r, &[batch, hidden], -0.5, 0.5),
    }
}

/// Two recurrent steps of the full model, with every head and the
/// discriminator feeding one scalar.
pub fn two_step_loss(
    g: &mut Graph,
    m: &GoalModel,
    obs: &[Tensor],
    goals: &[usize],
    state: &RecurrentState,
    seed: u64,
) -> Result<Var> {
    let b = goals.len();
    let mut st = m.state_vars(g, state);
    let mut terms = Vec::new();
    for (t, step_obs) in obs.chunks(b).enumerate() {
        let refs: Vec<&Tensor> = step_obs.iter().collect();
        let x = m.obs_input(g, &refs, false)?;
        let f = m.features(g, x, goals, st)?;
        let pi = m.policy(g, &f)?;
        terms.push(weighted(g, pi, seed + 10 * t as u64)?);
        let v = match m.config.action {
            ActionSpace::Discrete(_) => m.value(g, &f, None)?,
            ActionSpace::Continuous(_) => m.value(g, &f, Some(pi))?,
        };
        terms.push(weighted(g, v, seed + 10 * t as u64 + 1)?);
        let (p, _) = m.discriminate(g, f.e, 1e-8)?;
        let labels: Vec<usize> = (0..b).map(|i| (i + t) % m.config.disc_classes).collect();
        terms.push(gace_loss(g, p, &labels, 1e-8, Reduction::Sum)?);
        st = f.state;
    }
    let mut acc = terms[0];
    for &x in &terms[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

pub struct NetworkCheck {
    pub variant: Variant,
    pub config: u64,
    /// All parameters, query gradient flowing.
    pub flow: f64,
    /// Actor-critic parameters only, query gradient stopped.
    pub stop: f64,
}

/// Checks every variant over 20 random small models.
pub fn network_checks(action: ActionSpace, obs_shape: [usize; 3], conv: bool) -> Vec<NetworkCheck> {
    let mut out = Vec::new();
    for variant in VARIANTS {
        for cfg in 0..CONFIGS {
            let mut r = rng(7000 + cfg + 100 * variant as u64);
            let mut mc = tiny_model(obs_shape, action, variant, &mut r);
            mc.query_grad = QueryGrad::Flow;
            if conv {
                mc.encoder = EncoderKind::Conv;
                mc.conv_channels = vec![2, 3];
            }
            let m = GoalModel::new(mc.clone(), &mut r).unwrap();
            let b = 2;
            let obs: Vec<Tensor> = (0..2 * b).map(|_| uniform(&mut r, &obs_shape, 0.0, 1.0)).collect();
            let goals: Vec<usize> = (0..b).map(|_| r.gen_range(0..mc.n_goals)).collect();
            let state = random_state(&mut r, b, mc.hidden);
            let f = |g: &mut Graph| two_step_loss(g, &m, &obs, &goals, &state, cfg);
            let flow = check_params(&m.params, |_| true, 4, f, NET_STEP).unwrap().max_rel_error;
            // with the stop-gradient at q, only the parameters the query
            // does not depend on are checked
            let mut stop = m.clone();
            stop.config.query_grad = QueryGrad::Stop;
            let f = |g: &mut Graph| two_step_loss(g, &stop, &obs, &goals, &state, cfg);
            let stop_err = check_params(&stop.params, |id| stop.params.group(id).is_actor_critic(), 4, f, NET_STEP)
                .unwrap()
                .max_rel_error;
            out.push(NetworkCheck {
                variant,
                config: cfg,
                flow,
                stop: stop_err,
            });
        }
    }
    out
}
