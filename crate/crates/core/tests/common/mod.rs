#![allow(dead_code)]
pub mod fd;
pub mod oracle;

use gace_core::nets::{ActionSpace, CoreKind, EncoderKind, GdanConcat, ModelConfig, QueryGrad, Variant};
use gace_core::rng::{from_seed, Rng};
use gace_core::tensor::Tensor;
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    from_seed(seed)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in [0.1, 1], random sign: keeps kinks of relu and
/// clamp out of the finite-difference stencil.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Small model over a `[c, h, w]` observation.
pub fn tiny_model(obs: [usize; 3], action: ActionSpace, variant: Variant, rng: &mut Rng) -> ModelConfig {
    let discrete = matches!(action, ActionSpace::Discrete(_));
    let n_goals = rng.gen_range(2..5);
    ModelConfig {
        obs_shape: obs,
        encoder: EncoderKind::Mlp,
        encoder_hidden: if rng.gen_bool(0.5) { vec![rng.gen_range(3..7)] } else { vec![] },
        conv_channels: vec![],
        d_e: rng.gen_range(3..7),
        n_goals,
        disc_classes: n_goals + usize::from(!discrete && rng.gen_bool(0.5)),
        embed_dim: rng.gen_range(2..5),
        d_q: rng.gen_range(3..6),
        core: if discrete { CoreKind::Lstm } else { CoreKind::Linear },
        hidden: 2 * rng.gen_range(2..4),
        policy_hidden: vec![rng.gen_range(3..6)],
        value_hidden: vec![rng.gen_range(3..6)],
        action,
        variant,
        query_grad: QueryGrad::Stop,
        gdan_concat: if rng.gen_bool(0.5) { GdanConcat::Recurrent } else { GdanConcat::Gated },
    }
}
