//! Independent scalar re-computations of the two training losses.

use gace_core::agents::{a2c_loss, collect_rollout, TrainConfig};
use gace_core::envs::{Action, MultiTargetEnv, TaskFamily, TaskId};
use gace_core::gace::{gace_loss, Reduction};
use gace_core::nets::{GoalModel, RecurrentState, Variant};
use gace_core::rng::{derive_seed, Rng};
use gace_core::tensor::{Graph, Tensor};
use rand::Rng as _;

use super::{rng, tiny_model};

/// Random probability rows; a few entries pushed below the clamp.
pub fn prob_rows(r: &mut Rng, m: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(m * k);
    for _ in 0..m {
        let mut row: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..1.0f64).powi(3)).collect();
        if r.gen_bool(0.2) {
            row[r.gen_range(0..k)] = 1e-12;
        }
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![m, k], data).unwrap()
}

/// Worst error of the sum and mean reductions against a scalar loop, scaled
/// by max(1, |loss|).
pub fn gace_loss_error(batches: usize) -> f64 {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let m = r.gen_range(1..64);
        let k = r.gen_range(2..7);
        let p = prob_rows(&mut r, m, k);
        let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..k)).collect();
        let eps = 1e-8;
        let mut want = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            for c in 0..k {
                let one_hot = if c == label { 1.0 } else { 0.0 };
                let g = p.data()[i * k + c];
                want -= one_hot * (if g > eps { g } else { eps }).ln();
            }
        }
        let mut g = Graph::standalone();
        let pv = g.constant(p);
        let sum = gace_loss(&mut g, pv, &labels, eps, Reduction::Sum).unwrap();
        let mean = gace_loss(&mut g, pv, &labels, eps, Reduction::Mean).unwrap();
        let scale = want.abs().max(1.0);
        worst = worst
            .max((g.value(sum).item() - want).abs() / scale)
            .max((g.value(mean).item() - want / m as f64).abs() / scale);
    }
    worst
}

/// Worst deviation of `gace_loss` from ln K on uniform predictions.
pub fn uniform_ln_k_error() -> f64 {
    let mut worst = 0.0f64;
    for k in 2..12 {
        for m in [1, 7] {
            let mut g = Graph::standalone();
            let p = g.constant(Tensor::full(vec![m, k], 1.0 / k as f64));
            let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
            let l = gace_loss(&mut g, p, &labels, 1e-8, Reduction::Mean).unwrap();
            worst = worst.max((g.value(l).item() - (k as f64).ln()).abs());
        }
    }
    worst
}

pub fn nav_model(variant: Variant, seed: u64) -> GoalModel {
    let env = TaskId::seen(TaskFamily::G1).env_config().build().unwrap();
    let mut r = rng(seed);
    let mut cfg = tiny_model(env.obs_shape(), env.action_space(), variant, &mut r);
    cfg.n_goals = env.n_goals();
    cfg.disc_classes = env.n_goals();
    GoalModel::new(cfg, &mut r).unwrap()
}

pub fn g1_envs(n: usize) -> Vec<Box<dyn MultiTargetEnv>> {
    (0..n).map(|_| TaskId::seen(TaskFamily::G1).env_config().build().unwrap()).collect()
}

/// Replays one episode at batch size 1, carrying the recurrent state by hand.
pub fn replay_episode(model: &GoalModel, seed: u64, actions: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut env = TaskId::seen(TaskFamily::G1).env_config().build().unwrap();
    let (mut obs, goal) = env.reset(seed).unwrap();
    let mut state = RecurrentState::zeros(1, model.config.hidden);
    let (mut lps, mut vals, mut rews) = (Vec::new(), Vec::new(), Vec::new());
    for &a in actions {
        let mut g = Graph::inference(&model.params);
        let x = model.obs_input(&mut g, &[&obs], false).unwrap();
        let st = model.state_vars(&mut g, &state);
        let f = model.features(&mut g, x, &[goal], st).unwrap();
        let logits = model.policy(&mut g, &f).unwrap();
        let v = model.value(&mut g, &f, None).unwrap();
        let z = g.value(logits).data().to_vec();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        lps.push(z.iter().map(|x| x - lse).collect());
        vals.push(g.value(v).item());
        state = RecurrentState {
            h: g.value(f.state.h).clone(),
            c: g.value(f.state.c).clone(),
        };
        let res = env.step(&Action::Discrete(a)).unwrap();
        rews.push(res.reward);
        obs = res.observation;
    }
    (lps, vals, rews)
}

/// Worst relative error of every A2C loss term against a per-step replay,
/// over `cases` rollouts cycling through the variants.
pub fn a2c_loss_error(cases: u64) -> f64 {
    let variants = [Variant::Base, Variant::Gace, Variant::GaceConcat, Variant::GaceGdan];
    let mut worst = 0.0f64;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs() / want.abs().max(1.0));
    for case in 0..cases {
        let model = nav_model(variants[case as usize % 4], 40 + case);
        let n = 1 + case as usize % 3;
        let mut envs = g1_envs(n);
        let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(case, "oracle", i)).collect();
        let cfg = TrainConfig {
            entropy_coef: 0.01 * (case % 5 + 1) as f64,
            value_coef: 0.5,
            ..TrainConfig::default()
        };
        let mut g = Graph::new(&model.params);
        let (rollout, steps) = collect_rollout(&mut g, &model, &mut envs, &seeds, &mut rng(case)).unwrap();
        let loss = a2c_loss(&mut g, &steps, &rollout, &cfg).unwrap();

        let (mut pg, mut ent, mut lv, mut count) = (0.0, 0.0, 0.0, 0usize);
        for ep in &rollout.episodes {
            let (lps, vals, rews) = replay_episode(&model, ep.seed, &ep.actions);
            assert_eq!(rews, ep.rewards);
            let tlen = rews.len();
            for t in 0..tlen {
                note(ep.values[t], vals[t]);
                note(ep.log_probs[t], lps[t][ep.actions[t]]);
                let ret: f64 = (t..tlen).map(|k| cfg.gamma.powi((k - t) as i32) * rews[k]).sum();
                let adv = ret - vals[t];
                pg += lps[t][ep.actions[t]] * adv;
                ent += -lps[t].iter().map(|l| l.exp() * l).sum::<f64>();
                lv += adv * adv;
                count += 1;
            }
        }
        let lp = -pg - cfg.entropy_coef * ent;
        note(loss.policy, lp);
        note(loss.value, lv);
        note(loss.entropy, ent / count as f64);
        note(g.value(loss.total).item(), lp + cfg.value_coef * lv);
    }
    worst
}
