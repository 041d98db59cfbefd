mod common;

use std::sync::Arc;

use common::oracle::{gace_loss_error, prob_rows, uniform_ln_k_error};
use common::{rng, tiny_model, uniform};
use gace_core::evalkit::discriminator_accuracy;
use gace_core::gace::{batch_loss, gace_loss, gace_update_step, total_loss, GaceConfig, Reduction};
use gace_core::goal_storage::{GoalRecord, GoalStore, StoreConfig};
use gace_core::nets::{ActionSpace, GoalModel, Variant};
use gace_core::tensor::{Adam, AdamConfig, Graph, ParamGroup, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn loss_matches_scalar_loop_on_1000_batches() {
    let err = gace_loss_error(1000);
    assert!(err <= 1e-12, "{err}");
}

#[test]
fn uniform_prediction_is_ln_k() {
    assert!(uniform_ln_k_error() <= 1e-9);
    let mut g = Graph::standalone();
    let p = g.constant(Tensor::full(vec![7, 3], 1.0 / 3.0));
    assert!(gace_loss(&mut g, p, &[0], 1e-8, Reduction::Sum).is_err(), "batch and label counts differ");
}

#[test]
fn perfect_prediction_is_near_zero() {
    let k = 4;
    let eps = 1e-8;
    let labels = [0, 3, 1, 1, 2];
    let mut data = vec![0.0; labels.len() * k];
    for (i, &z) in labels.iter().enumerate() {
        data[i * k + z] = 1.0;
    }
    let mut g = Graph::standalone();
    let p = g.constant(Tensor::new(vec![labels.len(), k], data).unwrap());
    let l = gace_loss(&mut g, p, &labels, eps, Reduction::Sum).unwrap();
    let bound = labels.len() as f64 * (1.0 - (k as f64 - 1.0) * eps).ln().abs();
    assert!(g.value(l).item() >= 0.0 && g.value(l).item() <= bound + 1e-15);
}

#[test]
fn gradient_wrt_probabilities() {
    let mut r = rng(2);
    let p = prob_rows(&mut r, 6, 4);
    let labels = [0, 1, 2, 3, 0, 1];
    let mut g = Graph::standalone();
    let pv = g.input(p.clone(), true);
    let l = gace_loss(&mut g, pv, &labels, 1e-8, Reduction::Sum).unwrap();
    let d = g.backward(l).unwrap().wrt(pv);
    for (i, &label) in labels.iter().enumerate() {
        for c in 0..4 {
            let x = p.data()[i * 4 + c];
            let want = if c == label && x > 1e-8 { -1.0 / x } else { 0.0 };
            assert!((d.data()[i * 4 + c] - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }
}

#[test]
fn total_loss_arithmetic_and_rejection() {
    let mut g = Graph::standalone();
    let a = g.constant(Tensor::scalar(1.0));
    let b = g.constant(Tensor::scalar(2.0));
    let t = total_loss(&mut g, a, b, 0.5).unwrap();
    assert_eq!(g.value(t).item(), 2.0);
    let t0 = total_loss(&mut g, a, b, 0.0).unwrap();
    assert_eq!(g.value(t0).item(), 1.0);
    g.set_strict(false);
    let nan = g.constant(Tensor::scalar(f64::NAN));
    assert!(total_loss(&mut g, a, nan, 0.5).is_err());
    assert!(total_loss(&mut g, a, b, f64::INFINITY).is_err());
}

/// Toy store: class 0 lights the left half of a 1×2×2 frame, class 1 the
/// right half, with noise.
fn toy_store(seed: u64, n: usize) -> GoalStore {
    let mut s = GoalStore::new(
        StoreConfig {
            capacity: 1000,
            n_goals: 2,
            eps_negative: 0.0,
        },
        rng(seed),
    );
    let mut r = rng(seed + 1);
    for i in 0..n {
        let label = i % 2;
        let mut d: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..0.3)).collect();
        let cols = if label == 0 { [0, 2] } else { [1, 3] };
        for c in cols {
            d[c] += 0.7;
        }
        s.push(GoalRecord {
            state: Arc::new(Tensor::new(vec![1, 2, 2], d).unwrap()),
            label,
            episode: i as u64,
        });
    }
    s
}

fn toy_model(seed: u64) -> GoalModel {
    let mut r = rng(seed);
    let mut mc = tiny_model([1, 2, 2], ActionSpace::Discrete(3), Variant::Gace, &mut r);
    mc.n_goals = 2;
    mc.disc_classes = 2;
    mc.encoder_hidden = vec![];
    mc.d_e = 6;
    GoalModel::new(mc, &mut r).unwrap()
}

fn adam(m: &GoalModel, lr: f64) -> Adam {
    Adam::new(
        &m.params,
        AdamConfig {
            lr,
            ..Default::default()
        },
    )
}

#[test]
fn update_step_routes_only_to_encoder_and_discriminator() {
    let mut store = toy_store(3, 40);
    let mut m = toy_model(4);
    let mut opt = adam(&m, 1e-2);
    let cfg = GaceConfig {
        batch: 16,
        ..Default::default()
    };
    let f_before = m.params.snapshot_group(|g| g.is_actor_critic());
    let goal_before = m.params.snapshot_group(|g| g.is_goal_path());
    for i in 0..5 {
        gace_update_step(&mut store, &mut m, &mut opt, &cfg, i, 10.0).unwrap().unwrap();
    }
    assert_eq!(m.params.snapshot_group(|g| g.is_actor_critic()), f_before);
    assert_ne!(m.params.snapshot_group(|g| g.is_goal_path()), goal_before);
}

#[test]
fn gace_gradient_is_zero_on_actor_critic() {
    let store = toy_store(5, 20);
    let m = toy_model(6);
    let recs: Vec<GoalRecord> = store.records().cloned().collect();
    let mut g = Graph::new(&m.params);
    let (l, _) = batch_loss(&mut g, &m, &recs, &GaceConfig::default()).unwrap();
    let grads = g.backward(l).unwrap();
    for id in m.params.ids() {
        let nz = grads.param(id).is_some_and(|t| t.data().iter().any(|&x| x != 0.0));
        assert_eq!(nz, m.params.group(id).is_goal_path(), "{}", m.params.name(id));
    }
}

#[test]
fn toy_store_is_learned_to_95_percent() {
    let mut store = toy_store(7, 60);
    let mut m = toy_model(8);
    let mut opt = adam(&m, 1e-2);
    let cfg = GaceConfig {
        batch: 16,
        ..Default::default()
    };
    for i in 0..200 {
        gace_update_step(&mut store, &mut m, &mut opt, &cfg, i, 10.0).unwrap();
    }
    let acc = discriminator_accuracy(&m, store.records(), cfg.eps_clip).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn freeze_stops_updates() {
    let mut store = toy_store(9, 40);
    let mut m = toy_model(10);
    let mut opt = adam(&m, 1e-2);
    let cfg = GaceConfig {
        batch: 8,
        freeze_after: Some(10),
        ..Default::default()
    };
    for i in 0..10 {
        assert!(gace_update_step(&mut store, &mut m, &mut opt, &cfg, i, 10.0).unwrap().is_some());
    }
    let snap = m.params.snapshot_group(|_| true);
    for i in 10..20 {
        assert!(gace_update_step(&mut store, &mut m, &mut opt, &cfg, i, 10.0).unwrap().is_none());
    }
    assert_eq!(m.params.snapshot_group(|_| true), snap);
}

#[test]
fn insufficient_store_is_an_error() {
    let mut store = toy_store(11, 3);
    let mut m = toy_model(12);
    let mut opt = adam(&m, 1e-2);
    let cfg = GaceConfig {
        batch: 4,
        ..Default::default()
    };
    assert!(gace_update_step(&mut store, &mut m, &mut opt, &cfg, 0, 10.0).is_err());
}

#[test]
fn loss_decreases_monotonically_on_a_toy_store() {
    let mut monotone = 0;
    for seed in 0..5 {
        let mut store = toy_store(100 + seed, 40);
        let all: Vec<GoalRecord> = store.records().cloned().collect();
        let mut m = toy_model(200 + seed);
        let mut opt = adam(&m, 2e-3);
        let cfg = GaceConfig {
            batch: 40,
            ..Default::default()
        };
        let full_loss = |m: &GoalModel| {
            let mut g = Graph::inference(&m.params);
            let (l, _) = batch_loss(&mut g, m, &all, &cfg).unwrap();
            g.value(l).item()
        };
        let mut prev = full_loss(&m);
        let mut ok = true;
        for i in 0..50 {
            gace_update_step(&mut store, &mut m, &mut opt, &cfg, i, 10.0).unwrap();
            let now = full_loss(&m);
            ok &= now < prev;
            prev = now;
        }
        monotone += usize::from(ok);
    }
    assert!(monotone >= 4, "{monotone}/5 seeds monotone");
}

#[test]
fn total_loss_gradient_is_sum_of_parts() {
    let mut r = rng(13);
    let store = toy_store(14, 10);
    let recs: Vec<GoalRecord> = store.records().cloned().collect();
    let m = toy_model(15);
    let obs = uniform(&mut r, &[1, 2, 2], 0.0, 1.0);
    let eta = 0.5;
    let rl = |g: &mut Graph| {
        let x = m.obs_input(g, &[&obs], false).unwrap();
        let st = m.state_vars(g, &m.zero_state(1));
        let f = m.features(g, x, &[1], st).unwrap();
        let v = m.value(g, &f, None).unwrap();
        let pi = m.policy(g, &f).unwrap();
        let a = g.sum(pi).unwrap();
        let b = g.sum(v).unwrap();
        g.add(a, b).unwrap()
    };
    let cfg = GaceConfig::default();
    let combined = {
        let mut g = Graph::new(&m.params);
        let a = rl(&mut g);
        let (b, _) = batch_loss(&mut g, &m, &recs, &cfg).unwrap();
        let t = total_loss(&mut g, a, b, eta).unwrap();
        g.backward(t).unwrap()
    };
    let g_rl = {
        let mut g = Graph::new(&m.params);
        let a = rl(&mut g);
        g.backward(a).unwrap()
    };
    let g_gace = {
        let mut g = Graph::new(&m.params);
        let (b, _) = batch_loss(&mut g, &m, &recs, &cfg).unwrap();
        g.backward(b).unwrap()
    };
    for id in m.group_params(ParamGroup::Encoder) {
        let c = combined.param(id).unwrap();
        let a = g_rl.param(id).unwrap();
        let b = g_gace.param(id).unwrap();
        for i in 0..c.len() {
            let want = a.data()[i] + eta * b.data()[i];
            assert!((c.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), m in 1usize..20, k in 2usize..6) {
        let mut r = rng(seed);
        let p = prob_rows(&mut r, m, k);
        let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..k)).collect();
        let mut g = Graph::standalone();
        let pv = g.constant(p);
        let l = gace_loss(&mut g, pv, &labels, 1e-8, Reduction::Sum).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }
}
