mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::{rng, tiny_model, uniform};
use gace_core::envs::{
    Action, EnvError, Layout, MultiTargetEnv, ObjectCells, Outcome, Rewards, StepResult, TaskFamily, TaskId,
};
use gace_core::evalkit::{
    discriminator_accuracy, episode_outcomes, model_success_ratio, perturbation_saliency, saliency_map, srr_sei,
    success_ratio, value_discrimination, EvalError, GreedyPolicy, Head, Policy,
};
use gace_core::goal_storage::GoalRecord;
use gace_core::nets::{ActionSpace, GoalModel, Variant};
use gace_core::rng::Rng;
use gace_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

struct Constant(Action);

impl Policy for Constant {
    fn begin(&mut self, _goal: usize) {}
    fn act(&mut self, _obs: &Tensor, _goal: usize) -> Result<Action, EvalError> {
        Ok(self.0.clone())
    }
}

/// The only target sits in front of the agent: any first move reaches it.
struct OneTarget {
    done: bool,
}

impl MultiTargetEnv for OneTarget {
    fn reset(&mut self, _seed: u64) -> Result<(Tensor, usize), EnvError> {
        self.done = false;
        Ok((self.render(), 0))
    }
    fn step(&mut self, _action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        self.done = true;
        Ok(StepResult {
            observation: self.render(),
            reward: Rewards::navigation().for_outcome(Outcome::Success),
            done: true,
            outcome: Outcome::Success,
        })
    }
    fn render(&self) -> Tensor {
        Tensor::zeros(vec![1, 1, 1])
    }
    fn obs_shape(&self) -> [usize; 3] {
        [1, 1, 1]
    }
    fn n_goals(&self) -> usize {
        1
    }
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }
    fn max_steps(&self) -> usize {
        1
    }
    fn goal(&self) -> usize {
        0
    }
    fn steps_taken(&self) -> usize {
        usize::from(self.done)
    }
    fn rewards(&self) -> Rewards {
        Rewards::navigation()
    }
    fn layout(&self) -> Option<Layout> {
        None
    }
    fn object_cells(&self) -> ObjectCells {
        ObjectCells::default()
    }
    fn random_action(&self, _rng: &mut Rng) -> Action {
        Action::Discrete(0)
    }
}

#[test]
fn success_ratio_trivial_policies() {
    let mut env = OneTarget { done: false };
    assert_eq!(success_ratio(&mut Constant(Action::Discrete(0)), &mut env, 50, 0).unwrap(), 1.0);

    // turning in place never moves the agent
    let mut g1 = TaskId::seen(TaskFamily::G1).env_config().build().unwrap();
    let outcomes = episode_outcomes(&mut Constant(Action::Discrete(1)), g1.as_mut(), 40, 3).unwrap();
    assert!(outcomes.iter().all(|&o| o == Outcome::Timeout));
    assert_eq!(success_ratio(&mut Constant(Action::Discrete(2)), g1.as_mut(), 40, 3).unwrap(), 0.0);

    assert!(matches!(success_ratio(&mut Constant(Action::Discrete(0)), &mut env, 0, 0), Err(EvalError::NoEpisodes)));
}

fn g1_model(variant: Variant, seed: u64) -> GoalModel {
    let env = TaskId::seen(TaskFamily::G1).env_config().build().unwrap();
    let mut r = rng(seed);
    let mut cfg = tiny_model(env.obs_shape(), env.action_space(), variant, &mut r);
    cfg.n_goals = 4;
    cfg.disc_classes = 4;
    GoalModel::new(cfg, &mut r).unwrap()
}

#[test]
fn episode_outcomes_do_not_depend_on_order() {
    let model = g1_model(Variant::Gace, 4);
    let mut env = TaskId::seen(TaskFamily::G1).env_config().build().unwrap();
    let long = episode_outcomes(&mut GreedyPolicy::new(&model), env.as_mut(), 30, 9).unwrap();
    let short = episode_outcomes(&mut GreedyPolicy::new(&model), env.as_mut(), 12, 9).unwrap();
    assert_eq!(&long[..12], &short[..]);
    let ratio = model_success_ratio(&model, &TaskId::seen(TaskFamily::G1).env_config(), 30, 9).unwrap();
    let want = long.iter().filter(|&&o| o == Outcome::Success).count() as f64 / 30.0;
    assert_eq!(ratio, want);
}

#[test]
fn srr_sei_table_rows() {
    for (n_a, n_b, srr, sei) in [(2_000_000.0, 163_602.0, 8.18, 1122.48), (314_797.0, 53_774.0, 17.08, 485.41)] {
        let (s, e) = srr_sei(n_a, n_b).unwrap();
        assert!((s - srr).abs() < 0.005, "{s}");
        assert!((e - sei).abs() < 0.005, "{e}");
    }
    assert_eq!(srr_sei(7.0, 7.0).unwrap(), (100.0, 0.0));
    for (a, b) in [(0.0, 1.0), (1.0, 0.0), (-3.0, 2.0), (f64::NAN, 1.0), (f64::INFINITY, 1.0)] {
        assert!(matches!(srr_sei(a, b), Err(EvalError::BadCounts(..))));
    }
}

proptest! {
    #[test]
    fn sei_follows_from_srr(n_a in 1.0f64..1e8, n_b in 1.0f64..1e8) {
        let (srr, sei) = srr_sei(n_a, n_b).unwrap();
        let want = 100.0 * (100.0 / srr - 1.0);
        prop_assert!((sei - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn saliency_max_is_one_unless_zero(seed in 0u64..1000) {
        let model = g1_model(Variant::GaceGdan, seed);
        let mut r = rng(seed);
        let obs = uniform(&mut r, &model.config.obs_shape, 0.0, 1.0);
        for head in [Head::Policy, Head::Value] {
            let m = saliency_map(&model, &obs, r.gen_range(0..4), &model.zero_state(1), head).unwrap();
            let max = m.values.iter().cloned().fold(0.0, f64::max);
            prop_assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(max == 1.0 || m.values.iter().all(|&v| v == 0.0));
        }
    }
}

fn records(r: &mut Rng, shape: &[usize], n: usize, labels: impl Fn(usize, &mut Rng) -> usize) -> Vec<GoalRecord> {
    (0..n)
        .map(|i| GoalRecord {
            state: Arc::new(uniform(r, shape, 0.0, 1.0)),
            label: labels(i, r),
            episode: i as u64,
        })
        .collect()
}

#[test]
fn uniform_discriminator_accuracy_is_chance() {
    let mut model = g1_model(Variant::Gace, 1);
    model.zero_params("disc");
    let mut r = rng(2);
    let shape = model.config.obs_shape;
    let n = 400;
    let recs = records(&mut r, &shape, n, |_, r| r.gen_range(0..4));
    let acc = discriminator_accuracy(&model, &recs, 1e-6).unwrap();
    // ties go to class 0, so accuracy is the share of label 0
    let zeros = recs.iter().filter(|x| x.label == 0).count() as f64 / n as f64;
    assert_eq!(acc, zeros);
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "{acc}");

    let one = records(&mut r, &shape, 1, |_, _| 0);
    assert_eq!(discriminator_accuracy(&model, &one, 1e-6).unwrap(), 1.0);
    assert!(matches!(discriminator_accuracy(&model, &[], 1e-6), Err(EvalError::EmptyStore)));
}

#[test]
fn value_discrimination_needs_two_classes() {
    let model = g1_model(Variant::Gace, 6);
    let mut r = rng(3);
    let shape = model.config.obs_shape;
    let one_class = records(&mut r, &shape, 5, |_, _| 2);
    let refs: Vec<&GoalRecord> = one_class.iter().collect();
    assert!(value_discrimination(&model, &refs, 10, &mut r).is_err());
    let mixed = records(&mut r, &shape, 20, |i, _| i % 4);
    let refs: Vec<&GoalRecord> = mixed.iter().collect();
    let v = value_discrimination(&model, &refs, 200, &mut r).unwrap();
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn zero_weight_model_has_zero_saliency() {
    let mut model = g1_model(Variant::Gace, 5);
    for id in model.params.ids().collect::<Vec<_>>() {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    let obs = uniform(&mut rng(1), &model.config.obs_shape, 0.0, 1.0);
    for head in [Head::Policy, Head::Value] {
        let m = saliency_map(&model, &obs, 1, &model.zero_state(1), head).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cut_input_cell_has_zero_saliency() {
    let mut model = g1_model(Variant::Base, 7);
    let [c, h, w] = model.config.obs_shape;
    let cell = h * w / 2 + 1;
    let first = model.params.find("encoder.0.w").unwrap();
    let cols = model.params.get(first).cols();
    for ch in 0..c {
        let row = ch * h * w + cell;
        model.params.get_mut(first).data_mut()[row * cols..(row + 1) * cols].fill(0.0);
    }
    let obs = uniform(&mut rng(8), &model.config.obs_shape, 0.0, 1.0);
    for head in [Head::Policy, Head::Value] {
        let m = saliency_map(&model, &obs, 0, &model.zero_state(1), head).unwrap();
        assert_eq!(m.values[cell], 0.0);
        assert!(m.values.iter().any(|&v| v > 0.0));
    }
}

#[test]
fn gradient_saliency_agrees_with_perturbation() {
    for seed in 0..6 {
        let variant = [Variant::Base, Variant::Gace, Variant::GaceGdan][seed as usize % 3];
        let model = g1_model(variant, 100 + seed);
        let mut r = rng(seed);
        let obs = uniform(&mut r, &model.config.obs_shape, 0.0, 1.0);
        let goal = r.gen_range(0..4);
        for head in [Head::Policy, Head::Value] {
            let a = saliency_map(&model, &obs, goal, &model.zero_state(1), head).unwrap();
            let b = perturbation_saliency(&model, &obs, goal, &model.zero_state(1), head, 1e-6).unwrap();
            let top = |m: &gace_core::evalkit::SaliencyMap| m.ranking()[..5].iter().copied().collect::<BTreeSet<_>>();
            assert_eq!(top(&a), top(&b), "seed {seed} {head:?}");
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-6, "seed {seed} {head:?}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn continuous_model_saliency() {
    let env = TaskId::seen(TaskFamily::A1).env_config().build().unwrap();
    let mut r = rng(12);
    let mut cfg = tiny_model(env.obs_shape(), env.action_space(), Variant::Gace, &mut r);
    cfg.n_goals = env.n_goals();
    cfg.disc_classes = env.n_goals() + 1;
    let model = GoalModel::new(cfg, &mut r).unwrap();
    let (obs, goal) = TaskId::seen(TaskFamily::A1).env_config().build().unwrap().reset(3).unwrap();
    for head in [Head::Policy, Head::Value] {
        let m = saliency_map(&model, &obs, goal, &model.zero_state(1), head).unwrap();
        assert_eq!((m.height, m.width), (model.config.obs_shape[1], model.config.obs_shape[2]));
        assert_eq!(m.values.iter().cloned().fold(0.0, f64::max), 1.0);
    }
}

