mod common;

use common::{rng, tiny_model};
use gace_core::agents::{NavTrainer, TrainConfig};
use gace_core::checkpoint::{self, CheckpointError, CheckpointMeta, MAGIC, VERSION};
use gace_core::envs::{TaskFamily, TaskId};
use gace_core::gace::GaceConfig;
use gace_core::goal_storage::GoalRecord;
use gace_core::nets::{GoalModel, ModelConfig, Variant};
use gace_core::tensor::{Graph, Tensor};

fn trained() -> (NavTrainer, CheckpointMeta) {
    let env = TaskId::seen(TaskFamily::G1).env_config();
    let built = env.build().unwrap();
    let mut r = rng(3);
    let mut cfg = tiny_model(built.obs_shape(), built.action_space(), Variant::GaceGdan, &mut r);
    cfg.n_goals = 4;
    cfg.disc_classes = 4;
    let train = TrainConfig {
        n_envs: 2,
        lr: 1e-3,
        warmup: 3,
        store_capacity: 100,
        ..TrainConfig::default()
    };
    let gace = GaceConfig {
        batch: 3,
        ..GaceConfig::default()
    };
    let mut t = NavTrainer::new(cfg.clone(), train, gace, &env).unwrap();
    t.warmup().unwrap();
    for _ in 0..3 {
        t.update().unwrap();
    }
    let meta = CheckpointMeta {
        task: "G1".into(),
        seed: 0,
        updates: t.updates,
        env_steps: t.env_steps,
        episodes: t.episodes,
        adam_lr: 1e-3,
        adam_amsgrad: true,
        model: cfg,
    };
    (t, meta)
}

fn bytes(t: &NavTrainer, meta: &CheckpointMeta, adam: bool) -> Vec<u8> {
    let records: Vec<&GoalRecord> = t.store.records().collect();
    let mut buf = Vec::new();
    checkpoint::write(&mut buf, meta, &t.model.params, adam.then_some(&t.optimizer), &records).unwrap();
    buf
}

fn forward(m: &GoalModel, obs: &Tensor) -> Vec<f64> {
    let mut g = Graph::inference(&m.params);
    let x = m.obs_input(&mut g, &[obs], false).unwrap();
    let st = m.state_vars(&mut g, &m.zero_state(1));
    let f = m.features(&mut g, x, &[1], st).unwrap();
    let p = m.policy(&mut g, &f).unwrap();
    let v = m.value(&mut g, &f, None).unwrap();
    g.value(p).data().iter().chain(g.value(v).data()).copied().collect()
}

#[test]
fn roundtrip_restores_everything_bitwise() {
    let (t, meta) = trained();
    assert!(!t.store.is_empty());
    let ck = checkpoint::read(&bytes(&t, &meta, true)[..]).unwrap();
    assert_eq!(ck.meta, meta);
    for id in t.model.params.ids() {
        let name = t.model.params.name(id);
        let other = ck.params.find(name).unwrap();
        assert_eq!(ck.params.get(other), t.model.params.get(id), "{name}");
        assert_eq!(ck.params.group(other), t.model.params.group(id));
    }
    assert_eq!(ck.adam.as_ref(), Some(&t.optimizer));
    let orig: Vec<&GoalRecord> = t.store.records().collect();
    assert_eq!(ck.records.iter().collect::<Vec<_>>(), orig);

    let model = ck.model().unwrap();
    let (obs, _) = TaskId::seen(TaskFamily::G1).env_config().build().unwrap().reset(5).unwrap();
    assert_eq!(forward(&model, &obs), forward(&t.model, &obs));

    // writing the restored state again reproduces the same bytes
    let again = {
        let recs: Vec<&GoalRecord> = ck.records.iter().collect();
        let mut buf = Vec::new();
        checkpoint::write(&mut buf, &ck.meta, &ck.params, ck.adam.as_ref(), &recs).unwrap();
        buf
    };
    assert_eq!(again, bytes(&t, &meta, true));
}

#[test]
fn header_layout() {
    let (t, meta) = trained();
    let b = bytes(&t, &meta, false);
    assert_eq!(&b[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), VERSION);
    let meta_len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&b[16..16 + meta_len]).unwrap();
    assert!(text.contains("task = \"G1\""));
    let n = u32::from_le_bytes(b[16 + meta_len..20 + meta_len].try_into().unwrap()) as usize;
    assert_eq!(n, t.model.params.len());
    // first parameter name follows
    let name_len = u32::from_le_bytes(b[20 + meta_len..24 + meta_len].try_into().unwrap()) as usize;
    let first = t.model.params.ids().next().unwrap();
    assert_eq!(&b[24 + meta_len..24 + meta_len + name_len], t.model.params.name(first).as_bytes());
    assert!(checkpoint::read(&b[..]).unwrap().adam.is_none());
}

#[test]
fn corrupt_inputs_are_rejected() {
    let (t, meta) = trained();
    let good = bytes(&t, &meta, true);

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::read(&bad[..]), Err(CheckpointError::BadMagic)));

    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(checkpoint::read(&bad[..]), Err(CheckpointError::Version(7))));

    for cut in [4, 20, good.len() / 2, good.len() - 1] {
        assert!(checkpoint::read(&good[..cut]).is_err(), "truncated at {cut}");
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let (t, meta) = trained();
    // same layout names, wider hidden size
    let wider = CheckpointMeta {
        model: ModelConfig {
            hidden: meta.model.hidden + 2,
            ..meta.model.clone()
        },
        ..meta.clone()
    };
    let records: Vec<&GoalRecord> = t.store.records().collect();
    let mut buf = Vec::new();
    checkpoint::write(&mut buf, &wider, &t.model.params, None, &records).unwrap();
    match checkpoint::read(&buf[..]) {
        Err(CheckpointError::Mismatch { name, reason }) => assert!(reason.contains("shape"), "{name}: {reason}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }

    // a base model has no query weights: fewer parameters
    let base = GoalModel::new(
        ModelConfig {
            variant: Variant::Base,
            ..meta.model.clone()
        },
        &mut rng(0),
    )
    .unwrap();
    let mut into = base.params.clone();
    assert!(matches!(
        checkpoint::load_params(&mut into, &t.model.params),
        Err(CheckpointError::Mismatch { .. })
    ));
}

#[test]
fn save_and_load_through_files() {
    let (t, meta) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let records: Vec<&GoalRecord> = t.store.records().collect();
    checkpoint::save(&path, &meta, &t.model.params, Some(&t.optimizer), &records).unwrap();
    assert!(!path.with_extension("tmp").exists());
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.adam.as_ref(), Some(&t.optimizer));
    assert!(matches!(checkpoint::load(&dir.path().join("missing")), Err(CheckpointError::Io(_))));
}
