use attrsim::dataset::{epoch_pool, Dataset, Triplet};
use attrsim::manifest::Split;
use attrsim::model::{Model, ModelConfig};
use attrsim::synth::{generate, parse_attribute_spec, SynthSpec};
use attrsim::train::{
    stage1_batch, stage2_batch, train_stage1, train_stage2, EpochLoss, TrainConfig, TrainState,
};
use attrsim::{Error, Param};
use tempfile::TempDir;

fn toy_data() -> (TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        attributes: parse_attribute_spec("glyph:2,stripe:3").unwrap(),
        per_value: 6,
        side: 64,
        noise: 0.1,
        seed: 4,
    };
    generate(&spec, dir.path()).unwrap();
    let data = Dataset::open(dir.path(), 64).unwrap();
    (dir, data)
}

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs_stage1: 2,
        epochs_stage2: 2,
        batch_size: 4,
        triplets_per_epoch: 8,
        select_by_val: false,
        ..TrainConfig::default()
    }
}

fn values(params: Vec<&Param>) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.value.data().to_vec()).collect()
}

fn grads(params: Vec<&Param>) -> Vec<Option<Vec<f64>>> {
    params
        .iter()
        .map(|p| p.grad.as_ref().map(|g| g.data().to_vec()))
        .collect()
}

fn clear(model: &mut Model) {
    for p in model.params_mut() {
        p.zero_grad();
    }
}

fn no_hook() -> impl FnMut(&Model, &TrainState, &EpochLoss) -> attrsim::Result<()> {
    |_, _, _| Ok(())
}

fn batch(data: &Dataset, n: usize) -> Vec<Triplet> {
    epoch_pool(&data.manifest, n, 1, 1, 0).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (_dir, data) = toy_data();
    let cfg = TrainConfig {
        lr_global_s1: 0.0,
        lr_global_s2: 0.0,
        lr_local_s2: 0.0,
        ..short_config()
    };
    let mut model = Model::init(ModelConfig::desk(2), 0).unwrap();
    let before = values(model.params());
    let mut state = TrainState::fresh(cfg.adam);
    let trace = train_stage1(&mut model, &mut state, &data, &cfg, &mut no_hook()).unwrap();
    assert_eq!(trace.len(), 2);
    train_stage2(&mut model, &mut state, &data, &cfg, &mut no_hook()).unwrap();
    assert_eq!(values(model.params()), before);
    assert_eq!((state.stage, state.epoch), (2, 2));
}

#[test]
fn stage_one_never_touches_the_local_branch() {
    let (_dir, data) = toy_data();
    let cfg = short_config();
    let mut model = Model::init(ModelConfig::desk(2), 1).unwrap();
    let local = values(model.local.params());
    let global = values(model.global.params());
    let mut state = TrainState::fresh(cfg.adam);
    train_stage1(&mut model, &mut state, &data, &cfg, &mut no_hook()).unwrap();
    assert_eq!(values(model.local.params()), local);
    assert_ne!(values(model.global.params()), global);
    assert!(state.local_opt.moments.is_empty());

    clear(&mut model);
    stage1_batch(&mut model, &data, &batch(&data, 4), &cfg).unwrap();
    assert!(grads(model.local.params()).iter().all(Option::is_none));
}

#[test]
fn without_local_terms_stage_two_matches_stage_one_gradients() {
    let (_dir, data) = toy_data();
    let mut cfg = short_config();
    cfg.weights.beta = 0.0;
    cfg.weights.gamma = 0.0;
    let mut model = Model::init(ModelConfig::desk(2), 2).unwrap();
    let triplets = batch(&data, 6);

    clear(&mut model);
    let s1 = stage1_batch(&mut model, &data, &triplets, &cfg).unwrap();
    let mut expect = grads(model.global.params());
    expect.push(model.table.table.grad.as_ref().map(|g| g.data().to_vec()));

    clear(&mut model);
    let s2 = stage2_batch(&mut model, &data, &triplets, &cfg).unwrap();
    let mut got = grads(model.global.params());
    got.push(model.table.table.grad.as_ref().map(|g| g.data().to_vec()));

    assert_eq!(s1.l_g, s2.l_g);
    assert_eq!(s2.joint, s2.l_g);
    for (e, g) in expect.iter().zip(&got) {
        let (e, g) = (e.as_ref().unwrap(), g.as_ref().unwrap());
        let scale = e.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
        let dev = e
            .iter()
            .zip(g)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev <= 1e-12 * scale, "deviation {dev} at scale {scale}");
    }
    for g in grads(model.local.params()) {
        assert!(g.unwrap().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn alignment_stop_gradient_only_changes_global_gradients() {
    let (_dir, data) = toy_data();
    let mut model = Model::init(ModelConfig::desk(2), 3).unwrap();
    let triplets = batch(&data, 4);
    let mut runs = Vec::new();
    for stop in [false, true] {
        let cfg = TrainConfig {
            align_stop_grad: stop,
            ..short_config()
        };
        clear(&mut model);
        let losses = stage2_batch(&mut model, &data, &triplets, &cfg).unwrap();
        runs.push((
            losses,
            grads(model.global.params()),
            grads(model.local.params()),
        ));
    }
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].2, runs[1].2);
    assert_ne!(runs[0].1, runs[1].1);
}

#[test]
fn every_epoch_pool_satisfies_the_triplet_constraints() {
    let (_dir, data) = toy_data();
    let m = &data.manifest;
    for stage in [1u8, 2] {
        for epoch in 0..4 {
            let pool = epoch_pool(m, 101, 9, stage, epoch).unwrap();
            assert_eq!(pool.len(), 101);
            for t in &pool {
                let label = |id| m.record(id).unwrap().labels[&t.attribute];
                let train = |id| m.record(id).unwrap().split == Split::Train;
                assert!(
                    t.anchor != t.positive && t.anchor != t.negative && t.positive != t.negative
                );
                assert_eq!(label(t.anchor), label(t.positive));
                assert_ne!(label(t.anchor), label(t.negative));
                assert!(train(t.anchor) && train(t.positive) && train(t.negative));
            }
            let per_attr = pool.iter().filter(|t| t.attribute == 0).count();
            assert!(per_attr == 50 || per_attr == 51);
        }
    }
    assert_ne!(
        epoch_pool(m, 20, 9, 1, 0).unwrap(),
        epoch_pool(m, 20, 9, 1, 1).unwrap()
    );
    assert_ne!(
        epoch_pool(m, 20, 9, 1, 0).unwrap(),
        epoch_pool(m, 20, 9, 2, 0).unwrap()
    );
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let (_dir, data) = toy_data();
    let cfg = short_config();
    let fresh = || Model::init(ModelConfig::desk(2), 5).unwrap();

    let mut straight = fresh();
    let mut st = TrainState::fresh(cfg.adam);
    let mut trace = train_stage1(&mut straight, &mut st, &data, &cfg, &mut no_hook()).unwrap();
    trace.extend(train_stage2(&mut straight, &mut st, &data, &cfg, &mut no_hook()).unwrap());
    assert_eq!(
        trace.iter().map(|e| e.epoch).collect::<Vec<_>>(),
        [1, 2, 3, 4]
    );
    assert!(trace[2..].iter().all(|e| e.l_l > 0.0 && e.l_a >= 0.0));

    // Stop after one epoch of each stage and pick up from the saved cursor.
    let mut resumed = fresh();
    let mut st = TrainState::fresh(cfg.adam);
    let one = TrainConfig {
        epochs_stage1: 1,
        ..cfg.clone()
    };
    train_stage1(&mut resumed, &mut st, &data, &one, &mut no_hook()).unwrap();
    let bytes = attrsim::checkpoint::checkpoint_bytes(&resumed, &st);
    let (mut resumed, mut st) = attrsim::checkpoint::parse_checkpoint(&bytes).unwrap();
    train_stage1(&mut resumed, &mut st, &data, &cfg, &mut no_hook()).unwrap();
    let one = TrainConfig {
        epochs_stage2: 1,
        ..cfg.clone()
    };
    train_stage2(&mut resumed, &mut st, &data, &one, &mut no_hook()).unwrap();
    train_stage2(&mut resumed, &mut st, &data, &cfg, &mut no_hook()).unwrap();
    assert_eq!(values(resumed.params()), values(straight.params()));

    let err = train_stage1(&mut resumed, &mut st, &data, &cfg, &mut no_hook()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn non_finite_parameters_abort_training() {
    let (_dir, data) = toy_data();
    let cfg = short_config();
    let mut model = Model::init(ModelConfig::desk(2), 6).unwrap();
    model.global.proj_b.value.data_mut()[0] = f64::NAN;
    let mut st = TrainState::fresh(cfg.adam);
    let err = train_stage1(&mut model, &mut st, &data, &cfg, &mut no_hook()).unwrap_err();
    assert!(
        matches!(
            err,
            Error::NonFinite {
                stage: 1,
                epoch: 1,
                batch: 0,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn validation_selection_keeps_the_best_epoch() {
    let (_dir, data) = toy_data();
    let cfg = TrainConfig {
        select_by_val: true,
        ..short_config()
    };
    let mut model = Model::init(ModelConfig::desk(2), 7).unwrap();
    let mut st = TrainState::fresh(cfg.adam);
    let mut snapshots = Vec::new();
    let mut hook = |m: &Model, _: &TrainState, row: &EpochLoss| {
        snapshots.push((row.val_map.unwrap(), m.clone()));
        Ok(())
    };
    train_stage1(&mut model, &mut st, &data, &cfg, &mut hook).unwrap();
    let best = snapshots
        .iter()
        .fold(None::<&(f64, Model)>, |b, s| match b {
            Some(b) if b.0 >= s.0 => Some(b),
            _ => Some(s),
        })
        .unwrap();
    assert_eq!(model, best.1);
    assert_eq!(st.epoch, 2);
}
