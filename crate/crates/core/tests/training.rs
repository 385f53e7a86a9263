mod common;

use neural_template::checkpoint;
use neural_template::diff::{Eager, Graph, Tape};
use neural_template::model::Model;
use neural_template::par::Execution;
use neural_template::shapegen::{gen_shape, Family, OccupancySamples};
use neural_template::training::{
    batch_objective, inverse_map_samples, train, train_step, BatchItem, Example, TrainConfig, TrainOutput, TrainerState,
};

fn data(model: &Model) -> Vec<Example> {
    Family::ALL
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let shape = gen_shape(f, k as u64 + 3);
            Example {
                obs: model.config.observe(&shape),
                samples: shape.sample_occupancy(64, 0.5, k as u64),
            }
        })
        .collect()
}

fn cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        stage1_iters: 4,
        stage2_iters: 3,
        batch: 3,
        points_stage1: 24,
        points_stage2: 12,
        lr,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn fresh() -> Model {
    Model::new(common::tiny_config(), 7).unwrap()
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let run = |exec| {
        let mut model = fresh();
        let ex = data(&model);
        let mut state = TrainerState::new(7);
        let reports = train(&mut model, &ex, &cfg(1e-3), &mut state, None, exec, |_| {}).unwrap();
        (reports, checkpoint::to_bytes(&model, &state))
    };
    let (ra, ba) = run(Execution::Sequential);
    let (rb, bb) = run(Execution::Parallel);
    assert_eq!(ra, rb);
    assert_eq!(ba, bb);
    assert_eq!(ra.len(), 7);
    assert!(ra.iter().all(|r| r.total.is_finite()));
    assert!(ra[..4].iter().all(|r| r.stage == 1));
    assert!(ra[4..].iter().all(|r| r.stage == 2 && r.l_b == 0.0));
}

#[test]
fn zero_learning_rate_keeps_parameters_and_loss() {
    let mut model = fresh();
    let ex = data(&model);
    let batch: Vec<BatchItem> = (0..ex.len())
        .map(|e| BatchItem {
            example: e,
            points: (0..64).collect(),
        })
        .collect();
    let objective = |m: &Model| {
        let mut g = Eager;
        let v = batch_objective(&mut g, m, &ex, &batch, 1, 1.0).unwrap();
        g.value(&v).item()
    };
    let before = (model.store.clone(), objective(&model));
    let mut state = TrainerState::new(7);
    for _ in 0..4 {
        train_step(&mut model, &ex, &cfg(0.0), &mut state, Execution::Parallel).unwrap();
    }
    for id in before.0.ids() {
        assert_eq!(before.0.value(id), model.store.value(id), "{}", model.store.name(id));
    }
    assert_eq!(objective(&model), before.1);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = TrainOutput {
        dir: dir.path().join("full"),
    };
    std::fs::create_dir_all(&full.dir).unwrap();
    let mut model = fresh();
    let ex = data(&model);
    let mut state = TrainerState::new(7);
    train(
        &mut model,
        &ex,
        &cfg(1e-3),
        &mut state,
        Some(&full),
        Execution::Parallel,
        |_| {},
    )
    .unwrap();
    let log = std::fs::read_to_string(full.log()).unwrap();
    assert_eq!(log.lines().count(), 1 + 7);

    let (mut resumed, mut rstate) = checkpoint::load(&full.stage_checkpoint(1)).unwrap();
    assert_eq!(resumed.stage, 1);
    assert_eq!(rstate.step, 4);
    let part = TrainOutput {
        dir: dir.path().join("part"),
    };
    std::fs::create_dir_all(&part.dir).unwrap();
    train(
        &mut resumed,
        &ex,
        &cfg(1e-3),
        &mut rstate,
        Some(&part),
        Execution::Parallel,
        |_| {},
    )
    .unwrap();
    assert_eq!(
        checkpoint::to_bytes(&resumed, &rstate),
        checkpoint::to_bytes(&model, &state)
    );
    assert_eq!(
        std::fs::read(part.stage_checkpoint(2)).unwrap(),
        std::fs::read(full.stage_checkpoint(2)).unwrap()
    );
}

fn toy_set(model: &Model, n: usize) -> Vec<Example> {
    (0..n)
        .map(|k| {
            let shape = gen_shape(Family::ALL[k % Family::ALL.len()], 100 + k as u64);
            Example {
                obs: model.config.observe(&shape),
                samples: shape.sample_occupancy(512, 0.5, k as u64),
            }
        })
        .collect()
}

fn toy_cfg(stage1: u64, stage2: u64) -> TrainConfig {
    TrainConfig {
        stage1_iters: stage1,
        stage2_iters: stage2,
        batch: 4,
        points_stage1: 128,
        points_stage2: 64,
        lr: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn loss_decreases_over_first_hundred_steps() {
    let mut model = fresh();
    let ex = toy_set(&model, 10);
    let cfg = toy_cfg(100, 0);
    let mut state = TrainerState::new(cfg.seed);
    let totals: Vec<f64> = (0..100)
        .map(|_| {
            train_step(&mut model, &ex, &cfg, &mut state, Execution::Parallel)
                .unwrap()
                .total
        })
        .collect();
    let avg = moving_average(&totals, 10);
    assert!(avg[avg.len() - 1] < avg[0], "{} -> {}", avg[0], avg[avg.len() - 1]);
}

#[test]
fn stage_two_starts_near_stage_one_end() {
    let mut model = fresh();
    let ex = toy_set(&model, 10);
    let cfg = toy_cfg(100, 10);
    let mut state = TrainerState::new(cfg.seed);
    let reports = train(&mut model, &ex, &cfg, &mut state, None, Execution::Parallel, |_| {}).unwrap();
    let end = reports[..100].iter().rev().take(10).map(|r| r.l_align).sum::<f64>() / 10.0;
    let start = reports[100].l_align;
    assert!(start <= 10.0 * end, "stage 1 end {end}, stage 2 start {start}");
}

#[test]
fn checkpoint_round_trip_then_one_step_is_bit_exact() {
    let mut model = fresh();
    let ex = data(&model);
    let mut state = TrainerState::new(7);
    for _ in 0..2 {
        train_step(&mut model, &ex, &cfg(1e-3), &mut state, Execution::Sequential).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    checkpoint::save(&path, &model, &state).unwrap();
    let (mut loaded, mut lstate) = checkpoint::load(&path).unwrap();
    let a = train_step(&mut model, &ex, &cfg(1e-3), &mut state, Execution::Sequential).unwrap();
    let b = train_step(&mut loaded, &ex, &cfg(1e-3), &mut lstate, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        checkpoint::to_bytes(&model, &state),
        checkpoint::to_bytes(&loaded, &lstate)
    );
}

#[test]
fn reported_total_is_alignment_plus_weighted_sparsity() {
    let mut model = fresh();
    let ex = data(&model);
    for lambda_b in [1.0, 0.25, 3.0] {
        let cfg = TrainConfig { lambda_b, ..cfg(1e-3) };
        let mut state = TrainerState::new(3);
        let r = train_step(&mut model, &ex, &cfg, &mut state, Execution::Parallel).unwrap();
        assert_eq!(r.total, r.l_align + lambda_b * r.l_b);
        assert!(r.l_b > 0.0);
    }
}

#[test]
fn flow_receives_gradient_only_through_the_inverse_map() {
    for stage in [1u8, 2] {
        let model = common::randomized_model(5, stage);
        let (data, batch) = common::tiny_data(&model, 5);
        let mut tape = Tape::new();
        let loss = batch_objective(&mut tape, &model, &data, &batch, stage, 1.0).unwrap();
        let grads = tape.backward(loss).unwrap().into_params();
        let flow_norm: f64 = model
            .flow
            .params()
            .iter()
            .filter_map(|&id| grads.get(id))
            .flat_map(|g| g.data().iter().map(|x| x * x))
            .sum();
        if stage == 1 {
            assert_eq!(flow_norm, 0.0);
        } else {
            assert!(flow_norm > 0.0);
        }
    }
}

#[test]
fn inverse_map_samples_under_zero_field_is_identity() {
    let model = fresh();
    assert!(model.flow.is_zero(&model.store));
    let shape = gen_shape(Family::Table, 2);
    let samples = shape.sample_occupancy(300, 0.5, 2);
    let zs = [0.4, -0.7, 0.1, 0.9];
    let mapped = inverse_map_samples(&model.flow, &model.store, &zs, &samples).unwrap();
    assert_eq!(mapped.points, samples.points);
    assert_eq!(mapped.labels, samples.labels);
}

#[test]
fn inverse_map_samples_round_trips_and_keeps_labels() {
    let model = common::randomized_model(9, 2);
    let shape = gen_shape(Family::RingStack, 4);
    let samples = shape.sample_occupancy(500, 0.5, 4);
    let zs = [0.2, -0.3, 0.5, 0.1];
    let mapped = inverse_map_samples(&model.flow, &model.store, &zs, &samples).unwrap();
    assert_eq!(mapped.labels, samples.labels);
    assert!(mapped.points.iter().zip(&samples.points).any(|(a, b)| a != b));
    let back = model.flow.deform(&model.store, &zs, &mapped.points).unwrap();
    let err = back
        .iter()
        .zip(&samples.points)
        .flat_map(|(a, b)| (0..3).map(move |i| (a[i] - b[i]).abs()))
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
    let empty = OccupancySamples {
        points: vec![],
        labels: vec![],
    };
    assert!(inverse_map_samples(&model.flow, &model.store, &zs, &empty).is_err());
}
