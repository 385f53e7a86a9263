#![allow(dead_code)]

use neural_template::diff::{Eager, Graph, ParamId, Tape, Tensor};
use neural_template::model::{Model, ModelConfig};
use neural_template::shapegen::{gen_shape, Family, OccupancySamples};
use neural_template::training::{batch_objective, BatchItem, Example};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        channels: vec![2, 2, 2],
        trunk_width: 6,
        d_t: 4,
        d_s: 4,
        generator_widths: vec![6, 6],
        n_h: 8,
        n_c: 2,
        flow_width: 6,
        t_steps: 4,
        ..ModelConfig::default()
    }
}

/// Tiny model with every parameter randomized away from its initialization,
/// so that no clip or relu sits in a flat regime for all samples.
pub fn randomized_model(seed: u64, stage: u8) -> Model {
    let mut model = Model::new(tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let mut v = model.store.value(id).clone();
        for x in v.data_mut() {
            *x = match name.as_str() {
                "template.b" => rng.gen_range(0.0..0.6),
                "template.w" => rng.gen_range(0.1..0.6),
                n if n.starts_with("flow.") => rng.gen_range(-0.6..0.6),
                n if n.starts_with("planes.") => rng.gen_range(-0.8..0.8),
                _ => rng.gen_range(-0.5..0.5),
            };
        }
        model.store.set(id, v).unwrap();
    }
    if stage == 2 {
        model.enter_stage2().unwrap();
    }
    model
}

/// Two tiny examples with 16 random occupancy pairs each.
pub fn tiny_data(model: &Model, seed: u64) -> (Vec<Example>, Vec<BatchItem>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    for (k, family) in [Family::TorusFrame, Family::Table].into_iter().enumerate() {
        let obs = model.config.observe(&gen_shape(family, seed + k as u64));
        let points = (0..16).map(|_| [0; 3].map(|_| rng.gen_range(-0.9..0.9))).collect();
        let labels = (0..16).map(|i| (i % 2) as u8).collect();
        data.push(Example {
            obs,
            samples: OccupancySamples { points, labels },
        });
    }
    let batch = (0..2)
        .map(|e| BatchItem {
            example: e,
            points: (0..16).collect(),
        })
        .collect();
    (data, batch)
}

pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub worst_param: String,
}

/// Compares tape gradients of the full objective with central differences
/// for every entry of every parameter in `ids`.
pub fn check_objective(
    model: &mut Model,
    data: &[Example],
    batch: &[BatchItem],
    stage: u8,
    ids: &[ParamId],
) -> GradCheck {
    let lambda_b = 1.0;
    let mut tape = Tape::new();
    let root = batch_objective(&mut tape, model, data, batch, stage, lambda_b).unwrap();
    let grads = tape.backward(root).unwrap().into_params();
    let eval = |m: &Model| {
        let mut g = Eager;
        let v = batch_objective(&mut g, m, data, batch, stage, lambda_b).unwrap();
        g.value(&v).item()
    };
    let h = 1e-5;
    let mut out = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_param: String::new(),
    };
    for &id in ids {
        let base = model.store.value(id).clone();
        let zero = Tensor::zeros(base.shape().to_vec());
        let analytic = grads.get(id).unwrap_or(&zero).clone();
        for k in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[k] += h;
            model.store.set(id, plus).unwrap();
            let fp = eval(model);
            let mut minus = base.clone();
            minus.data_mut()[k] -= h;
            model.store.set(id, minus).unwrap();
            let fm = eval(model);
            model.store.set(id, base.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            out.checked += 1;
            if rel > out.worst {
                out.worst = rel;
                out.worst_param = format!("{}[{k}] analytic {a:e} numeric {numeric:e}", model.store.name(id));
            }
        }
    }
    out
}
