use std::sync::Arc;

use neural_template::diff::{
    AdamConfig, DiffError, Eager, GatherIndex, Graph, Op, ParamGrads, ParameterStore, Tape, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Values kept at least `gap` away from `kinks` and pairwise separated by
/// `gap`, so central differences never straddle a nondifferentiable point.
fn sample(rng: &mut ChaCha8Rng, n: usize, kinks: &[f64], gap: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    while out.len() < n {
        let x = rng.gen_range(-2.0..2.0);
        let near_kink = kinks.iter().any(|k| (x - k).abs() < gap);
        let near_other = out.iter().any(|y| (x - y).abs() < gap);
        if !near_kink && !near_other {
            out.push(x);
        }
    }
    out
}

fn eval(op: &Op, store: &ParameterStore, weights: &Tensor) -> f64 {
    let mut g = Eager;
    let ids: Vec<_> = store.ids().collect();
    let xs: Vec<_> = ids.iter().map(|&id| g.param(store, id)).collect();
    let refs: Vec<_> = xs.iter().collect();
    let y = g.apply(op.clone(), &refs).unwrap();
    let w = g.constant(weights.clone());
    let p = g.mul(&y, &w).unwrap();
    let s = g.sum(&p).unwrap();
    g.value(&s).item()
}

/// Worst norm-wise relative error between tape gradients of `sum(op(x) * r)`
/// and central differences, over all inputs.
fn check(op: Op, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> f64 {
    let mut store = ParameterStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("x{i}"), t.clone()).unwrap())
        .collect();
    let mut tape = Tape::new();
    let xs: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let refs: Vec<_> = xs.iter().collect();
    let y = tape.apply(op.clone(), &refs).unwrap();
    let shape = tape.value(&y).shape().to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(weights.clone());
    let p = tape.mul(&y, &w).unwrap();
    let s = tape.sum(&p).unwrap();
    let grads = tape.backward(s).unwrap().into_params();
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let base = store.value(id).clone();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape().to_vec()));
        let mut diff2 = 0.0;
        let mut norm_a: f64 = 0.0;
        let mut norm_n: f64 = 0.0;
        for k in 0..base.numel() {
            let mut t = base.clone();
            t.data_mut()[k] += H;
            store.set(id, t).unwrap();
            let fp = eval(&op, &store, &weights);
            let mut t = base.clone();
            t.data_mut()[k] -= H;
            store.set(id, t).unwrap();
            let fm = eval(&op, &store, &weights);
            store.set(id, base.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic.data()[k];
            diff2 += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let scale = norm_a.sqrt().max(norm_n.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    worst
}

fn t(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), sample(rng, n, kinks, gap)).unwrap()
}

fn cases(seed: u64) -> Vec<(&'static str, Op, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let gather =
        Arc::new(GatherIndex::new(vec![3, 2], vec![Some(0), None, Some(5), Some(2), Some(0), Some(3)]).unwrap());
    vec![
        ("add", Op::Add, vec![t(r, &[m, n], &[], 0.0), t(r, &[m, n], &[], 0.0)]),
        ("sub", Op::Sub, vec![t(r, &[m, n], &[], 0.0), t(r, &[m, n], &[], 0.0)]),
        ("mul", Op::Mul, vec![t(r, &[m, n], &[], 0.0), t(r, &[m, n], &[], 0.0)]),
        (
            "matmul",
            Op::MatMul,
            vec![t(r, &[m, k], &[], 0.0), t(r, &[k, n], &[], 0.0)],
        ),
        (
            "affine",
            Op::Affine,
            vec![
                t(r, &[m, k], &[], 0.0),
                t(r, &[k, n], &[], 0.0),
                t(r, &[1, n], &[], 0.0),
            ],
        ),
        ("relu", Op::Relu, vec![t(r, &[m, n], &[0.0], 1e-3)]),
        ("softplus", Op::Softplus, vec![t(r, &[m, n], &[], 0.0)]),
        ("tanh", Op::Tanh, vec![t(r, &[m, n], &[], 0.0)]),
        (
            "clip",
            Op::Clip { lo: -0.5, hi: 0.7 },
            vec![t(r, &[m, n], &[-0.5, 0.7], 1e-3)],
        ),
        ("square", Op::Square, vec![t(r, &[m, n], &[], 0.0)]),
        ("scale", Op::Scale(-1.7), vec![t(r, &[m, n], &[], 0.0)]),
        ("add_scalar", Op::AddScalar(0.3), vec![t(r, &[m, n], &[], 0.0)]),
        ("sum", Op::Sum, vec![t(r, &[m, n], &[], 0.0)]),
        ("mean", Op::Mean, vec![t(r, &[m, n], &[], 0.0)]),
        ("min_reduce", Op::MinReduce, vec![t(r, &[m, n], &[], 1e-3)]),
        ("max_reduce", Op::MaxReduce, vec![t(r, &[m, n], &[], 1e-3)]),
        (
            "concat0",
            Op::Concat { axis: 0 },
            vec![t(r, &[m, n], &[], 0.0), t(r, &[k, n], &[], 0.0)],
        ),
        (
            "concat1",
            Op::Concat { axis: 1 },
            vec![t(r, &[m, n], &[], 0.0), t(r, &[m, k], &[], 0.0)],
        ),
        ("reshape", Op::Reshape(vec![n, m]), vec![t(r, &[m, n], &[], 0.0)]),
        ("transpose", Op::Transpose, vec![t(r, &[m, n], &[], 0.0)]),
        ("gather", Op::Gather(gather), vec![t(r, &[2, 3], &[], 0.0)]),
    ]
}

#[test]
fn every_primitive_matches_finite_differences_over_100_seeds() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for (name, op, inputs) in cases(seed) {
            let err = check(op, inputs, &mut rng);
            assert!(err < 1e-5, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn perceptron_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let dims = [5, 7, 6, 3];
        let mut layers = Vec::new();
        for (l, w) in dims.windows(2).enumerate() {
            let wi = store
                .add(&format!("w{l}"), t(&mut rng, &[w[0], w[1]], &[], 0.0))
                .unwrap();
            let bi = store.add(&format!("b{l}"), t(&mut rng, &[1, w[1]], &[], 0.0)).unwrap();
            layers.push((wi, bi));
        }
        let x = t(&mut rng, &[4, 5], &[], 0.0);
        fn run<G: Graph>(
            g: &mut G,
            store: &ParameterStore,
            layers: &[(neural_template::diff::ParamId, neural_template::diff::ParamId)],
            x: &Tensor,
        ) -> G::Value {
            let mut h = g.constant(x.clone());
            for (i, &(w, b)) in layers.iter().enumerate() {
                let w = g.param(store, w);
                let b = g.param(store, b);
                h = g.affine(&h, &w, &b).unwrap();
                if i + 1 < layers.len() {
                    h = g.tanh(&h).unwrap();
                }
            }
            let s = g.square(&h).unwrap();
            g.mean(&s).unwrap()
        }
        let mut tape = Tape::new();
        let root = run(&mut tape, &store, &layers, &x);
        let grads = tape.backward(root).unwrap().into_params();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let base = store.value(id).clone();
            for k in 0..base.numel() {
                let mut p = base.clone();
                p.data_mut()[k] += H;
                store.set(id, p).unwrap();
                let fp = {
                    let mut e = Eager;
                    let v = run(&mut e, &store, &layers, &x);
                    e.value(&v).item()
                };
                let mut p = base.clone();
                p.data_mut()[k] -= H;
                store.set(id, p).unwrap();
                let fm = {
                    let mut e = Eager;
                    let v = run(&mut e, &store, &layers, &x);
                    e.value(&v).item()
                };
                store.set(id, base.clone()).unwrap();
                let numeric = (fp - fm) / (2.0 * H);
                let a = grads.get(id).unwrap().data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-5, "{}[{k}]: {a} vs {numeric}", store.name(id));
            }
        }
    }
}

#[test]
fn forward_and_backward_examples() {
    let mut g = Eager;
    let x = g.constant(Tensor::scalar(-2.0));
    let y = g.relu(&x).unwrap();
    assert_eq!(g.value(&y).item(), 0.0);
    let x = g.constant(Tensor::scalar(1.7));
    let y = g.clip(&x, 0.0, 1.0).unwrap();
    assert_eq!(g.value(&y).item(), 1.0);
    let eye = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
    let v = g.constant(Tensor::from_rows(&[[0.3], [-4.0], [2.5]]));
    let y = g.matmul(&eye, &v).unwrap();
    assert_eq!(g.value(&y).data(), &[0.3, -4.0, 2.5]);

    let mut store = ParameterStore::new();
    let id = store.add("x", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let y = tape.square(&x).unwrap();
    assert_eq!(tape.backward(y).unwrap().params().get(id).unwrap().item(), 6.0);

    store.set(id, Tensor::scalar(-1.0)).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let y = tape.relu(&x).unwrap();
    assert_eq!(tape.backward(y).unwrap().params().get(id).unwrap().item(), 0.0);

    let mut tape = Tape::new();
    let two = tape.constant(Tensor::new([2, 1], vec![1.0, 2.0]).unwrap());
    let y = tape.mul(&two, &two).unwrap();
    assert!(matches!(tape.backward(y), Err(DiffError::NonScalarRoot { .. })));
}

#[test]
fn shape_mismatch_names_the_primitive() {
    let mut g = Eager;
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 2]));
    let err = g.add(&a, &b).unwrap_err();
    assert_eq!(
        err,
        DiffError::ShapeMismatch {
            op: "add",
            lhs: vec![2, 3],
            rhs: vec![2, 2]
        }
    );
    assert!(err.to_string().contains("add"));
    assert!(g.matmul(&a, &b).is_err());
    assert!(Tensor::new([2, 2], vec![1.0]).is_err());
}

#[test]
fn adam_examples() {
    let mut store = ParameterStore::new();
    let id = store.add("p", Tensor::scalar(1.0)).unwrap();
    let mut grads = ParamGrads::new();
    grads.insert(id, Tensor::scalar(1.0));
    store.adam_step(&grads, 0.1, &[id], AdamConfig::default());
    assert!((store.value(id).item() - 0.9).abs() < 1e-6);
    assert_eq!(store.step(), 1);

    let mut zero = ParameterStore::new();
    let z = zero.add("p", Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
    let before = zero.value(z).clone();
    let mut g = ParamGrads::new();
    g.insert(z, Tensor::zeros([3]));
    for _ in 0..5 {
        zero.adam_step(&g, 0.1, &[z], AdamConfig::default());
    }
    assert_eq!(zero.value(z), &before);

    let mut missing = ParameterStore::new();
    let m = missing.add("p", Tensor::scalar(2.0)).unwrap();
    missing.adam_step(&ParamGrads::new(), 0.1, &[m], AdamConfig::default());
    assert_eq!(missing.value(m).item(), 2.0);
}

#[test]
fn store_rejects_duplicates_and_shape_changes() {
    let mut store = ParameterStore::new();
    let id = store.add("p", Tensor::zeros([2])).unwrap();
    assert!(matches!(
        store.add("p", Tensor::zeros([2])),
        Err(DiffError::DuplicateParam(_))
    ));
    assert!(matches!(
        store.set(id, Tensor::zeros([3])),
        Err(DiffError::ParamShape { .. })
    ));
    assert!(store.id("q").is_err());
}

proptest! {
    #[test]
    fn adam_is_deterministic(values in prop::collection::vec(-5.0f64..5.0, 1..8), g in prop::collection::vec(-5.0f64..5.0, 8)) {
        let n = values.len();
        let mut a = ParameterStore::new();
        let id = a.add("p", Tensor::new([n], values.clone()).unwrap()).unwrap();
        let mut b = a.clone();
        let mut grads = ParamGrads::new();
        grads.insert(id, Tensor::new([n], g[..n].to_vec()).unwrap());
        for _ in 0..3 {
            a.adam_step(&grads, 0.01, &[id], AdamConfig::default());
            b.adam_step(&grads, 0.01, &[id], AdamConfig::default());
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tape_and_eager_agree_bitwise(x in prop::collection::vec(-3.0f64..3.0, 6), w in prop::collection::vec(-3.0f64..3.0, 6)) {
        fn f<G: Graph>(g: &mut G, x: &Tensor, w: &Tensor) -> Tensor {
            let x = g.constant(x.clone());
            let w = g.constant(w.clone());
            let y = g.matmul(&x, &w).unwrap();
            let y = g.tanh(&y).unwrap();
            let y = g.clip(&y, -0.5, 0.5).unwrap();
            let y = g.softplus(&y).unwrap();
            let y = g.min_reduce(&y).unwrap();
            g.value(&y).clone()
        }
        let x = Tensor::new([2, 3], x).unwrap();
        let w = Tensor::new([3, 2], w).unwrap();
        prop_assert_eq!(f(&mut Eager, &x, &w), f(&mut Tape::new(), &x, &w));
    }

    #[test]
    fn forward_values_stay_finite(x in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let n = x.len();
        let mut g = Eager;
        let v = g.constant(Tensor::new([n, 1], x).unwrap());
        for y in [g.tanh(&v).unwrap(), g.softplus(&v).unwrap(), g.relu(&v).unwrap(), g.clip(&v, 0.0, 1.0).unwrap()] {
            prop_assert!(g.value(&y).all_finite());
        }
    }
}
