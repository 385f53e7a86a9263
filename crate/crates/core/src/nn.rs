//! Parameter initialisation and the dense layer shared by every network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{DiffError, Graph, ParamId, ParameterStore, Tensor};

/// Uniform tensor in `[-bound, bound]`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 2], bound: f64) -> Tensor {
    let n = shape[0] * shape[1];
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-uniform, for layers followed by relu.
    He,
    /// Glorot-uniform, for tanh layers.
    Glorot,
    /// He-uniform scaled by the given factor.
    ScaledHe(f64),
    Zero,
}

/// `x · w + b` with `w: [fan_in, fan_out]` and `b: [1, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
    ) -> Result<Self, DiffError> {
        let he = (6.0 / fan_in as f64).sqrt();
        let w = match init {
            Init::He => uniform(rng, [fan_in, fan_out], he),
            Init::ScaledHe(s) => {
                let mut t = uniform(rng, [fan_in, fan_out], he);
                t.scale_assign(s);
                t
            }
            Init::Glorot => uniform(rng, [fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt()),
            Init::Zero => Tensor::zeros([fan_in, fan_out]),
        };
        Ok(Self {
            w: store.add(&format!("{name}.w"), w)?,
            b: store.add(&format!("{name}.b"), Tensor::zeros([1, fan_out]))?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParameterStore, x: &G::Value) -> Result<G::Value, DiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, &w, &b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}
