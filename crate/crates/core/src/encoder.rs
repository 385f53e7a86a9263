//! Observation encoder: three strided convolution stages, a dense trunk
//! layer and two linear heads producing the topology code `zt` and the
//! shape code `zs`.
//!
//! Convolutions are expressed as an im2col [`Op::Gather`](crate::diff::Op)
//! followed by an affine map, so they differentiate through the generic tape.
//! Feature maps are `[positions, channels]` matrices with x varying fastest.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, GatherIndex, Graph, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Dense, Init};
use crate::shapegen::{SilhouetteImage, VoxelGrid};

const KERNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Voxel,
    Image,
}

impl InputKind {
    fn dims(self) -> usize {
        match self {
            InputKind::Voxel => 3,
            InputKind::Image => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Voxels(VoxelGrid),
    Image(SilhouetteImage),
}

impl Observation {
    pub fn kind(&self) -> InputKind {
        match self {
            Observation::Voxels(_) => InputKind::Voxel,
            Observation::Image(_) => InputKind::Image,
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            Observation::Voxels(v) => v.res,
            Observation::Image(i) => i.res,
        }
    }

    /// Single-channel feature map `[positions, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = match self {
            Observation::Voxels(v) => v.bits.iter().map(|&b| b as f64).collect(),
            Observation::Image(i) => i.pixels.clone(),
        };
        let n = data.len();
        Tensor::new([n, 1], data).expect("flat feature map")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub zt: Vec<f64>,
    pub zs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    kind: InputKind,
    res: usize,
    convs: Vec<Dense>,
    gathers: Vec<Arc<GatherIndex>>,
    trunk: Dense,
    head_t: Dense,
    head_s: Dense,
}

#[allow(clippy::too_many_arguments)]
impl Encoder {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        kind: InputKind,
        res: usize,
        channels: &[usize],
        trunk_width: usize,
        d_t: usize,
        d_s: usize,
    ) -> Result<Self> {
        let stride = 1 << channels.len();
        if res == 0 || !res.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input resolution {res} must be a positive multiple of {stride}"
            )));
        }
        let dims = kind.dims();
        let taps = KERNEL.pow(dims as u32);
        let mut convs = Vec::new();
        let mut gathers = Vec::new();
        let (mut side, mut c_in) = (res, 1);
        for (l, &c_out) in channels.iter().enumerate() {
            gathers.push(Arc::new(conv_gather(dims, side, c_in)));
            convs.push(Dense::new(
                store,
                rng,
                &format!("encoder.conv{l}"),
                taps * c_in,
                c_out,
                Init::He,
            )?);
            side /= 2;
            c_in = c_out;
        }
        let flat = side.pow(dims as u32) * c_in;
        let trunk = Dense::new(store, rng, "encoder.trunk", flat, trunk_width, Init::He)?;
        let head_t = Dense::new(store, rng, "encoder.head_t", trunk_width, d_t, Init::Glorot)?;
        let head_s = Dense::new(store, rng, "encoder.head_s", trunk_width, d_s, Init::Glorot)?;
        Ok(Self {
            kind,
            res,
            convs,
            gathers,
            trunk,
            head_t,
            head_s,
        })
    }

    pub fn kind(&self) -> InputKind {
        self.kind
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn check(&self, obs: &Observation) -> Result<()> {
        if obs.kind() != self.kind || obs.resolution() != self.res {
            return Err(Error::InputResolution {
                expected: format!("{:?} {}", self.kind, self.res),
                actual: format!("{:?} {}", obs.kind(), obs.resolution()),
            });
        }
        Ok(())
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParameterStore,
        obs: &Observation,
    ) -> Result<(G::Value, G::Value)> {
        self.check(obs)?;
        let x = g.constant(obs.to_tensor());
        Ok(self.forward_tensor(g, store, x)?)
    }

    fn forward_tensor<G: Graph>(
        &self,
        g: &mut G,
        store: &ParameterStore,
        mut x: G::Value,
    ) -> Result<(G::Value, G::Value), DiffError> {
        for (conv, gather) in self.convs.iter().zip(&self.gathers) {
            let cols = g.gather(&x, gather)?;
            let y = conv.forward(g, store, &cols)?;
            x = g.relu(&y)?;
        }
        let n = g.value(&x).numel();
        let flat = g.reshape(&x, &[1, n])?;
        let h = self.trunk.forward(g, store, &flat)?;
        let h = g.relu(&h)?;
        let zt = self.head_t.forward(g, store, &h)?;
        let zs = self.head_s.forward(g, store, &h)?;
        Ok((zt, zs))
    }

    /// Codes without gradient bookkeeping.
    pub fn encode(&self, store: &ParameterStore, obs: &Observation) -> Result<LatentPair> {
        let mut g = crate::diff::Eager;
        let (zt, zs) = self.forward(&mut g, store, obs)?;
        Ok(LatentPair {
            zt: zt.data().to_vec(),
            zs: zs.data().to_vec(),
        })
    }

    pub fn head_params(&self) -> ([ParamId; 2], [ParamId; 2]) {
        (self.head_t.params(), self.head_s.params())
    }

    /// Trunk parameters (convolutions and the dense layer).
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .flat_map(|c| c.params())
            .chain(self.trunk.params())
            .collect()
    }
}

/// im2col source map for a kernel-4, stride-2, padding-1 convolution over a
/// `side^dims` grid with `c_in` channels. Output row = output position,
/// column = (tap, channel).
fn conv_gather(dims: usize, side: usize, c_in: usize) -> GatherIndex {
    let out_side = side / 2;
    let taps = KERNEL.pow(dims as u32);
    let positions = out_side.pow(dims as u32);
    let mut src = Vec::with_capacity(positions * taps * c_in);
    for o in 0..positions {
        for t in 0..taps {
            let (mut oo, mut tt) = (o, t);
            let (mut flat, mut stride) = (0usize, 1usize);
            let mut inside = true;
            for _ in 0..dims {
                let oc = oo % out_side;
                let kc = tt % KERNEL;
                oo /= out_side;
                tt /= KERNEL;
                let i = (2 * oc + kc) as isize - 1;
                if i < 0 || i >= side as isize {
                    inside = false;
                }
                flat += i.max(0) as usize * stride;
                stride *= side;
            }
            for c in 0..c_in {
                src.push(inside.then_some(flat * c_in + c));
            }
        }
    }
    GatherIndex::new(vec![positions, taps * c_in], src).expect("consistent im2col shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;
    use crate::shapegen::{gen_shape, Axis, Family};
    use rand::SeedableRng;

    fn encoder(kind: InputKind, res: usize) -> (ParameterStore, Encoder) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut store, &mut rng, kind, res, &[2, 3, 4], 16, 5, 6).unwrap();
        (store, enc)
    }

    #[test]
    fn conv_gather_matches_direct_convolution_2d() {
        // 1 channel in, 1 out, 4x4 input: compare with a naive loop.
        let side = 4;
        let input: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let kernel: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let idx = conv_gather(2, side, 1);
        let cols = crate::diff::Op::Gather(Arc::new(idx))
            .forward(&[&Tensor::new([16, 1], input.clone()).unwrap()])
            .unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut expect = 0.0;
                for ky in 0..4 {
                    for kx in 0..4 {
                        let (iy, ix) = (2 * oy + ky, 2 * ox + kx);
                        if (1..=side).contains(&iy) && (1..=side).contains(&ix) {
                            expect += kernel[ky * 4 + kx] * input[(iy - 1) * side + (ix - 1)];
                        }
                    }
                }
                let row = cols.row(oy * 2 + ox);
                let got: f64 = row.iter().zip(&kernel).map(|(a, b)| a * b).sum();
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn code_dimensions_and_determinism() {
        let (store, enc) = encoder(InputKind::Voxel, 16);
        let obs = Observation::Voxels(gen_shape(Family::Box, 3).voxelize(16));
        let a = enc.encode(&store, &obs).unwrap();
        assert_eq!((a.zt.len(), a.zs.len()), (5, 6));
        assert_eq!(a, enc.encode(&store, &obs).unwrap());

        let (store, enc) = encoder(InputKind::Image, 16);
        let obs = Observation::Image(gen_shape(Family::Box, 3).render_silhouette(Axis::Z, 16));
        let b = enc.encode(&store, &obs).unwrap();
        assert_eq!((b.zt.len(), b.zs.len()), (5, 6));
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let (store, enc) = encoder(InputKind::Voxel, 16);
        let obs = Observation::Voxels(gen_shape(Family::Box, 3).voxelize(8));
        let err = enc.encode(&store, &obs).unwrap_err();
        assert!(err.to_string().contains("16") && err.to_string().contains("8"));
        let img = Observation::Image(gen_shape(Family::Box, 3).render_silhouette(Axis::Z, 16));
        assert!(enc.encode(&store, &img).is_err());
    }

    #[test]
    fn both_heads_and_trunk_receive_gradient() {
        let (store, enc) = encoder(InputKind::Voxel, 16);
        let obs = Observation::Voxels(gen_shape(Family::TorusFrame, 2).voxelize(16));
        let mut tape = Tape::new();
        let (zt, zs) = enc.forward(&mut tape, &store, &obs).unwrap();
        let a = tape.sum(&zt).unwrap();
        let zs2 = tape.square(&zs).unwrap();
        let b = tape.sum(&zs2).unwrap();
        let loss = tape.add(&a, &b).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (ht, hs) = enc.head_params();
        for id in ht.into_iter().chain(hs).chain(enc.trunk_params()) {
            let norm = grads.params().get(id).map(|g| g.norm()).unwrap_or(0.0);
            assert!(norm > 0.0, "{}", store.name(id));
        }
    }
}
