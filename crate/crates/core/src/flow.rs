//! Shape deformation: an autonomous velocity field conditioned on the shape
//! code, integrated with fixed-step RK4 over `t in [0, 1]`. The inverse map
//! integrates the negated field on the same time grid.

use rand_chacha::ChaCha8Rng;

use crate::diff::{DiffError, Eager, Graph, ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::geom::{IndexedMesh, Vec3};
use crate::nn::{Dense, Init};
use crate::par::Execution;
use crate::topology::TemplateMesh;

/// Bound on the speed of each velocity component.
pub const MAX_SPEED: f64 = 2.0;

/// Velocity network `(p, zs) -> 2 tanh(...)` with two tanh hidden layers.
/// The first layer is split into a point part and a code part so the code
/// contributes a per-shape bias computed once.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub w1p: ParamId,
    pub w1z: ParamId,
    pub b1: ParamId,
    pub l2: Dense,
    pub l3: Dense,
    pub t_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl FlowField {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        d_s: usize,
        width: usize,
        t_steps: usize,
    ) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Config("flow needs at least one step".into()));
        }
        let bound = (6.0 / (3 + d_s + width) as f64).sqrt();
        let w1p = store.add("flow.fc0.wp", crate::nn::uniform(rng, [3, width], bound))?;
        let w1z = store.add("flow.fc0.wz", crate::nn::uniform(rng, [d_s, width], bound))?;
        let b1 = store.add("flow.fc0.b", Tensor::zeros([1, width]))?;
        let l2 = Dense::new(store, rng, "flow.fc1", width, width, Init::Glorot)?;
        let l3 = Dense::new(store, rng, "flow.fc2", width, 3, Init::Zero)?;
        Ok(Self {
            w1p,
            w1z,
            b1,
            l2,
            l3,
            t_steps,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1p, self.w1z, self.b1];
        ids.extend(self.l2.params());
        ids.extend(self.l3.params());
        ids
    }

    /// The output layer is all zero, so the field vanishes identically.
    pub fn is_zero(&self, store: &ParameterStore) -> bool {
        self.l3
            .params()
            .iter()
            .all(|&id| store.value(id).data().iter().all(|&x| x == 0.0))
    }

    /// Per-shape first-layer bias `zs · W1z + b1`, shape `[1, width]`.
    pub fn condition<G: Graph>(&self, g: &mut G, store: &ParameterStore, zs: &G::Value) -> Result<G::Value, DiffError> {
        let w = g.param(store, self.w1z);
        let b = g.param(store, self.b1);
        g.affine(zs, &w, &b)
    }

    /// Velocity at `[N, 3]` points.
    pub fn velocity<G: Graph>(
        &self,
        g: &mut G,
        store: &ParameterStore,
        cond: &G::Value,
        p: &G::Value,
    ) -> Result<G::Value, DiffError> {
        let w1 = g.param(store, self.w1p);
        let h = g.affine(p, &w1, cond)?;
        let h = g.tanh(&h)?;
        let h = self.l2.forward(g, store, &h)?;
        let h = g.tanh(&h)?;
        let v = self.l3.forward(g, store, &h)?;
        let v = g.tanh(&v)?;
        g.scale(&v, MAX_SPEED)
    }

    /// RK4 over `t_steps` steps of size `1 / t_steps`, backwards for the
    /// inverse. Fails with the step index on a non-finite state.
    pub fn integrate<G: Graph>(
        &self,
        g: &mut G,
        store: &ParameterStore,
        cond: &G::Value,
        points: &G::Value,
        dir: Direction,
    ) -> Result<G::Value> {
        let h = match dir {
            Direction::Forward => 1.0 / self.t_steps as f64,
            Direction::Inverse => -1.0 / self.t_steps as f64,
        };
        let mut p = points.clone();
        for step in 0..self.t_steps {
            let k1 = self.velocity(g, store, cond, &p)?;
            let s = g.scale(&k1, 0.5 * h)?;
            let p2 = g.add(&p, &s)?;
            let k2 = self.velocity(g, store, cond, &p2)?;
            let s = g.scale(&k2, 0.5 * h)?;
            let p3 = g.add(&p, &s)?;
            let k3 = self.velocity(g, store, cond, &p3)?;
            let s = g.scale(&k3, h)?;
            let p4 = g.add(&p, &s)?;
            let k4 = self.velocity(g, store, cond, &p4)?;
            let k23 = g.add(&k2, &k3)?;
            let k23 = g.scale(&k23, 2.0)?;
            let k14 = g.add(&k1, &k4)?;
            let sum = g.add(&k14, &k23)?;
            let inc = g.scale(&sum, h / 6.0)?;
            p = g.add(&p, &inc)?;
            if !g.value(&p).all_finite() {
                return Err(Error::NonFiniteFlow { step });
            }
        }
        Ok(p)
    }

    fn map_points(&self, store: &ParameterStore, zs: &[f64], points: &[Vec3], dir: Direction) -> Result<Vec<Vec3>> {
        let finite = points.iter().flatten().chain(zs).all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFiniteFlow { step: 0 });
        }
        if points.is_empty() || self.is_zero(store) {
            return Ok(points.to_vec());
        }
        let mut g = Eager;
        let z = g.constant(Tensor::new([1, zs.len()], zs.to_vec())?);
        let cond = self.condition(&mut g, store, &z)?;
        let x = g.constant(points_tensor(points));
        let y = self.integrate(&mut g, store, &cond, &x, dir)?;
        Ok(tensor_points(&y))
    }

    /// `g(zs, p)` for each point, chunked over the execution pool.
    pub fn deform(&self, store: &ParameterStore, zs: &[f64], points: &[Vec3]) -> Result<Vec<Vec3>> {
        self.deform_with(Execution::default(), store, zs, points, Direction::Forward)
    }

    /// `g^-1(zs, p)`.
    pub fn inverse_deform(&self, store: &ParameterStore, zs: &[f64], points: &[Vec3]) -> Result<Vec<Vec3>> {
        self.deform_with(Execution::default(), store, zs, points, Direction::Inverse)
    }

    pub fn deform_with(
        &self,
        exec: Execution,
        store: &ParameterStore,
        zs: &[f64],
        points: &[Vec3],
        dir: Direction,
    ) -> Result<Vec<Vec3>> {
        const CHUNK: usize = 512;
        let parts = exec.map_chunks(points.len(), CHUNK, |r| self.map_points(store, zs, &points[r], dir));
        let mut out = Vec::with_capacity(points.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Moves template vertices; the triangle list and tags are kept as is.
    pub fn deform_mesh(&self, store: &ParameterStore, zs: &[f64], tmesh: &TemplateMesh) -> Result<IndexedMesh> {
        let vertices = self.deform(store, zs, &tmesh.mesh.vertices)?;
        Ok(IndexedMesh {
            vertices,
            triangles: tmesh.mesh.triangles.clone(),
            groups: tmesh.mesh.groups.clone(),
        })
    }
}

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::new([points.len(), 3], points.iter().flatten().copied().collect()).expect("n x 3")
}

pub fn tensor_points(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn field(seed: u64, d_s: usize, width: usize, t_steps: usize) -> (ParameterStore, FlowField) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FlowField::new(&mut store, &mut rng, d_s, width, t_steps).unwrap();
        (store, f)
    }

    fn randomize_output(store: &mut ParameterStore, f: &FlowField, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in f.l3.params() {
            let shape = store.value(id).shape().to_vec();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            store.set(id, Tensor::new(shape, data).unwrap()).unwrap();
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn zero_field_is_identity() {
        let (store, f) = field(1, 4, 16, 20);
        let pts = random_points(100, 2);
        assert_eq!(f.deform(&store, &[0.1; 4], &pts).unwrap(), pts);
        assert_eq!(f.inverse_deform(&store, &[0.1; 4], &pts).unwrap(), pts);
    }

    #[test]
    fn constant_field_translates() {
        let (mut store, f) = field(1, 4, 16, 20);
        // Zero hidden weights and output bias atanh(v / 2) give velocity v.
        for id in [f.w1p, f.w1z, f.l2.w, f.l3.w] {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let v = [0.3, -0.2, 0.125];
        let bias = Tensor::new([1, 3], v.iter().map(|x| (x / MAX_SPEED).atanh()).collect()).unwrap();
        store.set(f.l3.b, bias).unwrap();
        let pts = random_points(50, 3);
        let out = f.deform(&store, &[0.0; 4], &pts).unwrap();
        let back = f.inverse_deform(&store, &[0.0; 4], &pts).unwrap();
        let speed: Vec<f64> = {
            let mut g = Eager;
            let c = g.constant(Tensor::zeros([1, 16]));
            let p = g.constant(Tensor::zeros([1, 3]));
            f.velocity(&mut g, &store, &c, &p).unwrap().data().to_vec()
        };
        for ((p, q), r) in pts.iter().zip(&out).zip(&back) {
            for i in 0..3 {
                assert!((q[i] - (p[i] + speed[i])).abs() < 1e-14);
                assert!((r[i] - (p[i] - speed[i])).abs() < 1e-14);
                assert!((speed[i] - v[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn round_trip_bounded_field() {
        let (mut store, f) = field(5, 4, 32, 20);
        randomize_output(&mut store, &f, 9, 1.0);
        let pts = random_points(2000, 4);
        let zs = [0.3, -0.1, 0.7, 0.2];
        let fwd = f.deform(&store, &zs, &pts).unwrap();
        assert!(fwd.iter().zip(&pts).any(|(a, b)| a != b));
        let back = f.inverse_deform(&store, &zs, &fwd).unwrap();
        let err = back
            .iter()
            .zip(&pts)
            .flat_map(|(a, b)| (0..3).map(move |i| (a[i] - b[i]).abs()))
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn non_finite_state_reports_step() {
        let (mut store, f) = field(5, 2, 8, 5);
        randomize_output(&mut store, &f, 9, 1.0);
        let err = f.deform(&store, &[f64::NAN, 0.0], &[[0.0; 3]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteFlow { step: 0 }));
    }

    #[test]
    fn deform_mesh_keeps_connectivity() {
        let (mut store, f) = field(5, 2, 8, 5);
        randomize_output(&mut store, &f, 1, 0.5);
        let cube = crate::topology::convex_polytope(&[
            [1.0, 0.0, 0.0, -0.5],
            [-1.0, 0.0, 0.0, -0.5],
            [0.0, 1.0, 0.0, -0.5],
            [0.0, -1.0, 0.0, -0.5],
            [0.0, 0.0, 1.0, -0.5],
            [0.0, 0.0, -1.0, -0.5],
        ])
        .unwrap();
        let mut mesh = cube;
        mesh.groups = vec![0; mesh.triangles.len()];
        let tm = TemplateMesh {
            mesh,
            convexes: vec![0],
        };
        let out = f.deform_mesh(&store, &[0.2, 0.1], &tm).unwrap();
        assert_eq!(out.triangles, tm.mesh.triangles);
        assert_eq!(out.groups, tm.mesh.groups);
        assert_eq!(out.euler_characteristic(), tm.mesh.euler_characteristic());
        assert_ne!(out.vertices, tm.mesh.vertices);
    }

    #[test]
    fn chunking_does_not_change_results() {
        let (mut store, f) = field(5, 2, 8, 5);
        randomize_output(&mut store, &f, 1, 0.5);
        let pts = random_points(1500, 8);
        let a = f
            .deform_with(Execution::Sequential, &store, &[0.2, 0.1], &pts, Direction::Forward)
            .unwrap();
        let b = f
            .deform_with(Execution::Parallel, &store, &[0.2, 0.1], &pts, Direction::Forward)
            .unwrap();
        assert_eq!(a, b);
    }
}
