//! Neural template: planes predicted from the topology code, grouped into
//! convexes by the selection matrix `B`, and convexes united into a solid.
//!
//! The template is evaluated implicitly (soft stage-1 occupancy, min-union
//! stage-2 field) and extracted explicitly as clipped convex polytopes.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{DiffError, Graph, ParamId, ParameterStore, Tensor};
use crate::error::Result;
use crate::geom::{self, IndexedMesh, Vec3};
use crate::nn::{Dense, Init};
use crate::par::Execution;

/// Entries of `B` above this become 1 on binarization.
pub const TAU_B: f64 = 0.01;
/// Stage-2 inside test: `O_dis <= EPS_IN`.
pub const EPS_IN: f64 = 0.01;
/// Half-width of the cube that every convex is clipped from.
pub const CLIP_HALF: f64 = 1.2;
/// Convex polytopes below this volume are dropped from the mesh.
pub const MIN_VOLUME: f64 = 1e-6;
/// Planes with a shorter normal are ignored by extraction.
pub const MIN_NORMAL: f64 = 1e-9;

/// Plane generator, selection matrix and stage-1 union weights.
#[derive(Clone, Debug)]
pub struct TemplateParams {
    pub layers: Vec<Dense>,
    pub b: ParamId,
    pub w: ParamId,
    pub n_h: usize,
    pub n_c: usize,
}

impl TemplateParams {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
        d_t: usize,
        widths: &[usize],
        n_h: usize,
        n_c: usize,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut fan_in = d_t;
        for (l, &w) in widths.iter().enumerate() {
            layers.push(Dense::new(store, rng, &format!("planes.fc{l}"), fan_in, w, Init::He)?);
            fan_in = w;
        }
        layers.push(Dense::new(
            store,
            rng,
            &format!("planes.fc{}", widths.len()),
            fan_in,
            n_h * 4,
            Init::ScaledHe(0.1),
        )?);
        let b = (0..n_h * n_c).map(|_| rng.gen_range(0.0..0.1)).collect();
        let b = store.add("template.b", Tensor::new([n_h, n_c], b)?)?;
        let w = store.add("template.w", Tensor::full([n_c, 1], 1.0 / n_c as f64))?;
        Ok(Self { layers, b, w, n_h, n_c })
    }

    /// `H = generator(zt)` as an `[n_h, 4]` matrix.
    pub fn planes<G: Graph>(&self, g: &mut G, store: &ParameterStore, zt: &G::Value) -> Result<G::Value, DiffError> {
        let mut x = zt.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, &x)?;
            if l < last {
                x = g.relu(&x)?;
            }
        }
        g.reshape(&x, &[self.n_h, 4])
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Evaluated template for one topology code.
    pub fn form_template(&self, store: &ParameterStore, zt: &[f64], stage: u8) -> Result<NeuralTemplate> {
        let mut g = crate::diff::Eager;
        let z = g.constant(Tensor::new([1, zt.len()], zt.to_vec())?);
        let h = self.planes(&mut g, store, &z)?;
        let b = store.value(self.b);
        let b = if stage >= 2 { binarize(b) } else { b.clone() };
        Ok(NeuralTemplate {
            h: (*h).clone(),
            b,
            w: store.value(self.w).data().to_vec(),
            stage,
        })
    }
}

/// `B_ij > TAU_B` as 0/1.
pub fn binarize(b: &Tensor) -> Tensor {
    let data = b.data().iter().map(|&x| if x > TAU_B { 1.0 } else { 0.0 }).collect();
    Tensor::new(b.shape().to_vec(), data).expect("same shape")
}

/// Columns of a binarized `B` holding at least one selected plane.
pub fn active_columns(b: &Tensor) -> Vec<usize> {
    let (n_h, n_c) = b.dims2().expect("B is a matrix");
    (0..n_c).filter(|&j| (0..n_h).any(|i| b.at2(i, j) != 0.0)).collect()
}

/// `[N, 3]` points to `[N, 4]` homogeneous coordinates.
fn homogeneous<G: Graph>(g: &mut G, points: &G::Value) -> Result<G::Value, DiffError> {
    let n = g.value(points).shape()[0];
    let ones = g.constant(Tensor::full([n, 1], 1.0));
    g.concat(&[points, &ones], 1)
}

/// `D = [p, 1] · H^T`, shape `[N, n_h]`.
pub fn plane_distances<G: Graph>(g: &mut G, h: &G::Value, points: &G::Value) -> Result<G::Value, DiffError> {
    let ph = homogeneous(g, points)?;
    let ht = g.transpose(h)?;
    g.matmul(&ph, &ht)
}

/// Stage-1 soft occupancy `clip(sum_j W_j (1 - clip(C_j, 0, 1)), 0, 1)`, shape `[N, 1]`.
pub fn occupancy_stage1_graph<G: Graph>(
    g: &mut G,
    h: &G::Value,
    b: &G::Value,
    w: &G::Value,
    points: &G::Value,
) -> Result<G::Value, DiffError> {
    let d = plane_distances(g, h, points)?;
    let r = g.relu(&d)?;
    let c = g.matmul(&r, b)?;
    let c = g.clip(&c, 0.0, 1.0)?;
    let a = g.one_minus(&c)?;
    let s = g.matmul(&a, w)?;
    g.clip(&s, 0.0, 1.0)
}

/// Stage-2 field `min_j C_j` over the given (binarized, active) columns of
/// `B`, shape `[N, 1]`. `None` when no convex is active: the caller treats
/// that as the empty shape.
pub fn occupancy_stage2_graph<G: Graph>(
    g: &mut G,
    h: &G::Value,
    b_active: &G::Value,
    points: &G::Value,
) -> Result<G::Value, DiffError> {
    let d = plane_distances(g, h, points)?;
    let r = g.relu(&d)?;
    let c = g.matmul(&r, b_active)?;
    g.min_reduce(&c)
}

/// One template, evaluated: planes `h: [n_h, 4]`, selection `b: [n_h, n_c]`
/// (binarized in stage 2) and union weights `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralTemplate {
    pub h: Tensor,
    pub b: Tensor,
    pub w: Vec<f64>,
    pub stage: u8,
}

impl NeuralTemplate {
    pub fn n_h(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn n_c(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn plane(&self, i: usize) -> [f64; 4] {
        let r = self.h.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    pub fn plane_distance(&self, p: Vec3) -> Vec<f64> {
        (0..self.n_h()).map(|i| plane_distance(self.plane(i), p)).collect()
    }

    pub fn active_convexes(&self) -> Vec<usize> {
        active_columns(&self.b)
    }

    /// Planes selected by convex `j` (binarized templates only).
    pub fn selected_planes(&self, j: usize) -> Vec<usize> {
        (0..self.n_h()).filter(|&i| self.b.at2(i, j) != 0.0).collect()
    }

    pub fn occupancy_stage1(&self, p: Vec3) -> f64 {
        let d = self.plane_distance(p);
        let s: f64 = (0..self.n_c())
            .map(|j| self.w[j] * (1.0 - convex_value(&d, &self.b, j).clamp(0.0, 1.0)))
            .sum();
        s.clamp(0.0, 1.0)
    }

    /// `min` over active convexes; `+inf` when none is active.
    pub fn occupancy_stage2(&self, p: Vec3) -> f64 {
        let d = self.plane_distance(p);
        self.active_convexes()
            .into_iter()
            .map(|j| convex_value(&d, &self.b, j))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_inside(&self, p: Vec3) -> bool {
        self.occupancy_stage2(p) <= EPS_IN
    }

    /// Explicit template: one clipped polytope per surviving active convex,
    /// merged in convex order and tagged by convex index.
    pub fn extract_mesh(&self) -> TemplateMesh {
        self.extract_mesh_with(Execution::default())
    }

    pub fn extract_mesh_with(&self, exec: Execution) -> TemplateMesh {
        let active = self.active_convexes();
        let parts = exec.map(&active, |&j| {
            let planes: Vec<[f64; 4]> = self
                .selected_planes(j)
                .into_iter()
                .map(|i| self.plane(i))
                .filter(|p| geom::norm([p[0], p[1], p[2]]) >= MIN_NORMAL)
                .collect();
            convex_polytope(&planes).map(|m| (j, m))
        });
        let mut mesh = IndexedMesh::default();
        let mut convexes = Vec::new();
        for (j, mut part) in parts.into_iter().flatten() {
            part.groups = vec![j; part.triangles.len()];
            mesh.append(&part);
            convexes.push(j);
        }
        TemplateMesh { mesh, convexes }
    }

    /// Plain-text plane list: `a b c d` then the plane's row of `B` as bits.
    pub fn planes_sidecar(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n_h() {
            let [a, b, c, d] = self.plane(i);
            let _ = write!(s, "{a} {b} {c} {d}");
            for j in 0..self.n_c() {
                let bit = if self.b.at2(i, j) > TAU_B { 1 } else { 0 };
                let _ = write!(s, " {bit}");
            }
            s.push('\n');
        }
        s
    }
}

#[inline]
pub fn plane_distance(plane: [f64; 4], p: Vec3) -> f64 {
    plane[0] * p[0] + plane[1] * p[1] + plane[2] * p[2] + plane[3]
}

/// `C_j = sum_i B_ij relu(D_i)`.
pub fn convex_value(d: &[f64], b: &Tensor, j: usize) -> f64 {
    d.iter().enumerate().map(|(i, &di)| b.at2(i, j) * di.max(0.0)).sum()
}

/// Explicit template: triangles tagged with their convex index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemplateMesh {
    pub mesh: IndexedMesh,
    /// Convexes that survived extraction, ascending.
    pub convexes: Vec<usize>,
}

impl TemplateMesh {
    pub fn is_empty(&self) -> bool {
        self.convexes.is_empty()
    }

    /// Sum of per-convex Euler characteristics.
    pub fn euler_characteristic(&self) -> i64 {
        self.convexes
            .iter()
            .map(|&j| self.mesh.group(j).euler_characteristic())
            .sum()
    }

    pub fn to_obj(&self) -> String {
        self.mesh.to_obj("convex_")
    }
}

#[derive(Clone, Debug)]
struct Face {
    /// Plane index that produced the face; `None` for the clipping cube.
    plane: Option<usize>,
    normal: Vec3,
    poly: Vec<Vec3>,
}

const ON_PLANE: f64 = 1e-10;

/// Intersection of the clipping cube with `a x + b y + c z + d <= 0` for
/// every plane, as a closed outward-wound triangle mesh. `None` when the
/// polytope is empty, thinner than [`MIN_VOLUME`], or still touches the cube.
pub fn convex_polytope(planes: &[[f64; 4]]) -> Option<IndexedMesh> {
    let mut faces = cube_faces(CLIP_HALF);
    for (k, plane) in planes.iter().enumerate() {
        let n = [plane[0], plane[1], plane[2]];
        let len = geom::norm(n);
        if len < MIN_NORMAL {
            continue;
        }
        // Normalised so the on-plane tolerance is a distance.
        let n = geom::scale(n, 1.0 / len);
        let d = plane[3] / len;
        faces = clip_faces(faces, n, d, k)?;
    }
    if faces.iter().any(|f| f.plane.is_none()) {
        return None;
    }
    let mesh = triangulate(&faces)?;
    (mesh.signed_volume() >= MIN_VOLUME).then_some(mesh)
}

fn cube_faces(h: f64) -> Vec<Face> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let corner = |a: f64, b: f64| {
                let mut p = [0.0; 3];
                p[axis] = sign * h;
                p[u] = a * h;
                p[v] = b * h;
                p
            };
            let mut normal = [0.0; 3];
            normal[axis] = sign;
            let mut poly = vec![
                corner(-1.0, -1.0),
                corner(1.0, -1.0),
                corner(1.0, 1.0),
                corner(-1.0, 1.0),
            ];
            if sign < 0.0 {
                poly.reverse();
            }
            faces.push(Face {
                plane: None,
                normal,
                poly,
            });
        }
    }
    faces
}

/// Clips every face by `n . x + d <= 0` and closes the cut with a cap face.
/// `None` when nothing remains.
fn clip_faces(faces: Vec<Face>, n: Vec3, d: f64, plane: usize) -> Option<Vec<Face>> {
    let dist = |p: Vec3| geom::dot(n, p) + d;
    let all: Vec<f64> = faces.iter().flat_map(|f| f.poly.iter().map(|&p| dist(p))).collect();
    if all.iter().all(|&s| s <= ON_PLANE) {
        return Some(faces);
    }
    if all.iter().all(|&s| s >= -ON_PLANE) {
        return None;
    }
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Vec3> = Vec::new();
    for face in faces {
        let m = face.poly.len();
        let mut poly = Vec::with_capacity(m + 1);
        for k in 0..m {
            let (a, b) = (face.poly[k], face.poly[(k + 1) % m]);
            let (da, db) = (dist(a), dist(b));
            let a_in = da <= ON_PLANE;
            let b_in = db <= ON_PLANE;
            if a_in {
                poly.push(a);
                if da.abs() <= ON_PLANE {
                    cap.push(a);
                }
            }
            if a_in != b_in && da.abs() > ON_PLANE && db.abs() > ON_PLANE {
                let x = geom::lerp(a, b, da / (da - db));
                poly.push(x);
                cap.push(x);
            }
        }
        if poly.len() >= 3 {
            out.push(Face { poly, ..face });
        }
    }
    let cap = dedup_points(cap);
    if cap.len() >= 3 {
        out.push(Face {
            plane: Some(plane),
            normal: n,
            poly: sort_around(&cap, n),
        });
    }
    (!out.is_empty()).then_some(out)
}

const WELD: f64 = 1e-9;

fn dedup_points(points: Vec<Vec3>) -> Vec<Vec3> {
    let mut out: Vec<Vec3> = Vec::with_capacity(points.len());
    for p in points {
        if !out.iter().any(|&q| geom::dist2(p, q) <= WELD * WELD) {
            out.push(p);
        }
    }
    out
}

/// Counter-clockwise order around `normal`.
fn sort_around(points: &[Vec3], normal: Vec3) -> Vec<Vec3> {
    let n = points.len() as f64;
    let c = points.iter().fold([0.0; 3], |acc, &p| geom::add(acc, p));
    let c = geom::scale(c, 1.0 / n);
    let (u, v) = basis(normal);
    let mut keyed: Vec<(f64, Vec3)> = points
        .iter()
        .map(|&p| {
            let r = geom::sub(p, c);
            (geom::dot(r, v).atan2(geom::dot(r, u)), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, p)| p).collect()
}

fn basis(n: Vec3) -> (Vec3, Vec3) {
    let helper = if n[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = geom::normalize(geom::cross(n, helper));
    let v = geom::cross(n, u);
    (u, v)
}

/// Welds face vertices, drops vertices interior to a polytope edge and fans
/// each face from its lowest-index vertex.
fn triangulate(faces: &[Face]) -> Option<IndexedMesh> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut weld = |p: Vec3| -> usize {
        if let Some(i) = vertices.iter().position(|&q| geom::dist2(p, q) <= WELD * WELD) {
            return i;
        }
        vertices.push(p);
        vertices.len() - 1
    };
    let mut loops: Vec<(Vec<usize>, Vec3)> = Vec::with_capacity(faces.len());
    for f in faces {
        let ordered = sort_around(&f.poly, f.normal);
        let mut idx: Vec<usize> = ordered.into_iter().map(&mut weld).collect();
        idx.dedup();
        while idx.len() > 1 && idx.first() == idx.last() {
            idx.pop();
        }
        loops.push((idx, f.normal));
    }
    let mut triangles = Vec::new();
    for (mut idx, normal) in loops {
        // A vertex collinear with its neighbours lies inside an edge of the
        // polytope, so it is collinear in every face containing it too.
        loop {
            let m = idx.len();
            if m < 3 {
                break;
            }
            let pos = (0..m).find(|&k| {
                let (a, b, c) = (
                    vertices[idx[(k + m - 1) % m]],
                    vertices[idx[k]],
                    vertices[idx[(k + 1) % m]],
                );
                geom::dot(geom::cross(geom::sub(b, a), geom::sub(c, b)), normal) <= 1e-14
            });
            match pos {
                Some(k) => {
                    idx.remove(k);
                }
                None => break,
            }
        }
        if idx.len() < 3 {
            continue;
        }
        let start = (0..idx.len()).min_by_key(|&k| idx[k]).expect("non-empty");
        idx.rotate_left(start);
        for k in 1..idx.len() - 1 {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    if triangles.is_empty() {
        return None;
    }
    // Drop vertices no triangle references and compact indices.
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::new();
    for t in &mut triangles {
        for i in t.iter_mut() {
            if remap[*i] == usize::MAX {
                remap[*i] = kept.len();
                kept.push(vertices[*i]);
            }
            *i = remap[*i];
        }
    }
    Some(IndexedMesh::new(kept, triangles))
}
