//! Procedural ground truth: unions of axis-aligned boxes whose genus is
//! known by construction, with exact occupancy, voxel and silhouette
//! renderings, occupancy-pair sampling and iso-surface meshes.

mod marching_cubes;
mod mc_table;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{self, Vec3};

pub use marching_cubes::{marching_cubes, marching_cubes_with};

/// Shapes are placed strictly inside `[-PLACEMENT, PLACEMENT]^3`.
pub const PLACEMENT: f64 = 0.9;
/// Near-surface samples lie within this distance of the surface.
pub const NEAR_BAND: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Box,
    TorusFrame,
    Table,
    RingStack,
    HFrame,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Box,
        Family::TorusFrame,
        Family::Table,
        Family::RingStack,
        Family::HFrame,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::TorusFrame => "torus-frame",
            Family::Table => "table",
            Family::RingStack => "ring-stack",
            Family::HFrame => "h-frame",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Family::Box => 0x9e37_79b9_7f4a_7c15,
            Family::TorusFrame => 0xc2b2_ae3d_27d4_eb4f,
            Family::Table => 0x1656_67b1_9e37_79f9,
            Family::RingStack => 0x27d4_eb2f_1656_67c5,
            Family::HFrame => 0x85eb_ca77_c2b2_ae63,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown family `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Self {
            min: geom::sub(center, half),
            max: geom::add(center, half),
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn strictly_contains(&self, p: Vec3, eps: f64) -> bool {
        (0..3).all(|i| p[i] > self.min[i] + eps && p[i] < self.max[i] - eps)
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }

    /// Exact signed distance (negative inside).
    pub fn sdf(&self, p: Vec3) -> f64 {
        let mut outside = 0.0;
        let mut inside = f64::NEG_INFINITY;
        for i in 0..3 {
            let c = 0.5 * (self.min[i] + self.max[i]);
            let h = 0.5 * (self.max[i] - self.min[i]);
            let q = (p[i] - c).abs() - h;
            outside += q.max(0.0).powi(2);
            inside = inside.max(q);
        }
        outside.sqrt() + inside.min(0.0)
    }

    fn permuted(&self, perm: [usize; 3], flip: [bool; 3]) -> Self {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for i in 0..3 {
            let (lo, hi) = (self.min[perm[i]], self.max[perm[i]]);
            if flip[i] {
                min[i] = -hi;
                max[i] = -lo;
            } else {
                min[i] = lo;
                max[i] = hi;
            }
        }
        Self { min, max }
    }

    fn translated(&self, t: Vec3) -> Self {
        Self {
            min: geom::add(self.min, t),
            max: geom::add(self.max, t),
        }
    }
}

/// A ground-truth solid: the union of `boxes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralShape {
    pub family: Family,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub genus: u32,
    pub boxes: Vec<Aabb>,
}

/// Deterministic shape of the given family; variant (table legs, ring-stack
/// genus) drawn from the seed.
pub fn gen_shape(family: Family, seed: u64) -> ProceduralShape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family.salt());
    let variant = match family {
        Family::Table => rng.gen_range(3..=4),
        Family::RingStack => rng.gen_range(2..=4),
        _ => 0,
    };
    build(family, seed, variant, &mut rng)
}

/// Like [`gen_shape`] with an explicit variant: leg count (3 or 4) for
/// tables, genus (2 to 4) for ring stacks; ignored otherwise.
pub fn gen_shape_variant(family: Family, seed: u64, variant: u32) -> ProceduralShape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family.salt());
    // Keep the stream aligned with `gen_shape`.
    if matches!(family, Family::Table | Family::RingStack) {
        let _: u32 = rng.gen_range(0..8);
    }
    let variant = match family {
        Family::Table => variant.clamp(3, 4),
        Family::RingStack => variant.clamp(2, 4),
        _ => 0,
    };
    build(family, seed, variant, &mut rng)
}

fn build(family: Family, seed: u64, variant: u32, rng: &mut ChaCha8Rng) -> ProceduralShape {
    let mut params = BTreeMap::new();
    let mut p = |name: &str, lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        let v = rng.gen_range(lo..hi);
        params.insert(name.to_owned(), v);
        v
    };
    let slab = |x0: f64, x1: f64, y0: f64, y1: f64, z0: f64, z1: f64| Aabb {
        min: [x0, y0, z0],
        max: [x1, y1, z1],
    };
    let (local, genus) = match family {
        Family::Box => {
            let hx = p("half_x", 0.2, 0.75, rng);
            let hy = p("half_y", 0.2, 0.75, rng);
            let hz = p("half_z", 0.2, 0.75, rng);
            (vec![Aabb::from_center([0.0; 3], [hx, hy, hz])], 0)
        }
        Family::TorusFrame => {
            let w = p("half_width", 0.45, 0.8, rng);
            let h = p("half_height", 0.45, 0.8, rng);
            let b = p("bar", 0.12, 0.25, rng);
            let d = p("half_depth", 0.06, 0.25, rng);
            (
                vec![
                    slab(-w, w, h - b, h, -d, d),
                    slab(-w, w, -h, -h + b, -d, d),
                    slab(-w, -w + b, -h, h, -d, d),
                    slab(w - b, w, -h, h, -d, d),
                ],
                1,
            )
        }
        Family::Table => {
            let a = p("half_width", 0.4, 0.8, rng);
            let c = p("half_depth", 0.4, 0.8, rng);
            let hh = p("half_height", 0.35, 0.7, rng);
            let tt = p("top", 0.08, 0.2, rng);
            let l = p("leg", 0.05, 0.1, rng);
            let inset = p("inset", 0.0, 0.1, rng);
            let mut boxes = vec![slab(-a, a, hh - tt, hh, -c, c)];
            let (lx, lz) = (a - l - inset, c - l - inset);
            let feet: Vec<(f64, f64)> = if variant == 4 {
                vec![(-lx, -lz), (-lx, lz), (lx, -lz), (lx, lz)]
            } else {
                vec![(-lx, -lz), (-lx, lz), (lx, 0.0)]
            };
            for (x, z) in feet {
                boxes.push(slab(x - l, x + l, -hh, hh - 0.5 * tt, z - l, z + l));
            }
            (boxes, 0)
        }
        Family::RingStack => {
            let g = variant;
            let w = p("half_width", 0.35, 0.7, rng);
            let h = p("half_height", 0.7, 0.85, rng);
            let b = p("bar", 0.1, 0.14, rng);
            let d = p("half_depth", 0.06, 0.2, rng);
            let mut boxes = vec![slab(-w, -w + b, -h, h, -d, d), slab(w - b, w, -h, h, -d, d)];
            let pitch = (2.0 * h - b) / g as f64;
            for k in 0..=g {
                let y0 = -h + k as f64 * pitch;
                boxes.push(slab(-w, w, y0, y0 + b, -d, d));
            }
            (boxes, g)
        }
        Family::HFrame => {
            let w = p("half_width", 0.4, 0.75, rng);
            let h = p("half_height", 0.5, 0.85, rng);
            let b = p("bar", 0.12, 0.25, rng);
            let d = p("half_depth", 0.06, 0.25, rng);
            let c = p("bar_offset", -0.2, 0.2, rng);
            (
                vec![
                    slab(-w, -w + b, -h, h, -d, d),
                    slab(w - b, w, -h, h, -d, d),
                    slab(-w, w, c - 0.5 * b, c + 0.5 * b, -d, d),
                ],
                0,
            )
        }
    };

    match family {
        Family::Table => params.insert("legs".into(), variant as f64),
        Family::RingStack => params.insert("genus".into(), variant as f64),
        _ => None,
    };

    // Pose: axis permutation, per-axis flips, translation inside the placement box.
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    let flip = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let posed: Vec<Aabb> = local.iter().map(|b| b.permuted(perm, flip)).collect();
    let (lo, hi) = bounds(&posed);
    let mut t = [0.0; 3];
    for i in 0..3 {
        let margin = 0.02;
        let min_t = -PLACEMENT + margin - lo[i];
        let max_t = PLACEMENT - margin - hi[i];
        t[i] = if max_t > min_t {
            rng.gen_range(min_t..max_t)
        } else {
            0.5 * (min_t + max_t)
        };
    }
    let boxes = posed.iter().map(|b| b.translated(t)).collect();
    ProceduralShape {
        family,
        seed,
        params,
        genus,
        boxes,
    }
}

fn bounds(boxes: &[Aabb]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for b in boxes {
        for i in 0..3 {
            lo[i] = lo[i].min(b.min[i]);
            hi[i] = hi[i].max(b.max[i]);
        }
    }
    (lo, hi)
}

impl ProceduralShape {
    /// A solid made of the given boxes (used for hand-built fixtures).
    pub fn from_boxes(family: Family, genus: u32, boxes: Vec<Aabb>) -> Self {
        Self {
            family,
            seed: 0,
            params: BTreeMap::new(),
            genus,
            boxes,
        }
    }

    pub fn empty() -> Self {
        Self::from_boxes(Family::Box, 0, Vec::new())
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds(&self.boxes)
    }

    /// Exact CSG-union membership.
    pub fn occupancy(&self, p: Vec3) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    /// Signed distance bound of the union (exact outside), negative inside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.boxes.iter().map(|b| b.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Exact volume of the union by coordinate compression.
    pub fn volume(&self) -> f64 {
        let mut cuts: [Vec<f64>; 3] = Default::default();
        for b in &self.boxes {
            for i in 0..3 {
                cuts[i].push(b.min[i]);
                cuts[i].push(b.max[i]);
            }
        }
        for c in &mut cuts {
            c.sort_by(f64::total_cmp);
            c.dedup();
        }
        let mut vol = 0.0;
        for x in cuts[0].windows(2) {
            for y in cuts[1].windows(2) {
                for z in cuts[2].windows(2) {
                    let mid = [0.5 * (x[0] + x[1]), 0.5 * (y[0] + y[1]), 0.5 * (z[0] + z[1])];
                    if self.occupancy(mid) {
                        vol += (x[1] - x[0]) * (y[1] - y[0]) * (z[1] - z[0]);
                    }
                }
            }
        }
        vol
    }

    /// Voxel grid over `[-1, 1]^3` sampled at cell centres.
    pub fn voxelize(&self, res: usize) -> VoxelGrid {
        let h = 2.0 / res as f64;
        let mut bits = Vec::with_capacity(res * res * res);
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let c = [
                        -1.0 + (i as f64 + 0.5) * h,
                        -1.0 + (j as f64 + 0.5) * h,
                        -1.0 + (k as f64 + 0.5) * h,
                    ];
                    bits.push(self.occupancy(c) as u8);
                }
            }
        }
        VoxelGrid { res, bits }
    }

    /// Orthographic coverage image along `axis`: each pixel is the fraction
    /// of its 2x2 stratified sub-rays that hit the solid.
    pub fn render_silhouette(&self, axis: Axis, res: usize) -> SilhouetteImage {
        let (u_axis, v_axis) = axis.image_axes();
        let h = 2.0 / res as f64;
        let mut pixels = Vec::with_capacity(res * res);
        for v in 0..res {
            for u in 0..res {
                let mut hits = 0;
                for (su, sv) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let x = -1.0 + (u as f64 + su) * h;
                    let y = -1.0 + (v as f64 + sv) * h;
                    let hit = self
                        .boxes
                        .iter()
                        .any(|b| x >= b.min[u_axis] && x <= b.max[u_axis] && y >= b.min[v_axis] && y <= b.max[v_axis]);
                    hits += hit as u32;
                }
                pixels.push(hits as f64 / 4.0);
            }
        }
        SilhouetteImage { res, pixels }
    }

    /// Occupancy pairs: `ceil(near_frac * n)` points within [`NEAR_BAND`] of
    /// the surface, the rest uniform in `[-1, 1]^3`.
    pub fn sample_occupancy(&self, n: usize, near_frac: f64, seed: u64) -> OccupancySamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let near = if self.boxes.is_empty() {
            0
        } else {
            ((near_frac.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n)
        };
        let mut points = Vec::with_capacity(n);
        if near > 0 {
            let faces = self.faces();
            let total: f64 = faces.iter().map(|f| f.area).sum();
            while points.len() < near {
                let s = self.surface_point(&faces, total, &mut rng);
                points.push(geom::add(s, ball_offset(&mut rng, NEAR_BAND)));
            }
        }
        while points.len() < n {
            points.push([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
        }
        let labels = points.iter().map(|&p| self.occupancy(p) as u8).collect();
        OccupancySamples { points, labels }
    }

    fn faces(&self) -> Vec<BoxFace> {
        let mut faces = Vec::with_capacity(self.boxes.len() * 6);
        for b in &self.boxes {
            for axis in 0..3 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let area = (b.max[u] - b.min[u]) * (b.max[v] - b.min[v]);
                for at in [b.min[axis], b.max[axis]] {
                    faces.push(BoxFace { bx: *b, axis, at, area });
                }
            }
        }
        faces
    }

    /// Uniform point on the union boundary: uniform on box faces, rejecting
    /// face points buried inside another box.
    fn surface_point(&self, faces: &[BoxFace], total: f64, rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let mut r = rng.gen_range(0.0..total);
            let mut face = &faces[faces.len() - 1];
            for f in faces {
                if r < f.area {
                    face = f;
                    break;
                }
                r -= f.area;
            }
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = if i == face.axis {
                    face.at
                } else {
                    rng.gen_range(face.bx.min[i]..=face.bx.max[i])
                };
            }
            // A face point is on the boundary unless some other box strictly
            // surrounds it.
            if !self.boxes.iter().any(|b| b.strictly_contains(p, 1e-12)) {
                return p;
            }
        }
    }
}

struct BoxFace {
    bx: Aabb,
    axis: usize,
    at: f64,
    area: f64,
}

fn ball_offset(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    loop {
        let d = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if geom::dot(d, d) <= 1.0 {
            return geom::scale(d, radius);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    /// Image (u, v) world axes when looking along `self`.
    fn image_axes(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

/// `res^3` occupancy bits over `[-1, 1]^3`, x fastest: index `(k * res + j) * res + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    pub res: usize,
    pub bits: Vec<u8>,
}

impl VoxelGrid {
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[(k * self.res + j) * self.res + i] != 0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

/// `res x res` coverage values in `[0, 1]`, row-major (v rows, u columns).
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteImage {
    pub res: usize,
    pub pixels: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OccupancySamples {
    pub points: Vec<Vec3>,
    pub labels: Vec<u8>,
}

impl OccupancySamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
