//! Small 3-D vector helpers and the indexed triangle mesh shared by every
//! stage of the pipeline.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn lerp(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    [
        a[0] + t * (b[0] - a[0]),
        a[1] + t * (b[1] - a[1]),
        a[2] + t * (b[2] - a[2]),
    ]
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

/// Vertex list plus triangle list. `groups` optionally tags each triangle
/// with the part (e.g. convex) it belongs to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IndexedMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub groups: Vec<usize>,
}

impl IndexedMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            groups: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed volume by the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| dot(self.vertices[a], cross(self.vertices[b], self.vertices[c])) / 6.0)
            .sum()
    }

    pub fn indices_in_range(&self) -> bool {
        let n = self.vertices.len();
        self.triangles.iter().flatten().all(|&i| i < n)
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for &[a, b, c] in &self.triangles {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                *counts.entry((u.min(v), u.max(v))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        self.edge_counts().values().all(|&c| c == 2)
    }

    /// `V - E + F` over the vertices actually referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for &i in self.triangles.iter().flatten() {
            used[i] = true;
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        let e = self.edge_counts().len() as i64;
        v - e + self.triangles.len() as i64
    }

    /// Triangles of one group as a standalone mesh (vertices reindexed).
    pub fn group(&self, g: usize) -> IndexedMesh {
        let mut remap = HashMap::new();
        let mut out = IndexedMesh::default();
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.groups.get(t) != Some(&g) {
                continue;
            }
            let mut idx = [0; 3];
            for (k, &v) in tri.iter().enumerate() {
                idx[k] = *remap.entry(v).or_insert_with(|| {
                    out.vertices.push(self.vertices[v]);
                    out.vertices.len() - 1
                });
            }
            out.triangles.push(idx);
            out.groups.push(g);
        }
        out
    }

    pub fn group_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.groups.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Appends `other`, offsetting its indices.
    pub fn append(&mut self, other: &IndexedMesh) {
        let offset = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + offset)));
        self.groups.extend_from_slice(&other.groups);
    }

    /// Wavefront OBJ text. Grouped meshes get one `o` block per group.
    pub fn to_obj(&self, group_prefix: &str) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        let mut current = None;
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&g) = self.groups.get(t) {
                if current != Some(g) {
                    let _ = writeln!(s, "o {group_prefix}{g}");
                    current = Some(g);
                }
            }
            let _ = writeln!(s, "f {} {} {}", tri[0] + 1, tri[1] + 1, tri[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path, group_prefix: &str) -> io::Result<()> {
        std::fs::write(path, self.to_obj(group_prefix))
    }

    /// Parses the subset of OBJ written by [`IndexedMesh::to_obj`]:
    /// `v`, triangular `f` and `o` records.
    pub fn from_obj(text: &str) -> Result<Self, String> {
        let mut mesh = IndexedMesh::default();
        let mut group: Option<usize> = None;
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let bad = |what: &str| format!("line {}: {what}", lineno + 1);
            match parts.next() {
                Some("v") => {
                    let mut v = [0.0; 3];
                    for c in &mut v {
                        *c = parts
                            .next()
                            .and_then(|x| x.parse().ok())
                            .ok_or_else(|| bad("bad vertex"))?;
                    }
                    mesh.vertices.push(v);
                }
                Some("f") => {
                    let mut t = [0usize; 3];
                    for c in &mut t {
                        let tok = parts.next().ok_or_else(|| bad("short face"))?;
                        let idx: usize = tok
                            .split('/')
                            .next()
                            .and_then(|x| x.parse().ok())
                            .ok_or_else(|| bad("bad face index"))?;
                        if idx == 0 {
                            return Err(bad("zero face index"));
                        }
                        *c = idx - 1;
                    }
                    mesh.triangles.push(t);
                    if let Some(g) = group {
                        mesh.groups.push(g);
                    }
                }
                Some("o") | Some("g") => {
                    let name = parts.next().unwrap_or("");
                    let digits: String = name
                        .chars()
                        .rev()
                        .take_while(|c| c.is_ascii_digit())
                        .collect::<Vec<_>>()
                        .into_iter()
                        .rev()
                        .collect();
                    group = digits.parse().ok();
                }
                _ => {}
            }
        }
        if !mesh.groups.is_empty() && mesh.groups.len() != mesh.triangles.len() {
            return Err("faces outside any group in a grouped OBJ".into());
        }
        if !mesh.indices_in_range() {
            return Err("face index out of range".into());
        }
        Ok(mesh)
    }
}
