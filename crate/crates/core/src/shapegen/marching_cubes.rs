use std::collections::HashMap;

use super::mc_table::{CORNERS, EDGES, TRIANGLES};
use crate::error::{Error, Result};
use crate::geom::{IndexedMesh, Vec3};
use crate::par::Execution;

/// Iso-surface of `field` over `[-1, 1]^3` sampled on a `res^3` cell grid.
/// Inside is `field < iso`; triangles wind outward.
pub fn marching_cubes<F>(field: F, iso: f64, res: usize) -> Result<IndexedMesh>
where
    F: Fn(Vec3) -> f64 + Sync + Send,
{
    marching_cubes_with(Execution::default(), field, iso, res)
}

pub fn marching_cubes_with<F>(exec: Execution, field: F, iso: f64, res: usize) -> Result<IndexedMesh>
where
    F: Fn(Vec3) -> f64 + Sync + Send,
{
    if res < 2 {
        return Err(Error::Resolution(res));
    }
    let n = res + 1;
    let h = 2.0 / res as f64;
    let coord = |i: usize| -1.0 + i as f64 * h;
    // Values landing on the iso level are nudged outward so that no vertex
    // coincides with a grid corner, which would produce zero-area triangles.
    let delta = 1e-3 * h;
    let slices = exec.map_range(n, |k| {
        let mut out = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let f = field([coord(i), coord(j), coord(k)]) - iso;
                out.push(if f.abs() < delta { delta } else { f });
            }
        }
        out
    });
    let values: Vec<f64> = slices.into_iter().flatten().collect();
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;

    let mut mesh = IndexedMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0usize;
                for c in 0..8 {
                    let (a, b, d) = corner(c);
                    if values[idx(a, b, d)] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLES[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut out = [0usize; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let [c0, c1] = EDGES[e as usize];
                        let (p0, p1) = (corner(c0), corner(c1));
                        let (g0, g1) = (idx(p0.0, p0.1, p0.2), idx(p1.0, p1.1, p1.2));
                        let key = (g0.min(g1), g0.max(g1));
                        out[slot] = *edge_vertex.entry(key).or_insert_with(|| {
                            let (f0, f1) = (values[g0], values[g1]);
                            let t = f0 / (f0 - f1);
                            let a = [coord(p0.0), coord(p0.1), coord(p0.2)];
                            let b = [coord(p1.0), coord(p1.1), coord(p1.2)];
                            mesh.vertices.push(crate::geom::lerp(a, b, t));
                            mesh.vertices.len() - 1
                        });
                    }
                    // The table winds triangles inward for this inside convention.
                    mesh.triangles.push([out[0], out[2], out[1]]);
                }
            }
        }
    }
    Ok(mesh)
}
