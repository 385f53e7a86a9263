//! Surface and volume metrics against ground truth.
//!
//! Chamfer distance is the symmetric mean of squared nearest-neighbour
//! distances, reported in units of 10⁻³. Point-to-surface distance is the mean
//! exact Euclidean distance to the closest triangle, reported in units of
//! 10⁻². Nearest-neighbour queries go through a uniform grid with exact ring
//! termination, so they return the same minimum as a brute-force scan.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, ShapeData, ShapeRecord, Split};
use crate::error::{Error, Result};
use crate::geom::{self, IndexedMesh, Vec3};
use crate::latentops::reconstruct;
use crate::model::Model;
use crate::par::Execution;
use crate::shapegen::{Family, ProceduralShape};

pub const CD_UNIT: f64 = 1e-3;
pub const P2F_UNIT: f64 = 1e-2;
/// Surface samples per mesh for Chamfer distance.
pub const CD_SAMPLES: usize = 4096;
/// Uniform points for occupancy accuracy and IoU.
pub const OCC_POINTS: usize = 16384;

/// Area-weighted surface samples, each tagged with its source triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSample {
    pub points: Vec<Vec3>,
    pub triangles: Vec<usize>,
    pub seed: u64,
}

impl PointSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn sample_surface(mesh: &IndexedMesh, n: usize, seed: u64) -> Result<PointSample> {
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    let dist = WeightedIndex::new(&areas).map_err(|_| Error::Empty("mesh surface"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut triangles = Vec::with_capacity(n);
    for _ in 0..n {
        let t = dist.sample(&mut rng);
        let [a, b, c] = mesh.triangle(t);
        let r1: f64 = rng.gen::<f64>().sqrt();
        let r2: f64 = rng.gen();
        let (u, v, w) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        points.push([
            u * a[0] + v * b[0] + w * c[0],
            u * a[1] + v * b[1] + w * c[1],
            u * a[2] + v * b[2] + w * c[2],
        ]);
        triangles.push(t);
    }
    Ok(PointSample {
        points,
        triangles,
        seed,
    })
}

/// Uniform bucket grid over axis-aligned boxes of items.
struct Grid {
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl Grid {
    fn build(boxes: &[(Vec3, Vec3)]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for (lo, hi) in boxes {
            for k in 0..3 {
                min[k] = min[k].min(lo[k]);
                max[k] = max[k].max(hi[k]);
            }
        }
        let extent = (0..3).map(|k| max[k] - min[k]).fold(0.0, f64::max).max(1e-9);
        let per_axis = ((boxes.len() as f64).cbrt().ceil() as usize).clamp(1, 64);
        let cell = extent / per_axis as f64;
        let dims = [0, 1, 2].map(|k| (((max[k] - min[k]) / cell).floor() as usize + 1).min(per_axis + 1));
        let mut grid = Grid {
            min,
            cell,
            dims,
            buckets: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        for (i, (lo, hi)) in boxes.iter().enumerate() {
            let a = grid.cell_of(*lo);
            let b = grid.cell_of(*hi);
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        let k = grid.index([x, y, z]);
                        grid.buckets[k].push(i as u32);
                    }
                }
            }
        }
        grid
    }

    fn cell_of(&self, p: Vec3) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.min[k]) / self.cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[k] - 1)
            }
        })
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Smallest `dist2(p, item)` over all items. Rings of cells are visited
    /// in order of Chebyshev distance until no unvisited cell can hold a
    /// closer item.
    fn nearest(&self, p: Vec3, dist2: impl Fn(usize) -> f64) -> f64 {
        let c = self.cell_of(p);
        let c = [c[0] as isize, c[1] as isize, c[2] as isize];
        let max_ring = self.dims.iter().copied().max().unwrap_or(1) as isize;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for z in c[2] - ring..=c[2] + ring {
                for y in c[1] - ring..=c[1] + ring {
                    for x in c[0] - ring..=c[0] + ring {
                        let on_shell = (x - c[0]).abs() == ring || (y - c[1]).abs() == ring || (z - c[2]).abs() == ring;
                        if !on_shell || x < 0 || y < 0 || z < 0 {
                            continue;
                        }
                        let cell = [x as usize, y as usize, z as usize];
                        if (0..3).any(|k| cell[k] >= self.dims[k]) {
                            continue;
                        }
                        for &i in &self.buckets[self.index(cell)] {
                            best = best.min(dist2(i as usize));
                        }
                    }
                }
            }
            let reach = ring as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

fn mean_nearest(from: &[Vec3], to: &[Vec3], grid: &Grid, exec: Execution) -> f64 {
    let mins = exec.map_chunks(from.len(), 256, |r| {
        from[r]
            .iter()
            .map(|&p| grid.nearest(p, |i| geom::dist2(p, to[i])))
            .collect::<Vec<_>>()
    });
    mins.into_iter().flatten().sum::<f64>() / from.len() as f64
}

fn point_grid(points: &[Vec3]) -> Grid {
    let boxes: Vec<(Vec3, Vec3)> = points.iter().map(|&p| (p, p)).collect();
    Grid::build(&boxes)
}

/// Symmetric Chamfer distance in units of 10⁻³.
pub fn chamfer(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    chamfer_with(Execution::default(), p, q)
}

pub fn chamfer_with(exec: Execution, p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let pq = mean_nearest(p, q, &point_grid(q), exec);
    let qp = mean_nearest(q, p, &point_grid(p), exec);
    Ok((pq + qp) / CD_UNIT)
}

/// Brute-force Chamfer distance, same units and summation order.
pub fn chamfer_brute(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let one = |a: &[Vec3], b: &[Vec3]| {
        a.iter()
            .map(|&x| b.iter().map(|&y| geom::dist2(x, y)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok((one(p, q) + one(q, p)) / CD_UNIT)
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: Vec3, [a, b, c]: [Vec3; 3]) -> Vec3 {
    use geom::{add, dot, scale, sub};
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return add(a, scale(ab, d1 / (d1 - d3)));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return add(a, scale(ac, d2 / (d2 - d6)));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return add(b, scale(sub(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6))));
    }
    let denom = 1.0 / (va + vb + vc);
    add(a, add(scale(ab, vb * denom), scale(ac, vc * denom)))
}

pub fn point_triangle_distance(p: Vec3, tri: [Vec3; 3]) -> f64 {
    geom::dist2(p, closest_point_on_triangle(p, tri)).sqrt()
}

/// Exact distances from points to a triangle mesh.
pub struct MeshDistance<'a> {
    mesh: &'a IndexedMesh,
    grid: Grid,
}

impl<'a> MeshDistance<'a> {
    pub fn new(mesh: &'a IndexedMesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::Empty("mesh"));
        }
        let boxes: Vec<(Vec3, Vec3)> = (0..mesh.triangles.len())
            .map(|t| {
                let tri = mesh.triangle(t);
                let lo = [0, 1, 2].map(|k| tri[0][k].min(tri[1][k]).min(tri[2][k]));
                let hi = [0, 1, 2].map(|k| tri[0][k].max(tri[1][k]).max(tri[2][k]));
                (lo, hi)
            })
            .collect();
        Ok(Self {
            mesh,
            grid: Grid::build(&boxes),
        })
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.grid
            .nearest(p, |t| {
                geom::dist2(p, closest_point_on_triangle(p, self.mesh.triangle(t)))
            })
            .sqrt()
    }
}

/// Mean point-to-surface distance in units of 10⁻².
pub fn p2f(points: &[Vec3], mesh: &IndexedMesh) -> Result<f64> {
    p2f_with(Execution::default(), points, mesh)
}

pub fn p2f_with(exec: Execution, points: &[Vec3], mesh: &IndexedMesh) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let md = MeshDistance::new(mesh)?;
    let d = exec.map_chunks(points.len(), 256, |r| {
        points[r].iter().map(|&p| md.distance(p)).collect::<Vec<_>>()
    });
    Ok(d.into_iter().flatten().sum::<f64>() / points.len() as f64 / P2F_UNIT)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancyScore {
    pub accuracy: f64,
    pub iou: f64,
}

/// Uniform points in `[-1,1]³`, deterministic per seed.
pub fn uniform_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect()
}

/// Accuracy and IoU of a predicted inside test against the analytic solid.
/// Both indicator sets empty counts as IoU 1.
pub fn occupancy_metrics<E>(
    predict: impl FnOnce(&[Vec3]) -> std::result::Result<Vec<bool>, E>,
    shape: &ProceduralShape,
    n: usize,
    seed: u64,
) -> std::result::Result<OccupancyScore, E> {
    let points = uniform_points(n, seed);
    let pred = predict(&points)?;
    assert_eq!(pred.len(), points.len(), "prediction length");
    let (mut agree, mut both, mut either) = (0usize, 0usize, 0usize);
    for (p, &q) in points.iter().zip(&pred) {
        let gt = shape.occupancy(*p);
        agree += (gt == q) as usize;
        both += (gt && q) as usize;
        either += (gt || q) as usize;
    }
    Ok(OccupancyScore {
        accuracy: if n == 0 { 1.0 } else { agree as f64 / n as f64 },
        iou: if either == 0 { 1.0 } else { both as f64 / either as f64 },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Squared-distance Chamfer, units of 10⁻³.
    pub cd: f64,
    /// Units of 10⁻².
    pub p2f: f64,
    pub occ_accuracy: f64,
    pub iou: f64,
    pub surface_samples: usize,
    pub occupancy_points: usize,
    pub seed: u64,
}

/// Scores a predicted mesh and inside test against a ground-truth shape.
pub fn evaluate<E: From<Error>>(
    pred: &IndexedMesh,
    gt_mesh: &IndexedMesh,
    inside: impl FnOnce(&[Vec3]) -> std::result::Result<Vec<bool>, E>,
    shape: &ProceduralShape,
    seed: u64,
) -> std::result::Result<MetricReport, E> {
    let ps = sample_surface(pred, CD_SAMPLES, seed)?;
    let gs = sample_surface(gt_mesh, CD_SAMPLES, seed)?;
    let cd = chamfer(&ps.points, &gs.points)?;
    let p2f = p2f(&ps.points, gt_mesh)?;
    let occ = occupancy_metrics(inside, shape, OCC_POINTS, seed)?;
    Ok(MetricReport {
        cd,
        p2f,
        occ_accuracy: occ.accuracy,
        iou: occ.iou,
        surface_samples: CD_SAMPLES,
        occupancy_points: OCC_POINTS,
        seed,
    })
}

/// Index of the set with the smallest summed Chamfer distance to all others.
pub fn chamfer_medoid(sets: &[Vec<Vec3>], exec: Execution) -> Result<usize> {
    if sets.is_empty() {
        return Err(Error::Empty("medoid candidates"));
    }
    let n = sets.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let d = exec.map(&pairs, |&(i, j)| {
        chamfer_with(Execution::Sequential, &sets[i], &sets[j])
    });
    let mut total = vec![0.0; n];
    for (&(i, j), d) in pairs.iter().zip(d) {
        let d = d?;
        total[i] += d;
        total[j] += d;
    }
    Ok((0..n).min_by(|&a, &b| total[a].total_cmp(&total[b])).expect("nonempty"))
}

/// One evaluated shape.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub family: Family,
    pub genus: u32,
    pub report: MetricReport,
}

pub const TABLE_HEADER: &str = "id\tfamily\tgenus\tcd\tp2f\taccuracy\tiou";

/// Tab-separated table with a trailing `mean` row.
pub fn format_table(rows: &[EvalRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.id,
            r.family.name(),
            r.genus,
            m.cd,
            m.p2f,
            m.occ_accuracy,
            m.iou
        );
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricReport) -> f64| rows.iter().map(|r| f(&r.report)).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "mean\t-\t-\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            mean(|m| m.cd),
            mean(|m| m.p2f),
            mean(|m| m.occ_accuracy),
            mean(|m| m.iou)
        );
    }
    out
}

pub fn write_table(path: &Path, rows: &[EvalRow]) -> io::Result<()> {
    std::fs::write(path, format_table(rows))
}

/// Surface samples standing in for an empty reconstruction: the origin.
fn prediction_samples(mesh: &IndexedMesh, seed: u64) -> Result<Vec<Vec3>> {
    if mesh.triangles.is_empty() {
        return Ok(vec![[0.0; 3]]);
    }
    Ok(sample_surface(mesh, CD_SAMPLES, seed)?.points)
}

fn score(
    pred: &IndexedMesh,
    inside: &[bool],
    points: &[Vec3],
    record: &ShapeRecord,
    gt: &ShapeData,
    shape: &ProceduralShape,
    seed: u64,
) -> Result<EvalRow> {
    let ps = prediction_samples(pred, seed)?;
    let gs = sample_surface(&gt.mesh, CD_SAMPLES, seed)?;
    let cd = chamfer_with(Execution::Sequential, &ps, &gs.points)?;
    let p2f = if pred.triangles.is_empty() {
        MeshDistance::new(&gt.mesh)?.distance([0.0; 3]) / P2F_UNIT
    } else {
        p2f_with(Execution::Sequential, &ps, &gt.mesh)?
    };
    let occ = occupancy_metrics(|_| Ok::<_, Error>(inside.to_vec()), shape, points.len(), seed)?;
    Ok(EvalRow {
        id: record.id,
        family: record.family,
        genus: record.genus,
        report: MetricReport {
            cd,
            p2f,
            occ_accuracy: occ.accuracy,
            iou: occ.iou,
            surface_samples: CD_SAMPLES,
            occupancy_points: points.len(),
            seed,
        },
    })
}

/// Reconstructs every shape of a split and scores it against ground truth.
pub fn evaluate_model(model: &Model, ds: &Dataset, split: Split, seed: u64, exec: Execution) -> Result<Vec<EvalRow>> {
    let points = uniform_points(OCC_POINTS, seed);
    let idx = ds.indices(split);
    exec.map(&idx, |&i| {
        let record = &ds.manifest.shapes[i];
        let obs = ds.observation(i, model.config.input);
        let generation = reconstruct(model, &obs)?;
        let inside = model.inside(&generation.codes, &points)?;
        score(
            &generation.mesh,
            &inside,
            &points,
            record,
            &ds.data[i],
            &record.shape(),
            seed,
        )
    })
    .into_iter()
    .collect()
}

/// Ground truth scored against itself.
pub fn evaluate_reference(ds: &Dataset, split: Split, seed: u64, exec: Execution) -> Result<Vec<EvalRow>> {
    let points = uniform_points(OCC_POINTS, seed);
    let idx = ds.indices(split);
    exec.map(&idx, |&i| {
        let record = &ds.manifest.shapes[i];
        let shape = record.shape();
        let inside: Vec<bool> = points.iter().map(|&p| shape.occupancy(p)).collect();
        score(&ds.data[i].mesh, &inside, &points, record, &ds.data[i], &shape, seed)
    })
    .into_iter()
    .collect()
}

/// Samples per mesh when searching for the training-set medoid.
pub const MEDOID_SAMPLES: usize = 1024;

/// Constant-prediction baseline: every shape of `split` is answered with the
/// Chamfer medoid of the training meshes. Returns the medoid's manifest id
/// and the scored rows.
pub fn evaluate_medoid_baseline(
    ds: &Dataset,
    split: Split,
    seed: u64,
    exec: Execution,
) -> Result<(usize, Vec<EvalRow>)> {
    let train = ds.indices(Split::Train);
    let sets = exec
        .map(&train, |&i| {
            sample_surface(&ds.data[i].mesh, MEDOID_SAMPLES, seed).map(|s| s.points)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let m = train[chamfer_medoid(&sets, exec)?];
    let medoid = ds.manifest.shapes[m].shape();
    let points = uniform_points(OCC_POINTS, seed);
    let inside: Vec<bool> = points.iter().map(|&p| medoid.occupancy(p)).collect();
    let idx = ds.indices(split);
    let rows = exec
        .map(&idx, |&i| {
            let record = &ds.manifest.shapes[i];
            score(
                &ds.data[m].mesh,
                &inside,
                &points,
                record,
                &ds.data[i],
                &record.shape(),
                seed,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((ds.manifest.shapes[m].id, rows))
}

pub fn mean_cd(rows: &[EvalRow]) -> f64 {
    rows.iter().map(|r| r.report.cd).sum::<f64>() / rows.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::{gen_shape, marching_cubes};

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect()
    }

    fn triangle_mesh(tris: &[[Vec3; 3]]) -> IndexedMesh {
        let vertices = tris.iter().flatten().copied().collect();
        let triangles = (0..tris.len()).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
        IndexedMesh::new(vertices, triangles)
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap() * CD_UNIT, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_points(&mut rng, 200);
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert!(chamfer(&p, &[]).is_err());
    }

    #[test]
    fn accelerated_chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(1..300);
            let m = rng.gen_range(1..300);
            let p = random_points(&mut rng, n);
            let mut q = random_points(&mut rng, m);
            for x in &mut q {
                x[2] *= 0.01;
            }
            let fast = chamfer(&p, &q).unwrap();
            assert!((fast - chamfer_brute(&p, &q).unwrap()).abs() <= 1e-12);
            assert_eq!(fast, chamfer(&q, &p).unwrap());
        }
    }

    #[test]
    fn surface_samples_lie_on_their_triangles() {
        let tris = [
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 0.5, 1.0]],
        ];
        let mesh = triangle_mesh(&tris);
        let s = sample_surface(&mesh, 4000, 1).unwrap();
        for (p, &t) in s.points.iter().zip(&s.triangles) {
            assert!(point_triangle_distance(*p, mesh.triangle(t)) < 1e-9);
        }
        // area ratio 2:1
        let first = s.triangles.iter().filter(|&&t| t == 0).count() as f64;
        let expected = 4000.0 * 2.0 / 3.0;
        let sigma = (4000.0 * (2.0 / 3.0) * (1.0 / 3.0f64)).sqrt();
        assert!((first - expected).abs() < 3.0 * sigma);
        assert!(sample_surface(&mesh, 0, 1).unwrap().is_empty());
        assert!(sample_surface(&IndexedMesh::default(), 10, 1).is_err());
        assert_eq!(s, sample_surface(&mesh, 4000, 1).unwrap());
    }

    #[test]
    fn point_triangle_cases() {
        let tri = [[-1.0, -1.0, 0.0], [2.0, -1.0, 0.0], [-1.0, 2.0, 0.0]];
        assert_eq!(point_triangle_distance([0.0, 0.0, 1.0], tri), 1.0);
        assert_eq!(point_triangle_distance([0.5, 0.5, 0.0], tri), 0.0);
        let unit = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        // nearest to the hypotenuse, compared against dense barycentric sampling
        let p = [0.9, 0.9, 0.3];
        let exact = point_triangle_distance(p, unit);
        let k = 1414;
        let mut dense = f64::INFINITY;
        for i in 0..=k {
            for j in 0..=(k - i) {
                let q = [i as f64 / k as f64, j as f64 / k as f64, 0.0];
                dense = dense.min(geom::dist2(p, q));
            }
        }
        assert!((exact - dense.sqrt()).abs() < 1e-3);
        assert!((exact - (0.8f64 * 0.8 / 2.0 + 0.09).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn p2f_of_own_samples_is_zero() {
        let shape = gen_shape(Family::TorusFrame, 4);
        let mesh = marching_cubes(|p| shape.sdf(p), 0.0, 24).unwrap();
        let s = sample_surface(&mesh, 2000, 7).unwrap();
        assert!(p2f(&s.points, &mesh).unwrap() < 1e-9);
        let md = MeshDistance::new(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in random_points(&mut rng, 200) {
            let brute = (0..mesh.triangles.len())
                .map(|t| point_triangle_distance(p, mesh.triangle(t)))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(md.distance(p), brute);
        }
    }

    #[test]
    fn occupancy_examples() {
        let shape = gen_shape(Family::Box, 2);
        let perfect = occupancy_metrics(
            |ps: &[Vec3]| Ok::<_, ()>(ps.iter().map(|&p| shape.occupancy(p)).collect()),
            &shape,
            5000,
            1,
        )
        .unwrap();
        assert_eq!(
            perfect,
            OccupancyScore {
                accuracy: 1.0,
                iou: 1.0
            }
        );
        let empty = occupancy_metrics(|ps: &[Vec3]| Ok::<_, ()>(vec![false; ps.len()]), &shape, 5000, 1).unwrap();
        assert_eq!(empty.iou, 0.0);
        let n = 20000;
        let full = occupancy_metrics(|ps: &[Vec3]| Ok::<_, ()>(vec![true; ps.len()]), &shape, n, 5).unwrap();
        let frac = shape.volume() / 8.0;
        let sigma = (frac * (1.0 - frac) / n as f64).sqrt();
        assert!((full.iou - frac).abs() < 3.0 * sigma);
    }

    #[test]
    fn medoid_and_table() {
        let sets = vec![vec![[0.0, 0.0, 0.0]], vec![[0.1, 0.0, 0.0]], vec![[1.0, 0.0, 0.0]]];
        assert_eq!(chamfer_medoid(&sets, Execution::Parallel).unwrap(), 1);
        let report = MetricReport {
            cd: 1.0,
            p2f: 2.0,
            occ_accuracy: 0.5,
            iou: 0.25,
            surface_samples: 1,
            occupancy_points: 1,
            seed: 0,
        };
        let rows = vec![
            EvalRow {
                id: 3,
                family: Family::Box,
                genus: 0,
                report: report.clone(),
            },
            EvalRow {
                id: 4,
                family: Family::HFrame,
                genus: 0,
                report: MetricReport { cd: 3.0, ..report },
            },
        ];
        let table = format_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], TABLE_HEADER);
        assert!(lines[3].starts_with("mean\t-\t-\t2.000000\t"));
    }
}
