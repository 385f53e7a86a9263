//! Generation by code manipulation: reconstruction, remixing topology and
//! shape codes across objects, interpolation along one code, and latent
//! arithmetic. Every operation resolves to a code pair and then runs the same
//! template-extraction and deformation path.

use serde::{Deserialize, Serialize};

use crate::encoder::{LatentPair, Observation};
use crate::error::{Error, Result};
use crate::geom::IndexedMesh;
use crate::model::Model;
use crate::par::Execution;
use crate::topology::{NeuralTemplate, TemplateMesh, CLIP_HALF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Topology,
    Shape,
}

impl std::str::FromStr for CodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topology" => Ok(CodeKind::Topology),
            "shape" => Ok(CodeKind::Shape),
            _ => Err(Error::Config(format!("unknown code `{s}` (topology|shape)"))),
        }
    }
}

/// Template and deformed mesh for one code pair. Both meshes share the
/// triangle index list; an empty template yields two empty meshes.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub codes: LatentPair,
    pub template: TemplateMesh,
    pub mesh: IndexedMesh,
}

impl Generation {
    pub fn is_empty(&self) -> bool {
        self.template.is_empty()
    }
}

fn check_dims(a: &LatentPair, b: &LatentPair) -> Result<()> {
    if a.zt.len() != b.zt.len() {
        return Err(Error::CodeDimension(b.zt.len(), a.zt.len()));
    }
    if a.zs.len() != b.zs.len() {
        return Err(Error::CodeDimension(b.zs.len(), a.zs.len()));
    }
    Ok(())
}

/// Topology code of `a`, shape code of `b`.
pub fn remix_codes(a: &LatentPair, b: &LatentPair) -> Result<LatentPair> {
    check_dims(a, b)?;
    Ok(LatentPair {
        zt: a.zt.clone(),
        zs: b.zs.clone(),
    })
}

/// Blends the selected code as `(1-t) a + t b`; the other code stays at `a`.
pub fn interpolate_codes(a: &LatentPair, b: &LatentPair, which: CodeKind, t: f64) -> Result<LatentPair> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(t));
    }
    check_dims(a, b)?;
    let lerp = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(&x, &y)| (1.0 - t) * x + t * y).collect();
    let mut out = a.clone();
    match which {
        CodeKind::Topology => out.zt = lerp(&a.zt, &b.zt),
        CodeKind::Shape => out.zs = lerp(&a.zs, &b.zs),
    }
    Ok(out)
}

/// `base + (plus - minus)` on the selected code; the other code stays at `base`.
pub fn arithmetic_codes(
    base: &LatentPair,
    plus: &LatentPair,
    minus: &LatentPair,
    which: CodeKind,
) -> Result<LatentPair> {
    check_dims(base, plus)?;
    check_dims(base, minus)?;
    let apply = |x: &[f64], p: &[f64], m: &[f64]| x.iter().zip(p).zip(m).map(|((&x, &p), &m)| x + (p - m)).collect();
    let mut out = base.clone();
    match which {
        CodeKind::Topology => out.zt = apply(&base.zt, &plus.zt, &minus.zt),
        CodeKind::Shape => out.zs = apply(&base.zs, &plus.zs, &minus.zs),
    }
    Ok(out)
}

pub fn generate(model: &Model, codes: LatentPair) -> Result<Generation> {
    let (template, mesh) = model.generate(&codes.zt, &codes.zs)?;
    Ok(Generation { codes, template, mesh })
}

pub fn reconstruct(model: &Model, input: &Observation) -> Result<Generation> {
    generate(model, model.encode(input)?)
}

pub fn remix(model: &Model, a: &Observation, b: &Observation) -> Result<Generation> {
    generate(model, remix_codes(&model.encode(a)?, &model.encode(b)?)?)
}

pub fn interpolate(model: &Model, a: &Observation, b: &Observation, which: CodeKind, t: f64) -> Result<Generation> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(t));
    }
    generate(
        model,
        interpolate_codes(&model.encode(a)?, &model.encode(b)?, which, t)?,
    )
}

pub fn arithmetic(
    model: &Model,
    base: &Observation,
    plus: &Observation,
    minus: &Observation,
    which: CodeKind,
) -> Result<Generation> {
    let codes = arithmetic_codes(&model.encode(base)?, &model.encode(plus)?, &model.encode(minus)?, which)?;
    generate(model, codes)
}

/// One entry of a batch manifest. Inputs are dataset shape ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum GenerationRequest {
    Reconstruct {
        input: usize,
    },
    Remix {
        a: usize,
        b: usize,
    },
    Interpolate {
        a: usize,
        b: usize,
        code: CodeKind,
        t: f64,
    },
    Arithmetic {
        base: usize,
        plus: usize,
        minus: usize,
        code: CodeKind,
    },
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GenerationRequest::Interpolate { t, .. } if !(0.0..=1.0).contains(&t) => Err(Error::OutOfRange(t)),
            _ => Ok(()),
        }
    }

    /// Short file-name stem such as `remix_3_7`.
    pub fn label(&self) -> String {
        match self {
            GenerationRequest::Reconstruct { input } => format!("reconstruct_{input}"),
            GenerationRequest::Remix { a, b } => format!("remix_{a}_{b}"),
            GenerationRequest::Interpolate { a, b, code, t } => {
                format!("interp_{}_{a}_{b}_t{t}", code_name(*code))
            }
            GenerationRequest::Arithmetic {
                base,
                plus,
                minus,
                code,
            } => {
                format!("arith_{}_{base}_{plus}_{minus}", code_name(*code))
            }
        }
    }

    /// Runs the request, encoding inputs through `lookup`.
    pub fn run(&self, model: &Model, lookup: impl Fn(usize) -> Result<Observation>) -> Result<Generation> {
        self.validate()?;
        match *self {
            GenerationRequest::Reconstruct { input } => reconstruct(model, &lookup(input)?),
            GenerationRequest::Remix { a, b } => remix(model, &lookup(a)?, &lookup(b)?),
            GenerationRequest::Interpolate { a, b, code, t } => interpolate(model, &lookup(a)?, &lookup(b)?, code, t),
            GenerationRequest::Arithmetic {
                base,
                plus,
                minus,
                code,
            } => arithmetic(model, &lookup(base)?, &lookup(plus)?, &lookup(minus)?, code),
        }
    }
}

fn code_name(c: CodeKind) -> &'static str {
    match c {
        CodeKind::Topology => "topology",
        CodeKind::Shape => "shape",
    }
}

/// Topology of a voxelized solid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SolidTopology {
    /// Connected components under 26-connectivity.
    pub components: usize,
    /// Euler characteristic of the union of closed voxel cubes.
    pub euler: i64,
    /// `components - euler`, the total handle count when the solid has no
    /// internal cavities.
    pub genus: i64,
}

/// Topology of the union of closed unit cubes marked in `occupied`
/// (`n³` cells, x fastest).
pub fn solid_topology(occupied: &[bool], n: usize) -> SolidTopology {
    assert_eq!(occupied.len(), n * n * n, "occupancy grid size");
    let cell = |x: isize, y: isize, z: isize| -> bool {
        let r = 0..n as isize;
        r.contains(&x) && r.contains(&y) && r.contains(&z) && occupied[((z as usize * n) + y as usize) * n + x as usize]
    };
    let m = n as isize;
    let (mut v, mut e, mut f, mut c) = (0i64, 0i64, 0i64, 0i64);
    for z in 0..=m {
        for y in 0..=m {
            for x in 0..=m {
                // lattice point (x, y, z) touches cells with offsets in {-1, 0}
                let touch = |dx: &[isize], dy: &[isize], dz: &[isize]| {
                    dz.iter()
                        .any(|&a| dy.iter().any(|&b| dx.iter().any(|&d| cell(x + d, y + b, z + a))))
                };
                let both = [-1, 0];
                let zero = [0];
                v += touch(&both, &both, &both) as i64;
                e += touch(&zero, &both, &both) as i64;
                e += touch(&both, &zero, &both) as i64;
                e += touch(&both, &both, &zero) as i64;
                f += touch(&both, &zero, &zero) as i64;
                f += touch(&zero, &both, &zero) as i64;
                f += touch(&zero, &zero, &both) as i64;
                c += cell(x, y, z) as i64;
            }
        }
    }
    let euler = v - e + f - c;
    let components = components_26(occupied, n);
    SolidTopology {
        components,
        euler,
        genus: components as i64 - euler,
    }
}

fn components_26(occupied: &[bool], n: usize) -> usize {
    let mut seen = vec![false; occupied.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..occupied.len() {
        if !occupied[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y, z) = ((i % n) as isize, ((i / n) % n) as isize, (i / (n * n)) as isize);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (a, b, c) = (x + dx, y + dy, z + dz);
                        if a < 0 || b < 0 || c < 0 || a >= n as isize || b >= n as isize || c >= n as isize {
                            continue;
                        }
                        let j = ((c as usize * n) + b as usize) * n + a as usize;
                        if occupied[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
    }
    count
}

/// Voxel resolution of the template genus audit.
pub const AUDIT_RES: usize = 48;

/// Topology of the implicit template sampled at cell centres over the
/// clipping cube.
pub fn template_topology(template: &NeuralTemplate, res: usize, exec: Execution) -> SolidTopology {
    let h = 2.0 * CLIP_HALF / res as f64;
    let occupied: Vec<bool> = exec
        .map_range(res * res, |zy| {
            let (z, y) = (zy / res, zy % res);
            (0..res)
                .map(|x| {
                    let c = |i: usize| -CLIP_HALF + (i as f64 + 0.5) * h;
                    template.is_inside([c(x), c(y), c(z)])
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
    solid_topology(&occupied, res)
}

/// Outcome of adding a topology-code difference to base shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenusAudit {
    pub triples: usize,
    /// Triples whose template genus rose after the edit.
    pub increased: usize,
    pub fraction: f64,
}

/// For each `(base, plus, minus)`, compares the template genus of `base`
/// before and after adding `zt(plus) - zt(minus)` to its topology code.
pub fn genus_transfer_audit(
    model: &Model,
    triples: &[(&Observation, &Observation, &Observation)],
    exec: Execution,
) -> Result<GenusAudit> {
    let mut increased = 0;
    for (base, plus, minus) in triples {
        let b = model.encode(base)?;
        let edited = arithmetic_codes(&b, &model.encode(plus)?, &model.encode(minus)?, CodeKind::Topology)?;
        let before = template_topology(&model.form_template(&b.zt)?, AUDIT_RES, exec);
        let after = template_topology(&model.form_template(&edited.zt)?, AUDIT_RES, exec);
        increased += (after.genus > before.genus) as usize;
    }
    Ok(GenusAudit {
        triples: triples.len(),
        increased,
        fraction: if triples.is_empty() {
            0.0
        } else {
            increased as f64 / triples.len() as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(zt: Vec<f64>, zs: Vec<f64>) -> LatentPair {
        LatentPair { zt, zs }
    }

    #[test]
    fn code_endpoints_are_exact() {
        let a = pair(vec![0.1, -3.0, 1e-20], vec![7.0, 0.3]);
        let b = pair(vec![2.0, 5.5, 1.0], vec![-1.0, 1e10]);
        assert_eq!(interpolate_codes(&a, &b, CodeKind::Shape, 0.0).unwrap(), a);
        assert_eq!(
            interpolate_codes(&a, &b, CodeKind::Shape, 1.0).unwrap(),
            remix_codes(&a, &b).unwrap()
        );
        assert_eq!(interpolate_codes(&a, &b, CodeKind::Topology, 1.0).unwrap().zt, b.zt);
        assert_eq!(arithmetic_codes(&a, &b, &b, CodeKind::Topology).unwrap(), a);
        assert_eq!(arithmetic_codes(&a, &b, &b, CodeKind::Shape).unwrap(), a);
        assert!(matches!(
            interpolate_codes(&a, &b, CodeKind::Shape, 1.5),
            Err(Error::OutOfRange(_))
        ));
        let short = pair(vec![1.0], vec![1.0, 2.0]);
        assert!(matches!(remix_codes(&a, &short), Err(Error::CodeDimension(1, 3))));
        assert!(arithmetic_codes(&a, &b, &short, CodeKind::Shape).is_err());
    }

    fn grid(n: usize, f: impl Fn(usize, usize, usize) -> bool) -> Vec<bool> {
        let mut g = vec![false; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    g[(z * n + y) * n + x] = f(x, y, z);
                }
            }
        }
        g
    }

    #[test]
    fn voxel_topology() {
        let n = 8;
        let block = grid(n, |x, y, z| {
            (2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z)
        });
        assert_eq!(
            solid_topology(&block, n),
            SolidTopology {
                components: 1,
                euler: 1,
                genus: 0
            }
        );
        let ring = grid(n, |x, y, z| {
            (1..7).contains(&x) && (1..7).contains(&y) && z == 3 && !((3..5).contains(&x) && (3..5).contains(&y))
        });
        assert_eq!(solid_topology(&ring, n).genus, 1);
        let two = grid(n, |x, y, z| (x == 0 || x == 7) && y == 0 && z == 0);
        assert_eq!(
            solid_topology(&two, n),
            SolidTopology {
                components: 2,
                euler: 2,
                genus: 0
            }
        );
        // corner-touching cubes share a vertex, so they form one component
        let diag = grid(n, |x, y, z| x == y && y == z && x < 2);
        assert_eq!(
            solid_topology(&diag, n),
            SolidTopology {
                components: 1,
                euler: 1,
                genus: 0
            }
        );
        let two_holes = grid(n, |x, y, z| z == 0 && y < 3 && x < 5 && !(y == 1 && (x == 1 || x == 3)));
        assert_eq!(solid_topology(&two_holes, n).genus, 2);
    }

    #[test]
    fn requests_parse_and_validate() {
        let r: GenerationRequest =
            serde_json::from_str(r#"{"op":"interpolate","a":1,"b":2,"code":"shape","t":0.5}"#).unwrap();
        assert_eq!(
            r,
            GenerationRequest::Interpolate {
                a: 1,
                b: 2,
                code: CodeKind::Shape,
                t: 0.5
            }
        );
        assert_eq!(r.label(), "interp_shape_1_2_t0.5");
        let bad = GenerationRequest::Interpolate {
            a: 1,
            b: 2,
            code: CodeKind::Shape,
            t: -0.1,
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<GenerationRequest>(r#"{"op":"remix","a":1}"#).is_err());
    }
}
