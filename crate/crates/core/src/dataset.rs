//! Procedural corpus on disk: `manifest.json`, one binary archive per split
//! (`train.bin`, `test.bin`) and ground-truth OBJ meshes under `meshes/`.
//!
//! Each archive record holds the voxel grid, the silhouette image and the
//! occupancy pairs of one shape. The manifest stores every record's byte
//! offset and an FNV-1a checksum, so truncation or bit rot is detected on load.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{InputKind, Observation};
use crate::error::{Error, IoContext, Result};
use crate::geom::IndexedMesh;
use crate::par::Execution;
use crate::shapegen::{
    gen_shape, marching_cubes_with, Axis, Family, OccupancySamples, ProceduralShape, SilhouetteImage, VoxelGrid,
};
use crate::training::Example;

const MAGIC: &[u8; 8] = b"NTDSET\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub shapes: usize,
    /// Fraction of every family held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
    pub points: usize,
    pub near_frac: f64,
    pub voxel_res: usize,
    pub image_res: usize,
    pub image_axis: Axis,
    /// Marching-cubes resolution of the ground-truth meshes.
    pub mesh_res: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            shapes: 200,
            test_fraction: 0.2,
            seed: 0,
            points: 4096,
            near_frac: 0.5,
            voxel_res: 32,
            image_res: 64,
            image_axis: Axis::Z,
            mesh_res: 64,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes == 0 || self.points == 0 || self.voxel_res == 0 || self.image_res == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.mesh_res < 2 {
            return Err(Error::Resolution(self.mesh_res));
        }
        if !(0.0..=1.0).contains(&self.near_frac) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(
                "dataset.near_frac in [0,1] and test_fraction in [0,1) required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: usize,
    pub family: Family,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub genus: u32,
    pub split: Split,
    /// Byte offset of the record inside its split archive.
    pub offset: u64,
    pub length: u64,
    pub checksum: u64,
    pub mesh: String,
}

impl ShapeRecord {
    /// Regenerates the analytic solid.
    pub fn shape(&self) -> ProceduralShape {
        gen_shape(self.family, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub shapes: Vec<ShapeRecord>,
}

/// Per-shape payload.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeData {
    pub voxels: VoxelGrid,
    pub image: SilhouetteImage,
    pub samples: OccupancySamples,
    pub mesh: IndexedMesh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Indexed like `manifest.shapes`.
    pub data: Vec<ShapeData>,
}

fn shape_seed(seed: u64, id: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng.gen()
}

impl Dataset {
    pub fn generate(cfg: &DatasetConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let families = Family::ALL;
        let mut split = vec![Split::Train; cfg.shapes];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (f, _) in families.iter().enumerate() {
            let mut ids: Vec<usize> = (0..cfg.shapes).filter(|i| i % families.len() == f).collect();
            ids.shuffle(&mut rng);
            let held = (cfg.test_fraction * ids.len() as f64).round() as usize;
            for &i in &ids[..held] {
                split[i] = Split::Test;
            }
        }
        let built = exec.map_range(cfg.shapes, |id| -> Result<(ShapeRecord, ShapeData)> {
            let family = families[id % families.len()];
            let seed = shape_seed(cfg.seed, id);
            let shape = gen_shape(family, seed);
            let data = ShapeData {
                voxels: shape.voxelize(cfg.voxel_res),
                image: shape.render_silhouette(cfg.image_axis, cfg.image_res),
                samples: shape.sample_occupancy(cfg.points, cfg.near_frac, seed ^ 0x5eed),
                mesh: marching_cubes_with(Execution::Sequential, |p| shape.sdf(p), 0.0, cfg.mesh_res)?,
            };
            let record = ShapeRecord {
                id,
                family,
                seed,
                params: shape.params.clone(),
                genus: shape.genus,
                split: split[id],
                offset: 0,
                length: 0,
                checksum: 0,
                mesh: format!("meshes/{id:04}.obj"),
            };
            Ok((record, data))
        });
        let mut shapes = Vec::with_capacity(cfg.shapes);
        let mut data = Vec::with_capacity(cfg.shapes);
        for b in built {
            let (r, d) = b?;
            shapes.push(r);
            data.push(d);
        }
        let mut ds = Dataset {
            manifest: Manifest {
                version: VERSION,
                config: cfg.clone(),
                shapes,
            },
            data,
        };
        ds.layout();
        Ok(ds)
    }

    /// Fills offsets, lengths and checksums from the encoded records.
    fn layout(&mut self) {
        for split in [Split::Train, Split::Test] {
            let mut offset = header_len();
            for (r, d) in self.manifest.shapes.iter_mut().zip(&self.data) {
                if r.split != split {
                    continue;
                }
                let bytes = encode_record(d);
                r.offset = offset;
                r.length = bytes.len() as u64;
                r.checksum = fnv1a(&bytes);
                offset += r.length;
            }
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.shapes.len())
            .filter(|&i| self.manifest.shapes[i].split == split)
            .collect()
    }

    pub fn observation(&self, i: usize, kind: InputKind) -> Observation {
        match kind {
            InputKind::Voxel => Observation::Voxels(self.data[i].voxels.clone()),
            InputKind::Image => Observation::Image(self.data[i].image.clone()),
        }
    }

    pub fn examples(&self, split: Split, kind: InputKind) -> Vec<Example> {
        self.indices(split)
            .into_iter()
            .map(|i| Example {
                obs: self.observation(i, kind),
                samples: self.data[i].samples.clone(),
            })
            .collect()
    }

    /// Looks a shape up by its manifest id.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.manifest.shapes.iter().position(|r| r.id == id)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("meshes")).context(|| format!("creating {}", dir.display()))?;
        for split in [Split::Train, Split::Test] {
            let path = dir.join(format!("{}.bin", split.name()));
            let mut out = Vec::new();
            write_header(&mut out, &self.manifest.config, self.indices(split).len());
            for i in self.indices(split) {
                out.extend(encode_record(&self.data[i]));
            }
            std::fs::write(&path, out).context(|| format!("writing {}", path.display()))?;
        }
        for (r, d) in self.manifest.shapes.iter().zip(&self.data) {
            let path = dir.join(&r.mesh);
            d.mesh
                .write_obj(&path, "part_")
                .context(|| format!("writing {}", path.display()))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = dir.join("manifest.json");
        std::fs::write(&path, json).context(|| format!("writing {}", path.display()))
    }

    /// Loads and verifies a corpus written by [`Dataset::write`]. Missing
    /// files surface as I/O errors; malformed content as [`Error::Corrupt`].
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).context(|| format!("reading {}", path.display()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        if manifest.version != VERSION {
            return Err(Error::Corrupt(format!("manifest version {}", manifest.version)));
        }
        let cfg = &manifest.config;
        let mut data: Vec<Option<ShapeData>> = vec![None; manifest.shapes.len()];
        for split in [Split::Train, Split::Test] {
            let path = dir.join(format!("{}.bin", split.name()));
            let bytes = std::fs::read(&path).context(|| format!("reading {}", path.display()))?;
            let count = manifest.shapes.iter().filter(|r| r.split == split).count();
            let mut header = Vec::new();
            write_header(&mut header, cfg, count);
            if bytes.len() < header.len() || bytes[..header.len()] != header[..] {
                return Err(Error::Corrupt(format!("{}: header mismatch", path.display())));
            }
            for (k, r) in manifest.shapes.iter().enumerate() {
                if r.split != split {
                    continue;
                }
                let (start, end) = (r.offset as usize, (r.offset + r.length) as usize);
                let chunk = bytes
                    .get(start..end)
                    .ok_or_else(|| Error::Corrupt(format!("shape {}: record outside {}", r.id, path.display())))?;
                if fnv1a(chunk) != r.checksum {
                    return Err(Error::Corrupt(format!("shape {}: checksum mismatch", r.id)));
                }
                let shape = r.shape();
                if shape.params != r.params || shape.genus != r.genus {
                    return Err(Error::Corrupt(format!(
                        "shape {}: parameters disagree with generator",
                        r.id
                    )));
                }
                let mesh_path = dir.join(&r.mesh);
                let obj = std::fs::read_to_string(&mesh_path).context(|| format!("reading {}", mesh_path.display()))?;
                let mesh =
                    IndexedMesh::from_obj(&obj).map_err(|e| Error::Corrupt(format!("{}: {e}", mesh_path.display())))?;
                let mut d = decode_record(chunk, cfg).map_err(|e| Error::Corrupt(format!("shape {}: {e}", r.id)))?;
                d.mesh = mesh;
                data[k] = Some(d);
            }
        }
        let data = data
            .into_iter()
            .map(|d| d.expect("every record belongs to a split"))
            .collect();
        Ok(Dataset { manifest, data })
    }
}

fn header_len() -> u64 {
    (MAGIC.len() + 4 * 6) as u64
}

fn write_header(out: &mut Vec<u8>, cfg: &DatasetConfig, count: usize) {
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        count as u32,
        cfg.voxel_res as u32,
        cfg.image_res as u32,
        cfg.points as u32,
        0,
    ] {
        out.write_u32::<LE>(v).expect("in-memory write");
    }
}

fn encode_record(d: &ShapeData) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&d.voxels.bits);
    for &p in &d.image.pixels {
        out.write_f64::<LE>(p).expect("in-memory write");
    }
    for p in &d.samples.points {
        for &c in p {
            out.write_f64::<LE>(c).expect("in-memory write");
        }
    }
    out.extend_from_slice(&d.samples.labels);
    out
}

fn decode_record(mut r: &[u8], cfg: &DatasetConfig) -> std::io::Result<ShapeData> {
    let mut bits = vec![0u8; cfg.voxel_res.pow(3)];
    r.read_exact(&mut bits)?;
    let mut pixels = vec![0.0; cfg.image_res * cfg.image_res];
    r.read_f64_into::<LE>(&mut pixels)?;
    let mut coords = vec![0.0; cfg.points * 3];
    r.read_f64_into::<LE>(&mut coords)?;
    let mut labels = vec![0u8; cfg.points];
    r.read_exact(&mut labels)?;
    if !r.is_empty() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "trailing bytes"));
    }
    Ok(ShapeData {
        voxels: VoxelGrid {
            res: cfg.voxel_res,
            bits,
        },
        image: SilhouetteImage {
            res: cfg.image_res,
            pixels,
        },
        samples: OccupancySamples {
            points: coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            labels,
        },
        mesh: IndexedMesh::default(),
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
