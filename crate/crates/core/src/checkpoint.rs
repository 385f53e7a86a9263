//! Versioned little-endian checkpoint: model configuration, stage flag,
//! every named parameter with its Adam moments, and the trainer's step and
//! RNG position. Floats are stored as raw bits, so a round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::error::{Error, IoContext, Result};
use crate::model::{Model, ModelConfig};
use crate::training::TrainerState;

const MAGIC: &[u8; 8] = b"NTCKPT\0\0";
const VERSION: u32 = 1;

pub fn save(path: &Path, model: &Model, state: &TrainerState) -> Result<()> {
    let file = File::create(path).context(|| format!("creating checkpoint {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, model, state).context(|| format!("writing checkpoint {}", path.display()))?;
    w.flush().context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load(path: &Path) -> Result<(Model, TrainerState)> {
    let file = File::open(path).context(|| format!("opening checkpoint {}", path.display()))?;
    read_from(&mut BufReader::new(file))
}

pub fn to_bytes(model: &Model, state: &TrainerState) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(&mut buf, model, state).expect("writing to memory");
    buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, TrainerState)> {
    read_from(&mut &bytes[..])
}

fn write_to(w: &mut impl Write, model: &Model, state: &TrainerState) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    write_bytes(w, &config)?;
    w.write_u8(model.stage)?;
    w.write_u64::<LE>(state.step)?;
    w.write_all(&state.rng.get_seed())?;
    w.write_u64::<LE>(state.rng.get_stream())?;
    w.write_u128::<LE>(state.rng.get_word_pos())?;
    let store = &model.store;
    w.write_u64::<LE>(store.step())?;
    w.write_u32::<LE>(store.len() as u32)?;
    for id in store.ids() {
        write_bytes(w, store.name(id).as_bytes())?;
        let (m, v) = store.moments(id);
        let value = store.value(id);
        w.write_u32::<LE>(value.shape().len() as u32)?;
        for &d in value.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        for t in [value, m, v] {
            for &x in t.data() {
                w.write_u64::<LE>(x.to_bits())?;
            }
        }
    }
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LE>(b.len() as u64)?;
    w.write_all(b)
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Corrupt(what.into())
}

fn read_bytes(r: &mut impl Read, limit: u64) -> Result<Vec<u8>> {
    let n = r.read_u64::<LE>().map_err(|e| corrupt(e.to_string()))?;
    if n > limit {
        return Err(corrupt(format!("field length {n} exceeds {limit}")));
    }
    let mut buf = vec![0; n as usize];
    r.read_exact(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    Ok(buf)
}

fn read_from(r: &mut impl Read) -> Result<(Model, TrainerState)> {
    let io = |e: std::io::Error| corrupt(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig =
        serde_json::from_slice(&read_bytes(r, 1 << 20)?).map_err(|e| corrupt(format!("model config: {e}")))?;
    let mut model = Model::new(config, 0)?;
    model.stage = r.read_u8().map_err(io)?;
    if !(1..=2).contains(&model.stage) {
        return Err(corrupt(format!("bad stage flag {}", model.stage)));
    }
    let step = r.read_u64::<LE>().map_err(io)?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(io)?;
    let stream = r.read_u64::<LE>().map_err(io)?;
    let word_pos = r.read_u128::<LE>().map_err(io)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let adam_step = r.read_u64::<LE>().map_err(io)?;
    let count = r.read_u32::<LE>().map_err(io)? as usize;
    if count != model.store.len() {
        return Err(corrupt(format!(
            "checkpoint holds {count} parameters, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(r, 4096)?).map_err(|_| corrupt("parameter name is not UTF-8"))?;
        let id = model.store.id(&name).map_err(|e| corrupt(e.to_string()))?;
        let ndim = r.read_u32::<LE>().map_err(io)? as usize;
        if ndim > 8 {
            return Err(corrupt(format!("parameter `{name}` has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LE>().map_err(io)? as usize);
        }
        if shape != model.store.value(id).shape() {
            return Err(corrupt(format!("parameter `{name}` has shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut read_tensor = || -> Result<Tensor> {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(r.read_u64::<LE>().map_err(io)?));
            }
            Ok(Tensor::new(shape.clone(), data)?)
        };
        let value = read_tensor()?;
        let m = read_tensor()?;
        let v = read_tensor()?;
        model.store.set(id, value)?;
        model.store.set_state(id, m, v)?;
    }
    model.store.set_step(adam_step);
    Ok((model, TrainerState { step, rng }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            resolution: 8,
            channels: vec![2, 2, 2],
            trunk_width: 8,
            d_t: 4,
            d_s: 4,
            generator_widths: vec![8],
            n_h: 6,
            n_c: 2,
            flow_width: 8,
            t_steps: 2,
            ..ModelConfig::default()
        };
        Model::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = tiny();
        model.stage = 2;
        let mut state = TrainerState::new(5);
        let _: u64 = state.rng.gen();
        state.step = 17;
        model.store.set_step(9);
        let bytes = to_bytes(&model, &state);
        let (back, back_state) = from_bytes(&bytes).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.stage, 2);
        assert_eq!(back.config, model.config);
        assert_eq!(back_state, state);
        assert_eq!(to_bytes(&back, &back_state), bytes);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let model = tiny();
        let bytes = to_bytes(&model, &TrainerState::new(0));
        assert!(matches!(from_bytes(b"hello world"), Err(Error::Corrupt(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
    }
}
