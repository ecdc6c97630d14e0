//! Versioned binary checkpoints: config, scaler, every parameter tensor by
//! name, optimizer moments, the iteration counter, and the index set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::Scaler;
use crate::error::{CoreError, Result};
use crate::model::{Forecaster, ModelConfig};
use crate::optim::Adam;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFCK";
const VERSION: u32 = 1;

pub struct LoadedCheckpoint {
    pub model: Forecaster,
    pub scaler: Scaler,
    pub optimizer: Adam,
    pub iteration: u64,
}

pub fn save(
    path: impl AsRef<Path>,
    model: &Forecaster,
    scaler: &Scaler,
    optimizer: &Adam,
    iteration: u64,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;

    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| CoreError::Checkpoint(format!("config serialization: {e}")))?;
    w.write_u64::<LittleEndian>(config_json.len() as u64)?;
    w.write_all(&config_json)?;

    w.write_f64::<LittleEndian>(scaler.mean)?;
    w.write_f64::<LittleEndian>(scaler.std)?;
    w.write_u64::<LittleEndian>(iteration)?;
    w.write_u64::<LittleEndian>(optimizer.step_count())?;
    w.write_f64::<LittleEndian>(optimizer.lr())?;

    w.write_u64::<LittleEndian>(model.index_set().len() as u64)?;
    for &id in model.index_set() {
        w.write_u64::<LittleEndian>(id as u64)?;
    }

    let (first, second) = optimizer.moments();
    w.write_u64::<LittleEndian>(model.store().len() as u64)?;
    for (slot, param) in model.store().iter().enumerate() {
        let name = param.name().as_bytes();
        w.write_u64::<LittleEndian>(name.len() as u64)?;
        w.write_all(name)?;
        w.write_u64::<LittleEndian>(param.value().rank() as u64)?;
        for &extent in param.value().shape() {
            w.write_u64::<LittleEndian>(extent as u64)?;
        }
        write_values(&mut w, param.value())?;
        write_values(&mut w, &first[slot])?;
        write_values(&mut w, &second[slot])?;
    }
    w.flush()?;
    Ok(())
}

fn write_values(w: &mut impl Write, t: &Tensor) -> Result<()> {
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path.as_ref())?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| CoreError::Checkpoint(format!("short header: {e}")))?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }

    let config_len = read_u64(&mut r)? as usize;
    if config_len > 1 << 20 {
        return Err(CoreError::Checkpoint("implausible config size".into()));
    }
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)
        .map_err(|e| CoreError::Checkpoint(format!("short config: {e}")))?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| CoreError::Checkpoint(format!("config parse: {e}")))?;

    let scaler = Scaler {
        mean: read_f64(&mut r)?,
        std: read_f64(&mut r)?,
    };
    let iteration = read_u64(&mut r)?;
    let adam_steps = read_u64(&mut r)?;
    let adam_lr = read_f64(&mut r)?;

    let index_len = read_u64(&mut r)? as usize;
    if index_len != config.neighborhood {
        return Err(CoreError::Checkpoint(format!(
            "index set length {index_len} does not match M = {}",
            config.neighborhood
        )));
    }
    let mut index_set = Vec::with_capacity(index_len);
    for _ in 0..index_len {
        index_set.push(read_u64(&mut r)? as usize);
    }

    // Rebuild the model skeleton (including candidate pools, which are
    // deterministic per seed), then overwrite parameter values.
    let mut model =
        Forecaster::new(&config).map_err(|e| CoreError::Checkpoint(format!("config: {e}")))?;
    model
        .set_index_set(index_set)
        .map_err(|e| CoreError::Checkpoint(format!("index set: {e}")))?;

    let param_count = read_u64(&mut r)? as usize;
    if param_count != model.store().len() {
        return Err(CoreError::Checkpoint(format!(
            "parameter count {param_count} does not match model ({})",
            model.store().len()
        )));
    }

    let mut first = Vec::with_capacity(param_count);
    let mut second = Vec::with_capacity(param_count);
    for slot in 0..param_count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(CoreError::Checkpoint("implausible parameter name".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| CoreError::Checkpoint(format!("short name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| CoreError::Checkpoint("parameter name not UTF-8".into()))?;
        if name != model.store().get(slot).name() {
            return Err(CoreError::Checkpoint(format!(
                "parameter {slot} is {name:?}, expected {:?}",
                model.store().get(slot).name()
            )));
        }
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != model.store().get(slot).value().shape() {
            return Err(CoreError::Checkpoint(format!(
                "parameter {name:?} has shape {shape:?}, expected {:?}",
                model.store().get(slot).value().shape()
            )));
        }
        let value = read_tensor(&mut r, &shape)?;
        first.push(read_tensor(&mut r, &shape)?);
        second.push(read_tensor(&mut r, &shape)?);
        *model.store_mut().value_mut(slot) = value;
    }

    let optimizer = Adam::from_state(adam_lr, adam_steps, first, second);
    Ok(LoadedCheckpoint {
        model,
        scaler,
        optimizer,
        iteration,
    })
}

fn read_tensor(r: &mut impl Read, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r)?);
    }
    Tensor::new(shape.to_vec(), data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|e| CoreError::Checkpoint(format!("truncated file: {e}")))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    r.read_u64::<LittleEndian>()
        .map_err(|e| CoreError::Checkpoint(format!("truncated file: {e}")))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    r.read_f64::<LittleEndian>()
        .map_err(|e| CoreError::Checkpoint(format!("truncated file: {e}")))
}
