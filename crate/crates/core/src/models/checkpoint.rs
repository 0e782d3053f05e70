use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::tensor::{Scalar, Tensor};

use super::{HeadSpec, Model, ModelConfig};

const MAGIC: &[u8; 4] = b"RCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    head: HeadSpec,
    task: String,
    seed: u64,
    precision_bits: u8,
}

/// Versioned binary container: header JSON plus raw little-endian parameter
/// data in insertion order. Round-trips bit-exactly.
impl<T: Scalar> Model<T> {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            head: self.head_spec,
            task: self.task_tag.clone(),
            seed: self.seed,
            precision_bits: (std::mem::size_of::<T>() * 8) as u8,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        w.write_u64::<LittleEndian>(header_json.len() as u64)?;
        w.write_all(&header_json)?;
        w.write_u32::<LittleEndian>(self.store().len() as u32)?;
        for p in self.store().iter() {
            let name = p.name.as_bytes();
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name)?;
            let (rows, cols) = p.value.dims2();
            w.write_u64::<LittleEndian>(rows as u64)?;
            w.write_u64::<LittleEndian>(cols as u64)?;
            for &v in p.value.data() {
                w.write_f64::<LittleEndian>(v.to_f64())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model<T>, HarnessError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(HarnessError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = r.read_u64::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;

        let mut model = Model::<T>::new(header.config, header.head, &header.task, header.seed);
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != model.store().len() {
            return Err(HarnessError::Checkpoint(format!(
                "parameter count mismatch: file has {count}, model expects {}",
                model.store().len()
            )));
        }
        for i in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
            let rows = r.read_u64::<LittleEndian>()? as usize;
            let cols = r.read_u64::<LittleEndian>()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(T::from_f64(r.read_f64::<LittleEndian>()?));
            }
            let param = model.store_mut().get_mut(super::ParamId(i));
            if param.name != name {
                return Err(HarnessError::Checkpoint(format!(
                    "parameter order mismatch: file has `{name}`, model expects `{}`",
                    param.name
                )));
            }
            let (er, ec) = param.value.dims2();
            if (er, ec) != (rows, cols) {
                return Err(HarnessError::Checkpoint(format!(
                    "shape mismatch for `{name}`: file {rows}x{cols}, model {er}x{ec}"
                )));
            }
            param.value = Tensor::matrix(rows, cols, data);
        }
        Ok(model)
    }
}
