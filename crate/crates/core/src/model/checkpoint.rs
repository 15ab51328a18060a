//! Versioned binary checkpoints for parser models.
//!
//! Layout: magic, task slug, full config, then each named weight tensor as
//! (name, shape, row-major little-endian f32 data). Round-trips bit-exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binfmt;

use super::{ModelConfig, ModelError, ParserModel, TaskKind};

pub const CHECKPOINT_MAGIC: &[u8] = b"UASMDL1";

impl ParserModel<f32> {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        binfmt::write_magic(w, CHECKPOINT_MAGIC)?;
        binfmt::write_string(w, self.task.slug())?;
        let c = &self.config;
        binfmt::write_u32(w, c.d_model as u32)?;
        binfmt::write_u32(w, c.seq_len as u32)?;
        binfmt::write_u32(w, c.num_heads as u32)?;
        binfmt::write_u32(w, c.ff_dim as u32)?;
        binfmt::write_u32(w, c.head_widths.len() as u32)?;
        for width in &c.head_widths {
            binfmt::write_u32(w, *width as u32)?;
        }
        binfmt::write_f64(w, c.dropout_p)?;
        binfmt::write_u32(w, c.num_outputs as u32)?;
        binfmt::write_u64(w, c.seed)?;

        let named = self.named_parameters();
        binfmt::write_u32(w, named.len() as u32)?;
        for (name, tensor) in named {
            binfmt::write_string(w, &name)?;
            let shape = tensor.shape();
            binfmt::write_u32(w, shape.len() as u32)?;
            for dim in &shape {
                binfmt::write_u32(w, *dim as u32)?;
            }
            tensor.with_data(|d| binfmt::write_f32_slice(w, d))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        if !binfmt::check_magic(r, CHECKPOINT_MAGIC)? {
            return Err(ModelError::BadMagic);
        }
        let task = TaskKind::from_slug(&binfmt::read_string(r)?)?;
        let d_model = binfmt::read_u32(r)? as usize;
        let seq_len = binfmt::read_u32(r)? as usize;
        let num_heads = binfmt::read_u32(r)? as usize;
        let ff_dim = binfmt::read_u32(r)? as usize;
        let widths_len = binfmt::read_u32(r)? as usize;
        let mut head_widths = Vec::with_capacity(widths_len);
        for _ in 0..widths_len {
            head_widths.push(binfmt::read_u32(r)? as usize);
        }
        let dropout_p = binfmt::read_f64(r)?;
        let num_outputs = binfmt::read_u32(r)? as usize;
        let seed = binfmt::read_u64(r)?;
        let config = ModelConfig {
            d_model,
            seq_len,
            num_heads,
            ff_dim,
            head_widths,
            dropout_p,
            num_outputs,
            seed,
        };

        let tensor_count = binfmt::read_u32(r)? as usize;
        let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> =
            HashMap::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = binfmt::read_string(r)?;
            let rank = binfmt::read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(binfmt::read_u32(r)? as usize);
            }
            let len = shape.iter().product();
            let data = binfmt::read_f32_vec(r, len)?;
            stored.insert(name, (shape, data));
        }

        let model = ParserModel::init(task, config)?;
        for (name, tensor) in model.named_parameters() {
            let (shape, data) = stored.remove(&name).ok_or_else(|| {
                ModelError::Format(format!("checkpoint is missing tensor {name:?}"))
            })?;
            if shape != tensor.shape() {
                return Err(ModelError::Format(format!(
                    "tensor {name:?} has shape {shape:?}, expected {:?}",
                    tensor.shape()
                )));
            }
            tensor.set_data(data)?;
        }
        if !stored.is_empty() {
            let mut extra: Vec<String> = stored.into_keys().collect();
            extra.sort();
            return Err(ModelError::Format(format!(
                "checkpoint has unexpected tensors {extra:?}"
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests_support::tiny_model;
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = tiny_model(TaskKind::OsName, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.uasmdl");
        model.save(&path).unwrap();
        let loaded = ParserModel::<f32>::load(&path).unwrap();

        let mut a = Vec::new();
        let mut b = Vec::new();
        model.write_to(&mut a).unwrap();
        loaded.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.task, TaskKind::OsName);
        assert_eq!(loaded.config, model.config);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.uasmdl");
        std::fs::write(&path, b"UASEMB1-but-not-a-model").unwrap();
        assert!(matches!(
            ParserModel::<f32>::load(&path),
            Err(ModelError::BadMagic)
        ));
    }

    #[test]
    fn truncated_checkpoint_is_an_io_error() {
        let model = tiny_model(TaskKind::SoftwareVersionIndex, 5);
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() / 2);
        let err = ParserModel::<f32>::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, ModelError::Io(_)));
    }
}
