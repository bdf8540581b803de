//! Checkpoint container: a magic string, a little-endian u64 giving the
//! length of a JSON metadata block, the metadata itself, then the raw
//! parameter arrays as little-endian f32 in metadata order (generator
//! first, then discriminator if present).

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::types::ParamSet;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MSCKPT1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    config: ModelConfig,
    config_hash: String,
    seed: u64,
    generator: Vec<TensorMeta>,
    generator_id: String,
    #[serde(default)]
    discriminator: Vec<TensorMeta>,
    #[serde(default)]
    discriminator_id: String,
}

/// A saved model: generator parameters, optional discriminator parameters,
/// the config they were built for, and the originating seed.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub generator: ParamSet,
    pub discriminator: Option<ParamSet>,
}

fn tensor_metas(params: &ParamSet) -> Vec<TensorMeta> {
    params
        .iter()
        .map(|(n, a)| TensorMeta {
            name: n.to_string(),
            shape: a.shape().to_vec(),
        })
        .collect()
}

fn write_arrays(out: &mut impl Write, params: &ParamSet) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for (_, a) in params.iter() {
        buf.clear();
        buf.reserve(a.len() * 4);
        for &x in a.iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_arrays(
    input: &mut impl Read,
    metas: &[TensorMeta],
) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut entries = Vec::with_capacity(metas.len());
    for m in metas {
        let n: usize = m.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input
            .read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated data for tensor {}", m.name)))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "tensor {} contains non-finite values",
                m.name
            )));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&m.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", m.name)))?;
        entries.push((m.name.clone(), arr));
    }
    Ok(entries)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.generator.all_finite() {
            return Err(Error::Checkpoint(
                "refusing to save non-finite generator parameters".into(),
            ));
        }
        if self.generator.config_hash() != self.config.hash() {
            return Err(Error::Checkpoint(
                "generator parameters do not match the checkpoint config".into(),
            ));
        }
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            seed: self.seed,
            generator: tensor_metas(&self.generator),
            generator_id: self.generator.model_id().to_string(),
            discriminator: self
                .discriminator
                .as_ref()
                .map(tensor_metas)
                .unwrap_or_default(),
            discriminator_id: self
                .discriminator
                .as_ref()
                .map(|d| d.model_id().to_string())
                .unwrap_or_default(),
        };
        let json = serde_json::to_vec(&meta)
            .map_err(|e| Error::Checkpoint(format!("metadata serialization: {e}")))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            write_arrays(&mut f, &self.generator)?;
            if let Some(d) = &self.discriminator {
                write_arrays(&mut f, d)?;
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)
            .map_err(|_| Error::Checkpoint("file too short for metadata length".into()))?;
        let json_len = u64::from_le_bytes(len_bytes) as usize;
        if json_len > 64 << 20 {
            return Err(Error::Checkpoint(format!(
                "implausible metadata length {json_len}"
            )));
        }
        let mut json = vec![0u8; json_len];
        f.read_exact(&mut json)
            .map_err(|_| Error::Checkpoint("truncated metadata block".into()))?;
        let meta: Metadata = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("metadata parse: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        if meta.config_hash != meta.config.hash() {
            return Err(Error::Checkpoint(
                "metadata config hash does not match embedded config".into(),
            ));
        }
        let gen_entries = read_arrays(&mut f, &meta.generator)?;
        let generator = ParamSet::new(meta.generator_id.clone(), meta.config_hash.clone(), gen_entries);
        let discriminator = if meta.discriminator.is_empty() {
            None
        } else {
            let d = read_arrays(&mut f, &meta.discriminator)?;
            Some(ParamSet::new(
                meta.discriminator_id.clone(),
                meta.config_hash.clone(),
                d,
            ))
        };
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
        }
        Ok(Checkpoint {
            config: meta.config,
            seed: meta.seed,
            generator,
            discriminator,
        })
    }
}
