//! Checkpoint files.
//!
//! Layout (little-endian): `"PMSC"`, u32 format version, u32 header length,
//! header as canonical (key-sorted) JSON holding the model config and the
//! optional CTC vocabulary, u32 tensor count, then per tensor a u32 name
//! length, the UTF-8 name and a PMSF block. Tensors are stored as 2-D
//! matrices (all leading axes folded into rows) and re-shaped on load
//! from the config.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{parameter_shapes, Params};
use crate::error::{Error, Result};
use crate::features::{read_pmsf, write_pmsf, FeatureSource};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    vocab: Option<Vec<char>>,
}

/// Model config, parameters and (after fine-tuning) the CTC vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub vocab: Option<Vec<char>>,
    pub params: Params<S>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(config: ModelConfig, params: Params<S>) -> Result<Self> {
        let c = Self {
            config,
            vocab: None,
            params,
        };
        c.validate()?;
        Ok(c)
    }

    /// A fine-tuned model: encoder plus CTC head over `vocab`.
    pub fn with_vocab(config: ModelConfig, params: Params<S>, vocab: Vec<char>) -> Result<Self> {
        let c = Self {
            config,
            vocab: Some(vocab),
            params,
        };
        c.validate()?;
        Ok(c)
    }

    /// Config/shape agreement. With a vocabulary the codebook heads are
    /// not required and the CTC head is.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.vocab.is_some() {
            self.params.check_encoder_against(&self.config)?;
        } else {
            self.params.check_against(&self.config)?;
        }
        if let Some(v) = &self.vocab {
            let d = self.config.model_dim;
            for (name, shape) in [("ctc.weight", vec![d, v.len() + 1]), ("ctc.bias", vec![v.len() + 1])] {
                match self.params.get(name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Shape {
                            op: "load parameters",
                            lhs: t.shape().to_vec(),
                            rhs: shape,
                        })
                    }
                    None => return Err(Error::config(format!("vocabulary present but `{name}` missing"))),
                }
            }
        }
        Ok(())
    }

    fn header_json(&self) -> Result<String> {
        let header = Header {
            model: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        // serde_json's default map is a BTreeMap, so going through Value sorts keys.
        let value = serde_json::to_value(&header).map_err(|e| bad(e.to_string()))?;
        serde_json::to_string(&value).map_err(|e| bad(e.to_string()))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e: std::io::Error| bad(e.to_string());
        let header = self.header_json()?;
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(header.as_bytes()).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            let flat = t.clone().reshape([t.rows(), t.cols()])?;
            write_pmsf(w, &flat, FeatureSource::Raw).map_err(io)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(r, &mut buf)?;
        let header: Header = serde_json::from_slice(&buf).map_err(|e| bad(format!("header: {e}")))?;
        header.model.validate()?;

        let mut expected: BTreeMap<String, Vec<usize>> = parameter_shapes(&header.model).into_iter().collect();
        if let Some(v) = &header.vocab {
            expected.insert("ctc.weight".into(), vec![header.model.model_dim, v.len() + 1]);
            expected.insert("ctc.bias".into(), vec![v.len() + 1]);
        }
        let count = read_u32(r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let mut name = vec![0u8; n];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let (flat, _) = read_pmsf::<S, _>(r)?;
            let shape = expected
                .get(&name)
                .ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
            if flat.len() != shape.iter().product::<usize>() || flat.cols() != *shape.last().unwrap() {
                return Err(Error::Shape {
                    op: "load parameters",
                    lhs: flat.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            tensors.insert(name, flat.reshape(shape.clone())?);
        }
        let ck = Self {
            config: header.model,
            vocab: header.vocab,
            params: Params::from_map(tensors),
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| bad(format!("truncated input: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
