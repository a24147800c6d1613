//! Head checkpoints: `checkpoint.json` plus `tensors.bin` (little-endian
//! f64, tensors back to back in [`HeadParameters::tensors`] order).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataio::{read_json, write_json};
use crate::error::{NcdlError, Result};
use crate::heads::{HeadParameters, Linear, NovelHead};

pub const CHECKPOINT_FORMAT: &str = "NCDL-CKPT1";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Known head with the background row, no novel head.
    Bootstrap,
    Discovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadEntry {
    temperature: f64,
    num_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    kind: CheckpointKind,
    known_class_names: Vec<String>,
    iteration: usize,
    heads: Vec<HeadEntry>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub known_class_names: Vec<String>,
    /// Iterations trained in the discovery phase.
    pub iteration: usize,
    pub params: HeadParameters,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NcdlError::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, data) in self.params.tensors() {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: bytes.len() / 8,
            });
            data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            kind: self.kind,
            known_class_names: self.known_class_names.clone(),
            iteration: self.iteration,
            heads: self
                .params
                .novel_heads
                .iter()
                .map(|h| HeadEntry {
                    temperature: h.temperature,
                    num_layers: h.projector.len(),
                })
                .collect(),
            tensors,
        };
        let path = dir.join(TENSORS_FILE);
        fs::write(&path, bytes).map_err(|e| NcdlError::io(path, e))?;
        write_json(&manifest, &dir.join(CHECKPOINT_MANIFEST))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(NcdlError::Invalid(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let path = dir.join(TENSORS_FILE);
        let bytes = fs::read(&path).map_err(|e| NcdlError::io(&path, e))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if bytes.len() != expected * 8 {
            return Err(NcdlError::SizeMismatch {
                path,
                expected: expected as u64 * 8,
                found: bytes.len() as u64,
            });
        }
        let mut entries = manifest.tensors.iter();
        let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = entries
                .next()
                .filter(|t| t.name == name)
                .ok_or_else(|| NcdlError::Invalid(format!("checkpoint is missing tensor {name}")))?;
            let len: usize = t.shape.iter().product();
            let data = values
                .get(t.offset..t.offset + len)
                .ok_or_else(|| NcdlError::Invalid(format!("tensor {name} runs past the end of {TENSORS_FILE}")))?;
            Ok((t.shape.clone(), data.to_vec()))
        };
        let matrix = |(shape, data): (Vec<usize>, Vec<f64>)| -> Result<Array2<f64>> {
            match shape[..] {
                [r, c] => Ok(Array2::from_shape_vec((r, c), data).expect("length checked")),
                _ => Err(NcdlError::Shape(format!("expected a matrix, got shape {shape:?}"))),
            }
        };

        let known_weights = matrix(take("known")?)?;
        let mut novel_heads = Vec::with_capacity(manifest.heads.len());
        for (h, head) in manifest.heads.iter().enumerate() {
            let mut projector = Vec::with_capacity(head.num_layers);
            for l in 0..head.num_layers {
                let weight = matrix(take(&format!("novel{h}.layer{l}.weight"))?)?;
                let bias = Array1::from(take(&format!("novel{h}.layer{l}.bias"))?.1);
                projector.push(Linear { weight, bias });
            }
            let prototypes = matrix(take(&format!("novel{h}.prototypes"))?)?;
            novel_heads.push(NovelHead {
                projector,
                prototypes,
                temperature: head.temperature,
            });
        }
        let params = HeadParameters {
            known_weights,
            novel_heads,
        };
        params.validate()?;
        Ok(Checkpoint {
            kind: manifest.kind,
            known_class_names: manifest.known_class_names,
            iteration: manifest.iteration,
            params,
        })
    }
}
