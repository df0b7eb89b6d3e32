// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat tensor archives in the safetensors layout (8-byte little-endian header
//! length, JSON header, raw little-endian `F32` payload).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::{serialize, Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{DlensError, Result};
use crate::tensor::Tensor;

/// Named tensors plus the optional string metadata block.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| DlensError::MissingTensor(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| DlensError::MissingTensor(name.to_string()))
    }

    /// Parse an in-memory archive. Only `F32` tensors are accepted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| DlensError::Format(e.to_string()))?;
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| DlensError::Format(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(DlensError::Format(format!(
                    "tensor `{name}` has dtype {:?}; only F32 is supported",
                    view.dtype()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(view.shape().to_vec(), data)?);
        }
        Ok(Archive {
            tensors,
            metadata: meta.metadata().clone().unwrap_or_default(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DlensError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec(), tensor_bytes(t)))
            .collect();
        let views = raw
            .iter()
            .map(|(k, s, b)| {
                safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| DlensError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = (!self.metadata.is_empty()).then(|| self.metadata.clone());
        serialize(views, meta).map_err(|e| DlensError::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| DlensError::io(path, e))
    }
}

/// Raw little-endian bytes of a tensor.
pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// 64-bit checksum used by export manifests: the first eight bytes of the
/// SHA-256 of the tensor's raw little-endian bytes, as 16 lowercase hex digits.
pub fn tensor_checksum(t: &Tensor) -> String {
    let digest = Sha256::digest(tensor_bytes(t));
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Full SHA-256 of a byte string, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
