//! Self-describing binary container for parameters and training state.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "MFSAN-CKPT-1\n"                 magic and version
//! u64                              length of the JSON header in bytes
//! JSON header                      architecture, tensor names and shapes, extra state
//! f64 * Σ prod(shape)              tensor buffers in header order
//! ```
//!
//! The whole file is read and validated before anything is returned, so a
//! truncated or corrupted file never yields a partial load.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, MfsanModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8] = b"MFSAN-CKPT-1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    layer_dims: LayerDims,
    num_sources: usize,
    num_classes: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDims {
    common: Vec<usize>,
    branch: Vec<usize>,
    classifier: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Decoded checkpoint: architecture, named `f64` tensors and opaque extra state.
#[derive(Debug, Clone)]
pub struct Container {
    pub architecture: Architecture,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub extra: serde_json::Value,
}

impl Container {
    pub fn from_model<T: Scalar>(model: &MfsanModel<T>) -> Self {
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(n, p)| (n, p.cast::<f64>()))
            .collect();
        Self {
            architecture: model.architecture().clone(),
            tensors,
            extra: serde_json::Value::Null,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model from the parameter tensors of this container.
    pub fn to_model<T: Scalar>(&self) -> Result<MfsanModel<T>> {
        let mut model = MfsanModel::<T>::new(
            self.architecture.clone(),
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        let mut values = Vec::new();
        for name in model.param_names() {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            values.push(t.cast::<T>());
        }
        model
            .set_params(values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = &self.architecture;
        let header = Header {
            architecture: arch.clone(),
            layer_dims: LayerDims {
                common: arch.common_dims(),
                branch: arch.branch_dims(),
                classifier: [arch.feature_width(), arch.num_classes],
            },
            num_sources: arch.num_sources,
            num_classes: arch.num_classes,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad or unsupported header (expected MFSAN-CKPT-1)"));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(bad("truncated before header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let body = &rest[hlen..];
        let needed: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 8)
            .sum();
        if body.len() != needed {
            return Err(Error::Checkpoint(format!(
                "expected {needed} bytes of tensor data, found {}",
                body.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut pos = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = body[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        header
            .architecture
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            architecture: header.architecture,
            tensors,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_model<T: Scalar>(model: &MfsanModel<T>, path: &Path) -> Result<()> {
    Container::from_model(model).save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<MfsanModel<T>> {
    Container::load(path)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> MfsanModel<f64> {
        MfsanModel::new(
            Architecture::desk_default(4, 3, 2),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = Container::from_model(&m).to_bytes().unwrap();
        let back: MfsanModel<f64> = Container::from_bytes(&bytes).unwrap().to_model().unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(m, back);
    }

    #[test]
    fn rejects_corruption_and_truncation() {
        let bytes = Container::from_model(&model()).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[6] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[11] = b'2';
        assert!(Container::from_bytes(&wrong_version).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Container::from_bytes(&bytes[..20]).is_err());
        let mut json_broken = bytes.clone();
        json_broken[MAGIC.len() + 8] = b'#';
        assert!(Container::from_bytes(&json_broken).is_err());
    }

    #[test]
    fn f32_model_round_trips_through_f64_buffers() {
        let m: MfsanModel<f32> = MfsanModel::new(
            Architecture::desk_default(4, 3, 2),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let back: MfsanModel<f32> = Container::from_bytes(&Container::from_model(&m).to_bytes().unwrap())
            .unwrap()
            .to_model()
            .unwrap();
        assert_eq!(m, back);
    }
}
