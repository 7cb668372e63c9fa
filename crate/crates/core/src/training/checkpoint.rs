//! Versioned checkpoint container.
//!
//! Layout: a magic line `CONFAE-CHECKPOINT <version>`, one line of JSON
//! header (architecture, step, named array index), then every array as
//! little-endian `f32` values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use crate::codec::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "CONFAE-CHECKPOINT";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    step: u64,
    adam: Option<AdamMeta>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    t: u64,
}

/// Model parameters plus optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, adam: Option<&Adam>) -> Self {
        Checkpoint {
            model: model.config.clone(),
            step,
            params: model
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the model; parameter names and shapes must match the architecture.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture has {} parameter arrays, checkpoint has {}",
                model.store.len(),
                self.params.len()
            )));
        }
        let mut values = Vec::with_capacity(self.params.len());
        for ((expected, _), (name, t)) in model.store.iter().zip(&self.params) {
            if expected != name {
                return Err(Error::Checkpoint(format!(
                    "expected array `{expected}`, found `{name}`"
                )));
            }
            values.push(t.clone());
        }
        model
            .store
            .set_values(values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<ArrayEntry> = self
            .params
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: format!("param/{n}"),
                shape: t.shape(),
            })
            .collect();
        let mut data: Vec<&Tensor> = self.params.iter().map(|(_, t)| t).collect();
        if let Some(adam) = &self.adam {
            for (moment, list) in [("m", &adam.m), ("v", &adam.v)] {
                for ((n, _), t) in self.params.iter().zip(list) {
                    arrays.push(ArrayEntry {
                        name: format!("adam.{moment}/{n}"),
                        shape: t.shape(),
                    });
                    data.push(t);
                }
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.clone(),
            step: self.step,
            adam: self.adam.as_ref().map(|a| AdamMeta {
                config: a.config,
                t: a.t,
            }),
            arrays,
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{json}\n").into_bytes();
        for t in data {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let nl1 = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing magic line"))?;
        let magic =
            std::str::from_utf8(&bytes[..nl1]).map_err(|_| bad("magic line is not text"))?;
        let version = magic
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?
            .parse::<u32>()
            .map_err(|_| bad("unreadable format version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header: Header = serde_json::from_slice(&rest[..nl2])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut payload = &rest[nl2 + 1..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let n = entry.shape[0] * entry.shape[1];
            if payload.len() < 4 * n {
                return Err(Error::Checkpoint(format!(
                    "truncated array `{}`",
                    entry.name
                )));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            payload = &payload[4 * n..];
            arrays.push((
                entry.name.clone(),
                Tensor::from_vec(entry.shape[0], entry.shape[1], data),
            ));
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after the last array"));
        }
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in arrays {
            if let Some(n) = name.strip_prefix("param/") {
                params.push((n.to_string(), t));
            } else if name.starts_with("adam.m/") {
                m.push(t);
            } else if name.starts_with("adam.v/") {
                v.push(t);
            } else {
                return Err(Error::Checkpoint(format!("unknown array `{name}`")));
            }
        }
        let adam = match header.adam {
            Some(meta) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(bad("optimizer state does not cover every parameter"));
                }
                Some(Adam {
                    config: meta.config,
                    t: meta.t,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            model: header.model,
            step: header.step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Mode;

    fn small() -> ModelConfig {
        ModelConfig {
            mode: Mode::Vae,
            f_h: 5,
            layers: 1,
            f_z: 3,
            edge_hidden: 4,
            enc_hidden: 6,
            dec_hidden: 6,
        }
    }

    #[test]
    fn roundtrip_within_single_precision() {
        let model = Model::new(small(), 3).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &model.store);
        adam.t = 17;
        adam.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint::from_model(&model, 42, Some(&adam));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, 42);
        let restored = back.to_model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(restored.store.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30));
            }
        }
        let ra = back.adam.unwrap();
        assert_eq!(ra.t, 17);
        assert_eq!(ra.m[0].data()[0], 0.25);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(Checkpoint::from_bytes(b"hello\n{}\n").is_err());
        let model = Model::new(small(), 3).unwrap();
        let bytes = Checkpoint::from_model(&model, 0, None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let model = Model::new(small(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&model, 0, None);
        ck.model.mode = Mode::Ae;
        assert!(ck.to_model().is_err());
    }
}
