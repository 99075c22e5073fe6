//! Parameter archives: safetensors payload plus a JSON header carrying the
//! stage, seed, configuration and a digest of every stored array.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{digest_tensors, tensor_bytes};

const HEADER_KEY: &str = "header";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Align,
    Fuse,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Align => "align",
            Stage::Fuse => "fuse",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub config_digest: String,
    /// Digest of the stored parameter arrays.
    pub param_digest: String,
    /// `param_digest` of the align checkpoint a fuse checkpoint builds on.
    pub align_ckpt_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        seed: u64,
        epoch: usize,
        config: serde_json::Value,
        tensors: BTreeMap<String, Tensor>,
        align_ckpt_hash: Option<String>,
    ) -> Result<Self> {
        let config_digest = sha_hex(serde_json::to_string(&config)?.as_bytes());
        let param_digest = digest_tensors(&tensors)?;
        Ok(Self {
            header: CheckpointHeader {
                stage,
                seed,
                epoch,
                config,
                config_digest,
                param_digest,
                align_ckpt_hash,
            },
            tensors,
        })
    }

    pub fn hash(&self) -> &str {
        &self.header.param_digest
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, DType, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.dtype(), t.dims().to_vec(), tensor_bytes(t)?)))
            .collect::<Result<_>>()?;
        let views = bytes
            .iter()
            .map(|(k, dtype, shape, data)| {
                let dt = match dtype {
                    DType::F32 => Dtype::F32,
                    _ => Dtype::F64,
                };
                TensorView::new(dt, shape.clone(), data)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Interface(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert(HEADER_KEY.to_string(), serde_json::to_string(&self.header)?);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Interface(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: String| Error::Corruption(msg);
        let (_, meta) =
            SafeTensors::read_metadata(bytes).map_err(|e| corrupt(format!("unreadable archive: {e}")))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| corrupt(format!("unreadable archive: {e}")))?;
        let header_text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| corrupt("archive has no header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_str(header_text).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let dtype = match view.dtype() {
                Dtype::F32 => DType::F32,
                Dtype::F64 => DType::F64,
                other => return Err(corrupt(format!("unexpected dtype {other:?} for '{name}'"))),
            };
            let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), &Device::Cpu)?;
            tensors.insert(name, t);
        }
        let digest = digest_tensors(&tensors)?;
        if digest != header.param_digest {
            return Err(corrupt("parameter digest does not match the header".into()));
        }
        Ok(Self { header, tensors })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.header.stage != stage {
            return Err(Error::Interface(format!(
                "expected a {stage} checkpoint, found {}",
                self.header.stage
            )));
        }
        Ok(())
    }

    /// Confirms that this fuse checkpoint was trained on `align`.
    pub fn verify_align(&self, align: &Checkpoint) -> Result<()> {
        self.require_stage(Stage::Fuse)?;
        align.require_stage(Stage::Align)?;
        match &self.header.align_ckpt_hash {
            Some(h) if h == align.hash() => Ok(()),
            Some(h) => Err(Error::Interface(format!(
                "fuse checkpoint references align checkpoint {h}, got {}",
                align.hash()
            ))),
            None => Err(Error::Interface("fuse checkpoint has no align reference".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: f32) -> Checkpoint {
        let mut t = BTreeMap::new();
        t.insert(
            "a".to_string(),
            Tensor::new(&[seed, 1.5, -2.25], &Device::Cpu).unwrap(),
        );
        t.insert(
            "b".to_string(),
            Tensor::new(&[[0.1f64, 0.2], [0.3, 0.4]], &Device::Cpu).unwrap(),
        );
        Checkpoint::new(Stage::Align, 7, 3, serde_json::json!({"k": 1}), t, None).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let ck = sample(0.5);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        for (k, t) in &ck.tensors {
            assert_eq!(tensor_bytes(t).unwrap(), tensor_bytes(&back.tensors[k]).unwrap());
        }
    }

    #[test]
    fn truncated_or_tampered_archive_is_corrupt() {
        let bytes = sample(0.5).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Corruption(_))
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x55;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corruption(_))));
    }

    #[test]
    fn wrong_align_reference_is_rejected() {
        let align = sample(0.5);
        let other = sample(0.75);
        let fuse = Checkpoint::new(
            Stage::Fuse,
            7,
            1,
            serde_json::json!({}),
            BTreeMap::new(),
            Some(align.hash().to_string()),
        )
        .unwrap();
        assert!(fuse.verify_align(&align).is_ok());
        assert!(matches!(fuse.verify_align(&other), Err(Error::Interface(_))));
        assert!(matches!(align.require_stage(Stage::Fuse), Err(Error::Interface(_))));
    }
}
