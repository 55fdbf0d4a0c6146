//! Checkpoint archives.
//!
//! A checkpoint is a single safetensors file. Parameters keep their
//! hierarchical names (`generator.*`, `discriminator.*`); Adam moments are
//! stored as `optim.{network}.{m|v}.{parameter}`. The header metadata entry
//! `manifest` holds a TOML document describing the run.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adversarial::DiscriminatorConfig;
use crate::data::SamplerState;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::optim::Moments;
use crate::schedules::{LossConstants, ScheduleVariant};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerSteps {
    pub generator: u64,
    pub discriminator: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub variant: ScheduleVariant,
    pub scale: usize,
    pub iteration: u64,
    pub generator: GeneratorConfig,
    pub constants: LossConstants,
    /// Label of the feature network used by the perceptual loss.
    pub extractor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_steps: Option<OptimizerSteps>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                m.format
            )));
        }
        Ok(m)
    }
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn moment_name(network: &str, which: &str, param: &str) -> String {
    format!("optim.{network}.{which}.{param}")
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert(MANIFEST_KEY.to_string(), self.manifest.to_toml()?);
        let bytes = safetensors::serialize(self.tensors.iter(), Some(meta))
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = safetensors::SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint archive: {e}")))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
        let manifest = Manifest::from_toml(text)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, view.load(&Device::Cpu)?);
        }
        Ok(Self { manifest, tensors })
    }

    /// Parameters under `prefix.` (names keep the prefix).
    pub fn params(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn moments(&self, network: &str) -> Result<BTreeMap<String, Moments>> {
        let pm = format!("optim.{network}.m.");
        let mut out = BTreeMap::new();
        for (k, m) in &self.tensors {
            if let Some(param) = k.strip_prefix(&pm) {
                let vk = moment_name(network, "v", param);
                let v = self
                    .tensors
                    .get(&vk)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {vk}")))?;
                out.insert(
                    param.to_string(),
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use candle_core::DType;

    fn manifest() -> Manifest {
        Manifest {
            format: FORMAT_VERSION,
            variant: ScheduleVariant::Pd,
            scale: 4,
            iteration: 7,
            generator: GeneratorConfig::toy(4),
            constants: LossConstants::for_variant(ScheduleVariant::Pd),
            extractor: "seeded(0, width 16)".into(),
            discriminator: None,
            optimizer_steps: Some(OptimizerSteps {
                generator: 7,
                discriminator: 3,
            }),
            sampler: Some(SamplerState {
                seed: 1,
                stream: 0,
                word_pos: 1234567890123456789012,
            }),
            train: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut tensors = BTreeMap::new();
        let a = Tensor::new(&[1.0f32 / 3.0, -0.0, f32::MIN_POSITIVE], &Device::Cpu).unwrap();
        tensors.insert("generator.a".to_string(), a.clone());
        tensors.insert(moment_name("generator", "m", "generator.a"), a.clone());
        tensors.insert(moment_name("generator", "v", "generator.a"), (&a * 2.0).unwrap());
        let ck = Checkpoint {
            manifest: manifest(),
            tensors,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        let bits = |t: &Tensor| -> Vec<u32> {
            t.to_dtype(DType::F32).unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&back.tensors["generator.a"]), bits(&a));
        let moments = back.moments("generator").unwrap();
        assert_eq!(bits(&moments["generator.a"].v), bits(&(&a * 2.0).unwrap()));
        assert_eq!(back.params("generator").len(), 1);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Checkpoint(_))));
        let mut m = manifest().to_toml().unwrap();
        m = m.replace("format = 1", "format = 9");
        assert!(Manifest::from_toml(&m).is_err());
    }
}
