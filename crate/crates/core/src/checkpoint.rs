//! Binary container for weights, sampler parameters and feature arrays.
//!
//! Layout: the 8-byte magic `DDSSCKPT`, a little-endian `u64` header length, a
//! JSON header, then raw little-endian `f64` payloads at the offsets the
//! header lists (relative to the start of the payload section).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{NetworkConfig, NoiseSchedule, ScheduleKind, ScoreNetwork};
use crate::error::{Error, Result};
use crate::ggdm::{GgdmParams, SamplerSpec};
use crate::tensorgrad::Tensor;

pub const MAGIC: &[u8; 8] = b"DDSSCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub arrays: Vec<ArrayEntry>,
    pub metadata: BTreeMap<String, Value>,
}

/// Named arrays plus free-form metadata, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub arrays: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, Value>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
        self.metadata.insert(key.to_string(), v);
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Format(format!("metadata key '{key}' missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("metadata '{key}': {e}")))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("array '{name}' missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            let length = (t.numel() * 8) as u64;
            arrays.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                offset,
                length,
            });
            offset += length;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            arrays,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &bytes[body..];
        let mut spans: Vec<(u64, u64)> = Vec::new();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            if e.dtype != DTYPE {
                return Err(Error::Format(format!("array '{}' has dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.length);
            if e.length != 8 * numel as u64 || end.is_none_or(|end| end > payload.len() as u64) {
                return Err(Error::Format(format!("array '{}' is out of bounds", e.name)));
            }
            spans.push((e.offset, e.offset + e.length));
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::Format("array payloads overlap".into()));
        }
        Ok(Self {
            arrays,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A pre-trained model: raw and EMA weights plus the schedule they assume.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub network: ScoreNetwork,
    pub ema: ScoreNetwork,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl ModelCheckpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        c.set_meta("kind", "model")?;
        c.set_meta("network", self.network.config())?;
        c.set_meta("schedule_kind", self.schedule.kind())?;
        c.set_meta("schedule_fingerprint", self.schedule.fingerprint())?;
        c.set_meta("seed", self.seed)?;
        c.push("schedule.betas", Tensor::vector(self.schedule.betas().to_vec()));
        c.push("schedule.alpha_bars", Tensor::vector(self.schedule.alpha_bars().to_vec()));
        let names = self.network.config().layout();
        for (prefix, net) in [("raw", &self.network), ("ema", &self.ema)] {
            for ((name, _), w) in names.iter().zip(net.weights()) {
                c.push(format!("{prefix}.{name}"), w.clone());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: String = c.meta("kind")?;
        if kind != "model" {
            return Err(Error::Format(format!("expected a model checkpoint, found '{kind}'")));
        }
        let config: NetworkConfig = c.meta("network")?;
        let schedule_kind: ScheduleKind = c.meta("schedule_kind")?;
        let schedule = NoiseSchedule::from_arrays(
            schedule_kind,
            c.array("schedule.betas")?.to_vec(),
            c.array("schedule.alpha_bars")?.to_vec(),
        )?;
        let stored: String = c.meta("schedule_fingerprint")?;
        if stored != schedule.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: stored,
                found: schedule.fingerprint(),
            });
        }
        let load = |prefix: &str| -> Result<ScoreNetwork> {
            let weights = config
                .layout()
                .iter()
                .map(|(name, _)| c.array(&format!("{prefix}.{name}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            ScoreNetwork::from_weights(config.clone(), weights)
        };
        Ok(Self {
            network: load("raw")?,
            ema: load("ema")?,
            schedule,
            seed: c.meta("seed")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn sampler_to_container(p: &GgdmParams, seed: u64) -> Result<Container> {
    let mut c = Container::default();
    c.set_meta("kind", "sampler")?;
    c.set_meta("family", p.spec.tag())?;
    c.set_meta("spec", p.spec)?;
    c.set_meta("K", p.k)?;
    c.set_meta("T", p.t_max)?;
    c.set_meta("stride", &p.stride)?;
    c.set_meta("schedule_fingerprint", &p.schedule_fingerprint)?;
    c.set_meta("seed", seed)?;
    for (name, v) in p.groups() {
        c.push(name, Tensor::vector(v.clone()));
    }
    Ok(c)
}

pub fn sampler_from_container(c: &Container) -> Result<GgdmParams> {
    let kind: String = c.meta("kind")?;
    if kind != "sampler" {
        return Err(Error::Format(format!("expected a sampler checkpoint, found '{kind}'")));
    }
    let spec: SamplerSpec = c.meta("spec")?;
    let mut p = GgdmParams {
        spec,
        k: c.meta("K")?,
        t_max: c.meta("T")?,
        stride: c.meta("stride")?,
        raw_mu: Vec::new(),
        raw_sigma: Vec::new(),
        raw_vars: Vec::new(),
        raw_time: Vec::new(),
        raw_pred_a: Vec::new(),
        raw_pred_b: Vec::new(),
        schedule_fingerprint: c.meta("schedule_fingerprint")?,
    };
    for (name, t) in &c.arrays {
        p.set_group(name, t.to_vec())?;
    }
    p.validate()?;
    Ok(p)
}

pub fn save_sampler(path: &Path, p: &GgdmParams, seed: u64) -> Result<()> {
    sampler_to_container(p, seed)?.save(path)
}

pub fn load_sampler(path: &Path) -> Result<GgdmParams> {
    sampler_from_container(&Container::load(path)?)
}

/// Precomputed features: one array named `features` of shape `[count, m]`.
pub fn save_features(path: &Path, features: &Tensor) -> Result<()> {
    let mut c = Container::default();
    c.set_meta("kind", "features")?;
    c.push("features", features.clone());
    c.save(path)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let c = Container::load(path)?;
    let f = c.array("features")?;
    if f.ndim() != 2 {
        return Err(Error::Format(format!("features must be 2-D, got {:?}", f.shape())));
    }
    Ok(f.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggdm::{init_from_ddpm, Family};

    #[test]
    fn container_round_trip_is_byte_identical() {
        let mut c = Container::default();
        c.push("a", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        c.push("b", Tensor::scalar(0.1));
        c.set_meta("note", "x").unwrap();
        c.set_meta("value", 0.1f64 + 0.2).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let mut c = Container::default();
        c.push("a", Tensor::vector(vec![1.0, 2.0]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"NOTACKPTxxxxxxxxxx").is_err());
        let text = String::from_utf8_lossy(&bytes[16..bytes.len() - 16]).replace("\"length\":16", "\"length\":24");
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(text.len() as u64).to_le_bytes());
        forged.extend_from_slice(text.as_bytes());
        forged.extend_from_slice(&bytes[bytes.len() - 16..]);
        assert!(matches!(Container::from_bytes(&forged), Err(Error::Format(_))));
    }

    #[test]
    fn model_and_sampler_round_trip() {
        let schedule = NoiseSchedule::linear(16, 1e-3, 0.2).unwrap();
        let net = ScoreNetwork::init(NetworkConfig::toy(16), 3);
        let m = ModelCheckpoint {
            network: net.clone(),
            ema: ScoreNetwork::init(NetworkConfig::toy(16), 4),
            schedule: schedule.clone(),
            seed: 9,
        };
        let bytes = m.to_container().unwrap().to_bytes().unwrap();
        let back = ModelCheckpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.network.weights(), net.weights());
        assert_eq!(back.schedule.fingerprint(), schedule.fingerprint());
        assert_eq!(back.to_container().unwrap().to_bytes().unwrap(), bytes);

        let p = init_from_ddpm(&schedule, 4, crate::ggdm::SamplerSpec::new(Family::GgdmPred, true)).unwrap();
        let c = sampler_to_container(&p, 1).unwrap();
        let q = sampler_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(p, q);
    }
}
