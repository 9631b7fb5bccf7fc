//! Checkpoint files: a JSON manifest naming every parameter, its shape and
//! owning branch, followed by little-endian `f32` payloads, optional
//! optimizer moments and a SHA-256 trailer over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Branch, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{Adam, AdamConfig};

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub branch: Branch,
    pub trainable: bool,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    /// Parameter names owned by each branch.
    pub branches: BTreeMap<Branch, Vec<String>>,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let mut branches: BTreeMap<Branch, Vec<String>> = BTreeMap::new();
        for p in self.model.params.iter() {
            branches.entry(p.branch).or_default().push(p.name.clone());
        }
        Manifest {
            version: VERSION,
            model: self.model.config.clone(),
            branches,
            params: self
                .model
                .params
                .iter()
                .map(|p| ParamEntry { name: p.name.clone(), branch: p.branch, trainable: p.trainable, shape: p.value.shape().to_vec() })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry { config: o.config.clone(), step: o.step }),
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let mut push = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.model.params.iter() {
            push(&p.value);
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut push);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Integrity(format!("checkpoint {what}"));
        if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(corrupt("has no valid header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(&format!("version {version} is not supported")));
        }
        let mlen = usize::try_from(u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"))).map_err(|_| corrupt("manifest too large"))?;
        let mend = 16usize.checked_add(mlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("manifest is truncated"))?;
        let manifest: Manifest = serde_json::from_slice(&body[16..mend]).map_err(|e| corrupt(&format!("manifest is unreadable: {e}")))?;
        let mut values = body[mend..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        if body[mend..].len() % 4 != 0 {
            return Err(corrupt("payload is misaligned"));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(corrupt("payload is truncated"));
            }
            Tensor::new(shape, data)
        };
        let mut params = ParamStore::new();
        for e in &manifest.params {
            params.push(e.name.clone(), e.branch, e.trainable, take(&e.shape)?);
        }
        let optimizer = match &manifest.optimizer {
            Some(o) => {
                let m = manifest.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                let v = manifest.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
                Some(Adam { config: o.config.clone(), step: o.step, m, v })
            }
            None => None,
        };
        if values.next().is_some() {
            return Err(corrupt("has trailing payload"));
        }
        Ok(Checkpoint { model: Model { config: manifest.model, params }, optimizer, epoch: manifest.epoch, step: manifest.step, seed: manifest.seed })
    }

    /// Writes through a temporary sibling and renames it into place, so an
    /// interrupted save leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint that must match the parameter layout of a model
    /// built from `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let reference = Model::<f32>::new(expected.clone(), &mut crate::rng::stream(0, &[]))?;
        let layout = |s: &ParamStore<f32>| s.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect::<Vec<_>>();
        let (have, want) = (layout(&ck.model.params), layout(&reference.params));
        if have != want {
            let diff = want.iter().find(|w| !have.contains(w)).or_else(|| have.iter().find(|h| !want.contains(h)));
            return Err(Error::Integrity(format!("{}: architecture mismatch at {diff:?}", path.display())));
        }
        Ok(ck)
    }

    /// Inference-only copy with the pose-guided branches and optimizer
    /// state removed.
    pub fn export_mb_only(&self) -> Checkpoint {
        Checkpoint { model: self.model.export_mb_only(), optimizer: None, epoch: self.epoch, step: self.step, seed: self.seed }
    }
}
