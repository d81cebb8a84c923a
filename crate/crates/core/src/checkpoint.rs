//! Versioned checkpoint container.
//!
//! ```text
//! magic       8 bytes  "SCAFCKPT"
//! version     u32 LE
//! header_len  u64 LE
//! header      JSON (CheckpointHeader)
//! blocks      little-endian values, dtype per header, at the offsets listed
//! ```
//!
//! Block names are prefixed by role: `param/`, `buffer/`, `adam_m/`, `adam_v/`,
//! and `bank/` for the frozen discriminator banks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::discriminator::{BankConfig, BankSet, Discriminator, PatchBank, SemanticBank};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SCAFCKPT";

/// Hex SHA-256 of a config's canonical JSON serialization.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed)
            .map_err(|e| Error::Invalid(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Invalid("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Invalid(format!("bad rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BankMeta {
    backbone: BackboneConfig,
    bank: BankConfig,
    patch_stages: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dtype: String,
    config_hash: String,
    epoch: u32,
    step: u64,
    adam_steps: u64,
    rng: RngState,
    model: ModelConfig,
    banks: Option<BankMeta>,
    blocks: Vec<BlockEntry>,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Epochs completed.
    pub epoch: u32,
    pub step: u64,
    pub adam_steps: u64,
    pub rng: RngState,
    pub model: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub banks: Option<(BackboneConfig, BankConfig, BankSet, BankSet)>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Invalid(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn encode(t: &Tensor, dtype: DType, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.to_dtype(dtype)?.flatten_all()?;
    match dtype {
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend(v.to_le_bytes())),
        _ => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend(v.to_le_bytes())),
    }
    Ok(())
}

fn bank_tensor(data: &[f32], dim: usize) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, (data.len() / dim, dim), &Device::Cpu)?)
}

impl Checkpoint {
    pub fn discriminator(&self) -> Result<Option<Discriminator>> {
        match &self.banks {
            None => Ok(None),
            Some((bb, cfg, auth, manip)) => {
                Ok(Some(Discriminator::from_banks(bb, cfg, auth.clone(), manip.clone())?))
            }
        }
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        let name = dtype_name(dtype)?;
        let mut body = Vec::new();
        let mut blocks = Vec::new();
        let mut push = |block: String, t: &Tensor, dt: DType| -> Result<()> {
            blocks.push(BlockEntry {
                name: block,
                shape: t.dims().to_vec(),
                offset: body.len() as u64,
            });
            encode(t, dt, &mut body)
        };
        for (role, map) in [
            ("param", &self.params),
            ("buffer", &self.buffers),
            ("adam_m", &self.adam_m),
            ("adam_v", &self.adam_v),
        ] {
            for (k, t) in map {
                push(format!("{role}/{k}"), t, dtype)?;
            }
        }
        let mut bank_meta = None;
        if let Some((bb, cfg, auth, manip)) = &self.banks {
            for (set_name, set) in [("authentic", auth), ("manipulated", manip)] {
                let sem = &set.semantic;
                push(format!("bank/{set_name}/semantic"), &bank_tensor(sem.as_flat(), sem.dim())?, DType::F32)?;
                for (k, p) in set.patches.iter().enumerate() {
                    push(format!("bank/{set_name}/patch{k}"), &bank_tensor(p.as_flat(), p.dim())?, DType::F32)?;
                }
            }
            bank_meta = Some(BankMeta {
                backbone: bb.clone(),
                bank: cfg.clone(),
                patch_stages: auth.patches.len(),
            });
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            dtype: name.into(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_steps: self.adam_steps,
            rng: self.rng.clone(),
            model: self.model.clone(),
            banks: bank_meta,
            blocks,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(body);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body_start])
            .map_err(|e| Error::format(path, e.to_string()))?;
        let body = &bytes[body_start..];
        let dtype = match header.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            d => return Err(Error::format(path, format!("unknown dtype {d}"))),
        };
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for b in &header.blocks {
            let dt = if b.name.starts_with("bank/") { DType::F32 } else { dtype };
            let width = if dt == DType::F64 { 8 } else { 4 };
            let n: usize = b.shape.iter().product();
            let start = b.offset as usize;
            let end = start + n * width;
            if end > body.len() {
                return Err(Error::format(path, format!("block `{}` runs past end of file", b.name)));
            }
            let raw = &body[start..end];
            let t = if dt == DType::F64 {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, b.shape.as_slice(), &Device::Cpu)?
            } else {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, b.shape.as_slice(), &Device::Cpu)?
            };
            tensors.insert(b.name.clone(), t);
        }
        let take = |role: &str| -> BTreeMap<String, Tensor> {
            let prefix = format!("{role}/");
            tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        let banks = match &header.banks {
            None => None,
            Some(meta) => {
                let set = |name: &str| -> Result<BankSet> {
                    let get = |k: &str| {
                        tensors
                            .get(&format!("bank/{name}/{k}"))
                            .ok_or_else(|| Error::format(path, format!("missing bank block {name}/{k}")))
                    };
                    let flat = |t: &Tensor| -> Result<(usize, Vec<f32>)> {
                        Ok((t.dims()[1], t.flatten_all()?.to_vec1::<f32>()?))
                    };
                    let (dim, data) = flat(get("semantic")?)?;
                    let semantic = SemanticBank::from_unit_rows(dim, data)?;
                    let mut patches = Vec::new();
                    for k in 0..meta.patch_stages {
                        let (dim, data) = flat(get(&format!("patch{k}"))?)?;
                        patches.push(PatchBank::from_entries(dim, data, usize::MAX, 0)?);
                    }
                    Ok(BankSet { semantic, patches })
                };
                Some((meta.backbone.clone(), meta.bank.clone(), set("authentic")?, set("manipulated")?))
            }
        };
        Ok(Self {
            config_hash: header.config_hash,
            epoch: header.epoch,
            step: header.step,
            adam_steps: header.adam_steps,
            rng: header.rng,
            model: header.model,
            params: take("param"),
            buffers: take("buffer"),
            adam_m: take("adam_m"),
            adam_v: take("adam_v"),
            banks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let t = |v: Vec<f32>, s: &[usize]| Tensor::from_vec(v, s, &Device::Cpu).unwrap();
        let mut params = BTreeMap::new();
        params.insert("a.weight".to_string(), t(vec![1.0, -2.0, 3.5, 0.25], &[2, 2]));
        params.insert("b".to_string(), t(vec![7.0], &[1]));
        let mut buffers = BTreeMap::new();
        buffers.insert("bn.running_mean".to_string(), t(vec![0.5], &[1]));
        Checkpoint {
            config_hash: config_hash(&ModelConfig::default()),
            epoch: 3,
            step: 12,
            adam_steps: 12,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(1)),
            model: ModelConfig::default(),
            params,
            buffers,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            banks: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let c = sample();
        c.save(&path, DType::F32).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.config_hash, c.config_hash);
        assert_eq!(back.rng, c.rng);
        assert_eq!(back.params.keys().collect::<Vec<_>>(), c.params.keys().collect::<Vec<_>>());
        assert_eq!(
            back.params["a.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1.0, -2.0, 3.5, 0.25]
        );
        assert_eq!(back.params["a.weight"].dims(), &[2, 2]);
        assert_eq!(back.buffers["bn.running_mean"].to_vec1::<f32>().unwrap(), vec![0.5]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn rng_state_continues_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(5);
        for _ in 0..17 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..50 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn hash_tracks_config() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.backbone.widths = [16, 32, 64, 128];
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
