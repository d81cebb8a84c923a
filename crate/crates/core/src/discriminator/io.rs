//! Bank file format.
//!
//! ```text
//! magic   8 bytes  "SCAFBANK"
//! version u32 LE   (currently 1)
//! kind    u32 LE   0 = patch, 1 = semantic
//! count   u64 LE
//! dim     u64 LE
//! data    count * dim f32 LE, row-major
//! ```
//!
//! A bank directory holds one file per bank and a `manifest.json` naming them.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BankConfig, BankSet, Discriminator, PatchBank, SemanticBank};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

pub const BANK_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SCAFBANK";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankFileKind {
    Patch = 0,
    Semantic = 1,
}

pub fn write_bank_file(path: &Path, kind: BankFileKind, dim: usize, data: &[f32]) -> Result<()> {
    let count = data.len().checked_div(dim).unwrap_or(0);
    let mut buf = Vec::with_capacity(32 + data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&BANK_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(kind as u32).to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_bank_file(path: &Path) -> Result<(BankFileKind, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a bank file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != BANK_FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported bank version {version}")));
    }
    let kind = match u32_at(12) {
        0 => BankFileKind::Patch,
        1 => BankFileKind::Semantic,
        k => return Err(Error::format(path, format!("unknown bank kind {k}"))),
    };
    let count = u64_at(16) as usize;
    let dim = u64_at(24) as usize;
    let body = &bytes[32..];
    if body.len() != count * dim * 4 {
        return Err(Error::format(
            path,
            format!("expected {count}x{dim} floats, found {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((kind, dim, data))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetManifest {
    semantic: String,
    patches: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    backbone: BackboneConfig,
    bank: BankConfig,
    authentic: SetManifest,
    manipulated: SetManifest,
}

fn save_set(dir: &Path, name: &str, set: &BankSet, stages: &[usize]) -> Result<SetManifest> {
    let semantic = format!("{name}_semantic.bank");
    write_bank_file(
        &dir.join(&semantic),
        BankFileKind::Semantic,
        set.semantic.dim(),
        set.semantic.as_flat(),
    )?;
    let mut patches = Vec::new();
    for (bank, s) in set.patches.iter().zip(stages) {
        let file = format!("{name}_patch_stage{s}.bank");
        write_bank_file(&dir.join(&file), BankFileKind::Patch, bank.dim(), bank.as_flat())?;
        patches.push(file);
    }
    Ok(SetManifest { semantic, patches })
}

fn load_set(dir: &Path, m: &SetManifest, capacity: usize) -> Result<BankSet> {
    let path = dir.join(&m.semantic);
    let (kind, dim, data) = read_bank_file(&path)?;
    if kind != BankFileKind::Semantic {
        return Err(Error::format(&path, "expected a semantic bank"));
    }
    let semantic = SemanticBank::from_unit_rows(dim, data)?;
    let mut patches = Vec::new();
    for file in &m.patches {
        let path = dir.join(file);
        let (kind, dim, data) = read_bank_file(&path)?;
        if kind != BankFileKind::Patch {
            return Err(Error::format(&path, "expected a patch bank"));
        }
        patches.push(PatchBank::from_entries(dim, data, capacity.max(1), 0)?);
    }
    Ok(BankSet { semantic, patches })
}

pub(super) fn save_dir(md: &Discriminator, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stages = &md.cfg.stages;
    let manifest = Manifest {
        version: BANK_FORMAT_VERSION,
        backbone: md.backbone_cfg.clone(),
        bank: md.cfg.clone(),
        authentic: save_set(dir, "authentic", &md.authentic, stages)?,
        manipulated: save_set(dir, "manipulated", &md.manipulated, stages)?,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub(super) fn load_dir(dir: &Path) -> Result<Discriminator> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != BANK_FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", m.version)));
    }
    // Stored banks were already capped when built.
    let authentic = load_set(dir, &m.authentic, usize::MAX)?;
    let manipulated = load_set(dir, &m.manipulated, usize::MAX)?;
    Discriminator::from_banks(&m.backbone, &m.bank, authentic, manipulated)
}
