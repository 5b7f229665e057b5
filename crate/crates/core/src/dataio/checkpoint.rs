use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::io::{to_u32, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::pseudo::MemoryBank;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const REF_SOURCE: &str = "ref_source";
pub const BANK_FEATURES: &str = "bank.features";
pub const BANK_PROBS: &str = "bank.probs";

const MAX_NAME_LEN: usize = 1 << 12;
const MAX_RANK: usize = 8;

/// Which files were opened and which tensor payloads were materialized.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadAudit {
    pub files: Vec<PathBuf>,
    pub tensors: Vec<String>,
}

impl ReadAudit {
    pub fn read_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t == name)
    }
}

/// Named tensors in file order. `skipped` lists tensors whose payload was
/// passed over without being read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointContents {
    pub tensors: Vec<(String, Tensor)>,
    pub skipped: Vec<String>,
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut out = LeWriter::create(path)?;
    out.bytes(&CHECKPOINT_MAGIC)?;
    out.u32(CHECKPOINT_VERSION)?;
    out.u32(to_u32(tensors.len(), "tensor count")?)?;
    for (name, t) in tensors {
        out.u32(to_u32(name.len(), "name length")?)?;
        out.bytes(name.as_bytes())?;
        out.u32(to_u32(t.rank(), "rank")?)?;
        for &d in t.shape() {
            out.u32(to_u32(d, "dimension")?)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.bytes(&buf)?;
    }
    out.finish()
}

/// Reads every tensor except those named in `skip`, whose payloads are
/// seeked over. Duplicate names are rejected.
pub fn read_checkpoint(path: &Path, skip: &[&str], audit: &mut ReadAudit) -> Result<CheckpointContents> {
    let mut r = LeReader::open(path)?;
    audit.files.push(path.to_path_buf());
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut contents = CheckpointContents::default();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(r.malformed(format!("tensor {i} has name length {name_len}")));
        }
        let name = String::from_utf8(r.bytes(name_len, "tensor name")?)
            .map_err(|_| r.malformed(format!("tensor {i} name is not UTF-8")))?;
        if !seen.insert(name.clone()) {
            return Err(r.malformed(format!("duplicate tensor {name}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(r.malformed(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimensions")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n as u64 <= r.remaining() / 8)
            .ok_or_else(|| r.truncated(&format!("payload of {name}")))?;
        if skip.contains(&name.as_str()) {
            r.skip(numel as u64 * 8, "skipped payload")?;
            contents.skipped.push(name);
            continue;
        }
        let data = r.f64s(numel, "payload")?;
        audit.tensors.push(name.clone());
        contents.tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(contents)
}

/// Model parameters plus the optional training extras stored beside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Source batch used as the cross-attention partner at full inference.
    pub reference_source: Option<Tensor>,
    pub bank: Option<MemoryBank>,
}

impl Checkpoint {
    pub fn params_only(params: ModelParams) -> Self {
        Self {
            params,
            reference_source: None,
            bank: None,
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.params.count() + usize::from(self.reference_source.is_some()) + 2 * usize::from(self.bank.is_some())
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut named = self.params.named();
        if let Some(r) = &self.reference_source {
            named.push((REF_SOURCE.to_string(), r));
        }
        if let Some(b) = &self.bank {
            named.push((BANK_FEATURES.to_string(), b.features()));
            named.push((BANK_PROBS.to_string(), b.probs()));
        }
        named
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.named())
    }

    /// Strict load: every model tensor must be present with the shape implied
    /// by `cfg`, and no unrecognized names may appear. With
    /// `with_reference == false` the reference batch is never read.
    pub fn load(path: &Path, cfg: &ModelConfig, with_reference: bool, audit: &mut ReadAudit) -> Result<Self> {
        let skip: &[&str] = if with_reference { &[] } else { &[REF_SOURCE] };
        let contents = read_checkpoint(path, skip, audit)?;
        Self::from_contents(contents, cfg)
    }

    pub fn from_contents(contents: CheckpointContents, cfg: &ModelConfig) -> Result<Self> {
        let mut named: BTreeMap<String, Tensor> = contents.tensors.into_iter().collect();
        let params = ModelParams::take_from(&mut named, cfg)?;
        let reference_source = named.remove(REF_SOURCE);
        if let Some(r) = &reference_source {
            let img = [cfg.image_h, cfg.image_w, cfg.channels];
            if r.rank() != 4 || r.shape()[1..] != img {
                return Err(Error::TensorShape {
                    name: REF_SOURCE.into(),
                    expected: [&[r.shape().first().copied().unwrap_or(0)][..], &img].concat(),
                    found: r.shape().to_vec(),
                });
            }
        }
        let bank = match (named.remove(BANK_FEATURES), named.remove(BANK_PROBS)) {
            (Some(f), Some(p)) => Some(MemoryBank::from_parts(f, p)?),
            (None, None) => None,
            (Some(_), None) => return Err(Error::MissingTensor(BANK_PROBS.into())),
            (None, Some(_)) => return Err(Error::MissingTensor(BANK_FEATURES.into())),
        };
        if let Some(name) = named.into_keys().next() {
            return Err(Error::UnknownTensor(name));
        }
        Ok(Self {
            params,
            reference_source,
            bank,
        })
    }
}
