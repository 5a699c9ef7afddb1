//! `VTDW` binary container for frozen weights and trainable parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "VTDW"
//! version    u32
//! config     10 × u32 (width, heads, blocks, mlp_hidden, out_dim,
//!                      image_size, patch, visual_prompts, text_prompts, label_len)
//! seed       u64
//! sections   u32 count, then per section:
//!              u32 name length, name bytes, u32 record count, records
//! record     u32 name length, name bytes, u32 rank, rank × u64 dims,
//!            product(dims) × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, FrozenEncoderWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTDW";
pub const FORMAT_VERSION: u32 = 1;

pub const FROZEN_SECTION: &str = "frozen";
pub const TRAINABLE_SECTION: &str = "trainable";
pub const OPTIMIZER_SECTION: &str = "optimizer";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub seed: u64,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            sections: Vec::new(),
        }
    }

    pub fn with_section(mut self, name: &str, tensors: Vec<(String, Tensor)>) -> Self {
        self.sections.push(Section {
            name: name.to_string(),
            tensors,
        });
        self
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn frozen_weights(&self) -> Result<FrozenEncoderWeights> {
        let section = self.section(FROZEN_SECTION).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            msg: "missing frozen section".into(),
        })?;
        FrozenEncoderWeights::from_named_tensors(
            self.config.clone(),
            self.seed,
            section.tensors.clone(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in config_fields(&self.config) {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for section in &self.sections {
            write_str(&mut out, &section.name);
            out.extend_from_slice(&(section.tensors.len() as u32).to_le_bytes());
            for (name, t) in &section.tensors {
                write_record(&mut out, name, t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad magic, expected VTDW"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(format!("unsupported format version {version}")));
        }
        let mut fields = [0usize; 10];
        for f in &mut fields {
            *f = r.u32()? as usize;
        }
        let config = EncoderConfig {
            width: fields[0],
            heads: fields[1],
            blocks: fields[2],
            mlp_hidden: fields[3],
            out_dim: fields[4],
            image_size: fields[5],
            patch: fields[6],
            visual_prompts: fields[7],
            text_prompts: fields[8],
            label_len: fields[9],
        };
        let seed = r.u64()?;
        let n_sections = r.u32()?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let name = r.string()?;
            let n = r.u32()?;
            let mut tensors = Vec::with_capacity(n as usize);
            for _ in 0..n {
                tensors.push(r.record()?);
            }
            sections.push(Section { name, tensors });
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            seed,
            sections,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 over the serialized frozen section, as lowercase hex.
pub fn frozen_hash(weights: &FrozenEncoderWeights) -> String {
    tensors_hash(&weights.named_tensors())
}

/// SHA-256 over a list of named tensors in their serialized record form.
pub fn tensors_hash(tensors: &[(String, Tensor)]) -> String {
    let mut buf = Vec::new();
    for (name, t) in tensors {
        write_record(&mut buf, name, t);
    }
    let digest = Sha256::digest(&buf);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_fields(c: &EncoderConfig) -> [usize; 10] {
    [
        c.width,
        c.heads,
        c.blocks,
        c.mlp_hidden,
        c.out_dim,
        c.image_size,
        c.patch,
        c.visual_prompts,
        c.text_prompts,
        c.label_len,
    ]
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    write_str(out, name);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg: msg.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fmt_err("unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| fmt_err(e.to_string()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(fmt_err(format!("tensor `{name}` has unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| fmt_err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}
