//! Checkpoint files.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic     5 bytes   "UPCK1"
//! version   u32
//! kind      u8        0 = denoiser, 1 = matcher
//! config    u32 byte length, then canonical JSON (UTF-8)
//! step      u64       completed training steps
//! rng       32-byte ChaCha seed, u64 stream, u128 word position
//! manifest  u32 count, then per array:
//!             u32 name length, name (UTF-8), u8 dtype (0 = f32), u32 rank, rank × u32 dims
//! arrays    f32 values in manifest order
//! crc       u32 CRC32 of every preceding byte
//! ```
//!
//! Model weights come first in the manifest; optimizer moments follow under
//! the `optim.` prefix.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UPCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    Matcher,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Denoiser => 0,
            ModelKind::Matcher => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Denoiser),
            1 => Some(ModelKind::Matcher),
            _ => None,
        }
    }
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub version: u32,
    /// Canonical JSON echo of the configuration that produced the weights.
    pub config: String,
    pub weights: Params<f32>,
    /// Optimizer moments, named as returned by `Optimizer::state`.
    pub optimizer: Params<f32>,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    /// The config echo parsed as JSON.
    pub fn config_value(&self) -> Result<serde_json::Value> {
        serde_json::from_str(&self.config).map_err(|e| Error::format("config", e.to_string()))
    }

    /// Deserializes one section of the config echo.
    pub fn config_section<C: serde::de::DeserializeOwned>(&self, key: &str) -> Result<C> {
        let v = self.config_value()?;
        let section = v
            .get(key)
            .cloned()
            .ok_or_else(|| Error::format("config", format!("missing section `{key}`")))?;
        serde_json::from_value(section).map_err(|e| Error::format("config", format!("section `{key}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let arrays = self.arrays();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in &arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn arrays(&self) -> Vec<(String, &Tensor<f32>)> {
        let w = self.weights.names().iter().cloned().zip(self.weights.tensors());
        let o = self
            .optimizer
            .names()
            .iter()
            .map(|n| format!("{OPTIM_PREFIX}{n}"))
            .zip(self.optimizer.tensors());
        w.chain(o).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(5, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a UPCK1 checkpoint"));
        }
        let version = rd.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let tag = rd.take(1, "model_kind")?[0];
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::format("model_kind", format!("unknown tag {tag}")))?;
        let n = rd.u32("config")? as usize;
        let config = std::str::from_utf8(rd.take(n, "config")?)
            .map_err(|_| Error::format("config", "not utf-8"))?
            .to_string();
        serde_json::from_str::<serde_json::Value>(&config).map_err(|e| Error::format("config", e.to_string()))?;
        let step = u64::from_le_bytes(rd.array("step")?);
        let rng = RngState {
            seed: rd.array("rng")?,
            stream: u64::from_le_bytes(rd.array("rng")?),
            word_pos: u128::from_le_bytes(rd.array("rng")?),
        };
        let count = rd.u32("manifest")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let field = format!("manifest[{i}]");
            let n = rd.u32(&field)? as usize;
            let name = std::str::from_utf8(rd.take(n, &field)?)
                .map_err(|_| Error::format(&field, "name is not utf-8"))?
                .to_string();
            let dtype = rd.take(1, &field)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::format(&field, format!("unknown dtype {dtype} for `{name}`")));
            }
            let rank = rd.u32(&field)? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(rd.u32(&field)? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(&field, format!("shape of `{name}` overflows")))?;
            manifest.push((name, shape, len));
        }
        let total = manifest
            .iter()
            .try_fold(0usize, |a, (_, _, n)| a.checked_add(n.checked_mul(4)?))
            .ok_or_else(|| Error::format("manifest", "array sizes overflow"))?;
        if bytes.len().saturating_sub(rd.pos) != total.saturating_add(4) {
            return Err(Error::format(
                "arrays",
                format!(
                    "manifest describes {total} bytes of data, file has {}",
                    bytes.len().saturating_sub(rd.pos + 4)
                ),
            ));
        }
        let mut weights = Params::new();
        let mut optimizer = Params::new();
        for (name, shape, len) in manifest {
            let raw = rd.take(len * 4, "arrays")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(&shape, data)?;
            match name.strip_prefix(OPTIM_PREFIX) {
                Some(rest) => optimizer.push(rest, t),
                None => weights.push(name, t),
            };
        }
        let body = rd.pos;
        let stored = rd.u32("crc32")?;
        let actual = crc32fast::hash(&bytes[..body]);
        if stored != actual {
            return Err(Error::format(
                "crc32",
                format!("checksum {stored:08x} does not match contents {actual:08x}"),
            ));
        }
        Ok(Self {
            kind,
            version,
            config,
            weights,
            optimizer,
            step,
            rng,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(field, "file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().unwrap())
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }
}
