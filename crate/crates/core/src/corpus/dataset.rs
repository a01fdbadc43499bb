//! The `UPDS1` dataset file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic         5 bytes   "UPDS1"
//! resolution    u32
//! count         u32
//! caption_slot  u16       token slots per record
//! spec_slot     u16       bytes reserved for the scene text per record
//! vocab_len     u32
//! vocab         vocab_len × (u8 byte length, utf-8 token)
//! records       count × fixed-width record:
//!   image       3·R·R × f32, channel planes in RGB order, values in [-1, 1]
//!   caption     u16 length, then caption_slot × u16 ids (zero padded)
//!   spec        u16 length, then spec_slot bytes of canonical text (zero padded)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::caption::caption_scene;
use super::render::render_scene;
use super::scene::{derive_seed, gen_scene_spec, Complexity, SceneSpec};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"UPDS1";
pub const CAPTION_SLOT: usize = 32;
pub const SPEC_SLOT: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// `[1, 3, R, R]`
    pub image: Tensor<f32>,
    pub caption: Vec<u16>,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub vocab: Vocabulary,
    pub records: Vec<Record>,
}

/// Seed streams used to derive per-record randomness.
const SPEC_STREAM: u64 = 0;
const CAPTION_STREAM: u64 = 1;

/// Generates record `index` of a corpus; a pure function of its arguments.
pub fn make_record(
    seed: u64,
    index: usize,
    complexity: Complexity,
    resolution: usize,
    vocab: &Vocabulary,
) -> Result<Record> {
    let spec = gen_scene_spec(derive_seed(seed, index as u64, SPEC_STREAM), complexity);
    let caption = caption_scene(&spec, derive_seed(seed, index as u64, CAPTION_STREAM), vocab)?;
    Ok(Record {
        image: render_scene(&spec, resolution),
        caption,
        spec,
    })
}

impl Dataset {
    /// `n_simple` single-object scenes followed by `n_complex` multi-object ones.
    pub fn generate(n_simple: usize, n_complex: usize, seed: u64, resolution: usize) -> Result<Self> {
        let vocab = Vocabulary::default();
        let records = (0..n_simple + n_complex)
            .into_par_iter()
            .map(|i| {
                let complexity = if i < n_simple {
                    Complexity::Simple
                } else {
                    Complexity::Complex
                };
                make_record(seed, i, complexity, resolution, &vocab)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            resolution,
            vocab,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let r = self.resolution;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(CAPTION_SLOT as u16).to_le_bytes());
        out.extend_from_slice(&(SPEC_SLOT as u16).to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for w in self.vocab.words() {
            out.push(w.len() as u8);
            out.extend_from_slice(w.as_bytes());
        }
        for (i, rec) in self.records.iter().enumerate() {
            rec.image.ensure_shape(&[1, 3, r, r])?;
            for v in rec.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if rec.caption.len() > CAPTION_SLOT {
                return Err(Error::param(format!("record {i}: caption longer than {CAPTION_SLOT}")));
            }
            out.extend_from_slice(&(rec.caption.len() as u16).to_le_bytes());
            for k in 0..CAPTION_SLOT {
                let id = rec.caption.get(k).copied().unwrap_or(0);
                out.extend_from_slice(&id.to_le_bytes());
            }
            let text = rec.spec.canonical();
            if text.len() > SPEC_SLOT {
                return Err(Error::param(format!("record {i}: scene text longer than {SPEC_SLOT}")));
            }
            out.extend_from_slice(&(text.len() as u16).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
            out.resize(out.len() + SPEC_SLOT - text.len(), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(5, "magic")? != DATASET_MAGIC {
            return Err(Error::format("magic", "not a UPDS1 dataset"));
        }
        let resolution = rd.u32("resolution")? as usize;
        if resolution == 0 || resolution > 4096 {
            return Err(Error::format("resolution", format!("implausible value {resolution}")));
        }
        let count = rd.u32("record count")? as usize;
        let caption_slot = rd.u16("caption slot")? as usize;
        let spec_slot = rd.u16("spec slot")? as usize;
        let vocab_len = rd.u32("vocabulary length")? as usize;
        let mut words = Vec::with_capacity(vocab_len.min(1 << 16));
        for _ in 0..vocab_len {
            let n = rd.take(1, "vocabulary")?[0] as usize;
            let w = std::str::from_utf8(rd.take(n, "vocabulary")?)
                .map_err(|_| Error::format("vocabulary", "token is not utf-8"))?;
            words.push(w.to_string());
        }
        let vocab = Vocabulary::from_words(words)?;
        let plane = 3 * resolution * resolution;
        let record_len = plane * 4 + 2 + caption_slot * 2 + 2 + spec_slot;
        let remaining = bytes.len() - rd.pos;
        if remaining != count.saturating_mul(record_len) {
            return Err(Error::format(
                "records",
                format!("expected {count} records of {record_len} bytes, found {remaining} bytes"),
            ));
        }
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let img = rd.take(plane * 4, "image")?;
            let data = img
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect::<Vec<f32>>();
            if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::format("image", format!("record {i}: pixel outside [-1, 1]")));
            }
            let image = Tensor::from_vec(&[1, 3, resolution, resolution], data)?;
            let len = rd.u16("caption length")? as usize;
            if len > caption_slot {
                return Err(Error::format("caption length", format!("record {i}: {len} > slot {caption_slot}")));
            }
            let slot = rd.take(caption_slot * 2, "caption")?;
            let caption: Vec<u16> = slot
                .chunks_exact(2)
                .take(len)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            if let Some(&bad) = caption.iter().find(|&&id| id as usize >= vocab.len()) {
                return Err(Error::format("caption", format!("record {i}: token id {bad} outside vocabulary")));
            }
            let slen = rd.u16("spec length")? as usize;
            if slen > spec_slot {
                return Err(Error::format("spec length", format!("record {i}: {slen} > slot {spec_slot}")));
            }
            let text = &rd.take(spec_slot, "spec")?[..slen];
            let text = std::str::from_utf8(text).map_err(|_| Error::format("spec", "not utf-8"))?;
            let spec = SceneSpec::parse_canonical(text)?;
            records.push(Record { image, caption, spec });
        }
        Ok(Self {
            resolution,
            vocab,
            records,
        })
    }

    /// Writes the dataset and its vocabulary sidecar (`<path>.vocab.txt`).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        let side = vocab_sidecar_path(path);
        fs::write(&side, self.vocab.to_sidecar()).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Splits off the last `n` records.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.records.len());
        let tail = self.records.split_off(self.records.len() - n);
        let other = Dataset {
            resolution: self.resolution,
            vocab: self.vocab.clone(),
            records: tail,
        };
        (self, other)
    }
}

pub fn vocab_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab.txt");
    PathBuf::from(s)
}

/// Generates a corpus and writes it to `out_path`.
pub fn build_dataset(n_simple: usize, n_complex: usize, seed: u64, resolution: usize, out_path: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(n_simple, n_complex, seed, resolution)?;
    ds.save(out_path)?;
    Ok(ds)
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

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
