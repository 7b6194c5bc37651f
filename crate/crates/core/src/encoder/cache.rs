//! Binary embedding cache with an id index for random access.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    "DGRX"
//! version  u32
//! d_enc    u32
//! width    u32            32 or 64 (bits per float)
//! count    u32
//! table    count × { id_len u32, id bytes, n u32, offset u64 }
//! payload  per record: cls (d_enc floats) then n rows of d_enc floats
//! ```
//!
//! `offset` is relative to the start of the payload.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::{EncodedSentence, Provenance};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::EncoderError;

pub const CACHE_MAGIC: &[u8; 4] = b"DGRX";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_PROVIDER: &str = "cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FloatWidth {
    F32,
    #[default]
    F64,
}

impl FloatWidth {
    fn bits(self) -> u32 {
        match self {
            FloatWidth::F32 => 32,
            FloatWidth::F64 => 64,
        }
    }

    fn bytes(self) -> u64 {
        self.bits() as u64 / 8
    }

    fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(FloatWidth::F32),
            64 => Some(FloatWidth::F64),
            _ => None,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> EncoderError {
    EncoderError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> EncoderError {
    EncoderError::Format {
        path: path.display().to_string(),
        message: msg.into(),
    }
}

/// Writes `records` to `path`. Every record must share one `d_enc`.
pub fn cache_write<T: Scalar>(
    path: &Path,
    records: &[(String, EncodedSentence<T>)],
    width: FloatWidth,
) -> Result<(), EncoderError> {
    let d_enc = records.first().map(|(_, e)| e.d_enc()).unwrap_or(0);
    for (id, enc) in records {
        if enc.d_enc() != d_enc || enc.word_states.cols() != d_enc {
            return Err(EncoderError::Contract(format!(
                "record {id} has width {} but the cache holds {d_enc}",
                enc.word_states.cols()
            )));
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_u32::<LittleEndian>(d_enc as u32)?;
        w.write_u32::<LittleEndian>(width.bits())?;
        w.write_u32::<LittleEndian>(records.len() as u32)?;
        let mut offset = 0u64;
        for (id, enc) in records {
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id.as_bytes())?;
            let n = enc.num_words() as u64;
            w.write_u32::<LittleEndian>(n as u32)?;
            w.write_u64::<LittleEndian>(offset)?;
            offset += (n + 1) * d_enc as u64 * width.bytes();
        }
        for (_, enc) in records {
            for &v in enc.cls.iter().chain(enc.word_states.data()) {
                match width {
                    FloatWidth::F32 => w.write_f32::<LittleEndian>(v.as_f64() as f32)?,
                    FloatWidth::F64 => w.write_f64::<LittleEndian>(v.as_f64())?,
                }
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone)]
struct IndexEntry {
    n: usize,
    offset: u64,
}

/// Open cache with its index loaded; records are read on demand.
#[derive(Debug)]
pub struct CacheReader {
    path: PathBuf,
    d_enc: usize,
    width: FloatWidth,
    payload_start: u64,
    ids: Vec<String>,
    index: HashMap<String, IndexEntry>,
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self, EncoderError> {
        let mut file = File::open(path).map_err(|e| io_err(path, e))?;
        let file_len = file.metadata().map_err(|e| io_err(path, e))?.len();
        let truncated = |_| format_err(path, "truncated header or index");

        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CACHE_MAGIC {
            return Err(format_err(path, format!("bad magic {magic:?}")));
        }
        let version = file.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != CACHE_VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let d_enc = file.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let bits = file.read_u32::<LittleEndian>().map_err(truncated)?;
        let width = FloatWidth::from_bits(bits)
            .ok_or_else(|| format_err(path, format!("bad float width {bits}")))?;
        let count = file.read_u32::<LittleEndian>().map_err(truncated)? as usize;

        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut index = HashMap::new();
        let mut pos = 20u64;
        for _ in 0..count {
            let len = file.read_u32::<LittleEndian>().map_err(truncated)? as u64;
            if pos + 4 + len > file_len {
                return Err(format_err(path, "truncated index"));
            }
            let mut id = vec![0u8; len as usize];
            file.read_exact(&mut id).map_err(truncated)?;
            let id = String::from_utf8(id).map_err(|_| format_err(path, "id is not UTF-8"))?;
            let n = file.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let offset = file.read_u64::<LittleEndian>().map_err(truncated)?;
            pos += 4 + len + 4 + 8;
            if index.insert(id.clone(), IndexEntry { n, offset }).is_some() {
                return Err(format_err(path, format!("duplicate id {id:?}")));
            }
            ids.push(id);
        }
        let payload_start = pos;
        let payload_len = file_len - payload_start;
        for id in &ids {
            let e = &index[id];
            let size = (e.n as u64 + 1) * d_enc as u64 * width.bytes();
            if e.offset.checked_add(size).is_none_or(|end| end > payload_len) {
                return Err(format_err(
                    path,
                    format!("record {id:?} extends past end of file (truncated)"),
                ));
            }
        }
        Ok(CacheReader {
            path: path.to_path_buf(),
            d_enc,
            width,
            payload_start,
            ids,
            index,
        })
    }

    pub fn d_enc(&self) -> usize {
        self.d_enc
    }

    pub fn width(&self) -> FloatWidth {
        self.width
    }

    /// Record ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn read<T: Scalar>(&self, id: &str) -> Result<EncodedSentence<T>, EncoderError> {
        let entry = self
            .index
            .get(id)
            .ok_or_else(|| EncoderError::Lookup(id.to_string()))?;
        let mut file = File::open(&self.path).map_err(|e| io_err(&self.path, e))?;
        file.seek(SeekFrom::Start(self.payload_start + entry.offset))
            .map_err(|e| io_err(&self.path, e))?;
        let count = (entry.n + 1) * self.d_enc;
        let mut bytes = vec![0u8; count * self.width.bytes() as usize];
        file.read_exact(&mut bytes)
            .map_err(|_| format_err(&self.path, format!("record {id:?} is truncated")))?;
        let mut cursor = &bytes[..];
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let v = match self.width {
                FloatWidth::F32 => cursor.read_f32::<LittleEndian>().map(f64::from),
                FloatWidth::F64 => cursor.read_f64::<LittleEndian>(),
            }
            .expect("buffer sized to record");
            values.push(T::of(v));
        }
        let rows = values.split_off(self.d_enc);
        Ok(EncodedSentence {
            cls: values,
            word_states: Tensor::from_vec(vec![entry.n, self.d_enc], rows)
                .expect("record sized to n rows"),
            provenance: Provenance {
                provider: CACHE_PROVIDER.to_string(),
                seed: 0,
            },
        })
    }
}

/// One-shot lookup; prefer [`CacheReader`] for repeated reads.
pub fn cache_read<T: Scalar>(path: &Path, id: &str) -> Result<EncodedSentence<T>, EncoderError> {
    CacheReader::open(path)?.read(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::hashed_encode;
    use crate::preprocess::MaskedSentence;

    fn records() -> Vec<(String, EncodedSentence<f64>)> {
        ["a b c", "d e", "f g h i"]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let m = MaskedSentence {
                    tokens: s.split_whitespace().map(String::from).collect(),
                    subj_token: String::new(),
                    obj_token: String::new(),
                };
                (format!("ex{i}"), hashed_encode(&m, 5, 1))
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let recs = records();
        cache_write(&path, &recs, FloatWidth::F64).unwrap();
        let reader = CacheReader::open(&path).unwrap();
        assert_eq!(reader.len(), 3);
        for (id, enc) in &recs {
            let back: EncodedSentence<f64> = reader.read(id).unwrap();
            assert_eq!(back.cls, enc.cls);
            assert_eq!(back.word_states, enc.word_states);
        }
    }

    #[test]
    fn f32_storage_rounds_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let recs = records();
        cache_write(&path, &recs, FloatWidth::F32).unwrap();
        let back: EncodedSentence<f32> = cache_read(&path, "ex1").unwrap();
        let want: Vec<f32> = recs[1].1.cls.iter().map(|&v| v as f32).collect();
        assert_eq!(back.cls, want);
    }

    #[test]
    fn unknown_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        cache_write(&path, &records(), FloatWidth::F64).unwrap();
        assert!(matches!(
            cache_read::<f64>(&path, "nope"),
            Err(EncoderError::Lookup(_))
        ));
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        cache_write(&path, &records(), FloatWidth::F64).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 12]).unwrap();
        assert!(matches!(
            CacheReader::open(&cut),
            Err(EncoderError::Format { .. })
        ));

        std::fs::write(&cut, &bytes[..10]).unwrap();
        assert!(matches!(
            CacheReader::open(&cut),
            Err(EncoderError::Format { .. })
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&cut, &bad).unwrap();
        assert!(matches!(
            CacheReader::open(&cut),
            Err(EncoderError::Format { .. })
        ));
    }

    #[test]
    fn mixed_widths_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = records();
        recs[1].1.cls.push(0.0);
        recs[1].1.word_states = Tensor::zeros(&[2, 6]);
        assert!(matches!(
            cache_write(&dir.path().join("x"), &recs, FloatWidth::F64),
            Err(EncoderError::Contract(_))
        ));
    }
}
