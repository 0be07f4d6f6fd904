//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PLLM" | version u32 | config_len u32 | config JSON | step_count u64
//! | tensor_count u32 | tensors...
//! [ "HEAD" | kind_len u32 | kind | meta_len u32 | meta JSON
//!   | tensor_count u32 | tensors... ]
//! tensor := name_len u32 | name | rank u32 | dims u32 * rank | f32 * prod(dims)
//! ```
//!
//! The optional head section carries a fine-tuned classifier.

use std::fs;
use std::path::Path;

use super::{EncoderState, TransformerConfig};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLLM";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEAD_MAGIC: &[u8; 4] = b"HEAD";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A classifier stored after the encoder tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSection {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(out, name);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            message: format!("{what} is not UTF-8"),
        })
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let name = self.string("tensor name")?;
        let rank = self.u32("tensor rank")? as usize;
        if rank > 4 {
            return Err(self.err(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(NamedTensor { name, shape, data })
    }
}

impl EncoderState {
    pub fn to_bytes(&self, head: Option<&HeadSection>) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.params.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &serde_json::to_string(&self.config).expect("config serialises"));
        out.extend_from_slice(&self.step_count.to_le_bytes());
        put_u32(&mut out, self.layout.specs().len() as u32);
        for spec in self.layout.specs() {
            put_tensor(&mut out, &spec.name, &spec.shape, &self.params[spec.range()]);
        }
        if let Some(head) = head {
            out.extend_from_slice(HEAD_MAGIC);
            put_str(&mut out, &head.kind);
            put_str(&mut out, &head.metadata.to_string());
            put_u32(&mut out, head.tensors.len() as u32);
            for t in &head.tensors {
                put_tensor(&mut out, &t.name, &t.shape, &t.data);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<HeadSection>)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let config_at = r.pos;
        let config: TransformerConfig = serde_json::from_str(&r.string("config")?).map_err(|e| Error::Format {
            offset: config_at as u64,
            message: format!("bad config: {e}"),
        })?;
        config.validate().map_err(|e| Error::Format {
            offset: config_at as u64,
            message: e.to_string(),
        })?;
        let step_count = r.u64("step count")?;
        let layout = super::Layout::new(&config);
        let count_at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != layout.specs().len() {
            return Err(Error::Format {
                offset: count_at as u64,
                message: format!("expected {} tensors, found {count}", layout.specs().len()),
            });
        }
        let mut params = Vec::with_capacity(layout.total());
        for spec in layout.specs() {
            let at = r.pos;
            let t = r.tensor()?;
            if t.name != spec.name || t.shape != spec.shape {
                return Err(Error::Format {
                    offset: at as u64,
                    message: format!("expected tensor {} {:?}, found {} {:?}", spec.name, spec.shape, t.name, t.shape),
                });
            }
            params.extend(t.data);
        }
        let head = if r.pos == bytes.len() {
            None
        } else {
            if r.take(4, "head magic")? != HEAD_MAGIC {
                return Err(Error::Format {
                    offset: (r.pos - 4) as u64,
                    message: "trailing bytes are not a head section".into(),
                });
            }
            let kind = r.string("head kind")?;
            let meta_at = r.pos;
            let metadata = serde_json::from_str(&r.string("head metadata")?).map_err(|e| Error::Format {
                offset: meta_at as u64,
                message: format!("bad head metadata: {e}"),
            })?;
            let n = r.u32("head tensor count")? as usize;
            let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            if r.pos != bytes.len() {
                return Err(r.err("trailing bytes after head section"));
            }
            Some(HeadSection {
                kind,
                metadata,
                tensors,
            })
        };
        let state = EncoderState::from_parts(config, params, step_count)?;
        Ok((state, head))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes(None))
    }

    pub fn save_with_head(&self, path: impl AsRef<Path>, head: &HeadSection) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes(Some(head)))
    }

    /// Load the encoder, ignoring any head section.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::load_with_head(path)?.0)
    }

    pub fn load_with_head(path: impl AsRef<Path>) -> Result<(Self, Option<HeadSection>)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::{CLS, SEP};

    fn state() -> EncoderState {
        EncoderState::new(TransformerConfig::tiny(30)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = state();
        let bytes = s.to_bytes(None);
        let (back, head) = EncoderState::from_bytes(&bytes).unwrap();
        assert!(head.is_none());
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(None), bytes);
        let ids = [CLS, 6, 7, SEP];
        assert_eq!(s.forward(&ids, 4, None).unwrap(), back.forward(&ids, 4, None).unwrap());
    }

    #[test]
    fn head_section_round_trip() {
        let s = state();
        let head = HeadSection {
            kind: "pos".into(),
            metadata: serde_json::json!({"tags": ["NOUN", "VERB"]}),
            tensors: vec![NamedTensor {
                name: "head.weight".into(),
                shape: vec![2, 2],
                data: vec![0.5, -1.0, 2.0, 0.25],
            }],
        };
        let bytes = s.to_bytes(Some(&head));
        let (back, h) = EncoderState::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(h.unwrap(), head);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let bytes = state().to_bytes(None);
        let err = EncoderState::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EncoderState::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(EncoderState::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    }
}
