//! Binary trace format (little-endian throughout):
//!
//! ```text
//! "VLCT" | version u32 = 1
//! num_layers num_query_heads num_kv_heads head_dim prompt_len post_vision_len decode_len : u32
//! seed : u64
//! (start, len) u32 pairs for pre-vision, vision, post-vision
//! per layer: Q [H, m + n_dec, d] f32, then K [H_kv, m + n_dec, d] f32
//! ```
//!
//! A JSON sidecar with the same basename mirrors header and layout. The
//! binary file is authoritative; the sidecar is never read back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{AttentionTrace, LayerTensors, ModalityLayout, Segment, Tensor3, TraceHeader};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: [u8; 4] = *b"VLCT";
pub const TRACE_VERSION: u32 = 1;

const PREFIX_LEN: usize = 4 + 4 + 7 * 4 + 8 + 6 * 4;

#[derive(Serialize)]
struct Sidecar<'a> {
    format: &'static str,
    version: u32,
    header: &'a TraceHeader,
    layout: &'a ModalityLayout,
    payload_bytes: u64,
}

/// Path of the JSON sidecar written next to `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn to_u32(field: &'static str, value: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::spec(field, format!("{value} does not fit in u32")))
}

fn expected_len(header: &TraceHeader) -> u64 {
    let per_pos = (header.num_query_heads + header.num_kv_heads) as u64 * header.head_dim as u64;
    PREFIX_LEN as u64 + header.num_layers as u64 * per_pos * header.seq_len() as u64 * 4
}

pub fn encode_trace(trace: &AttentionTrace) -> Result<Vec<u8>> {
    let h = trace.header();
    let l = trace.layout();
    let mut out = Vec::with_capacity(expected_len(h) as usize);
    out.extend_from_slice(&TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    let fields = [
        ("num_layers", h.num_layers),
        ("num_query_heads", h.num_query_heads),
        ("num_kv_heads", h.num_kv_heads),
        ("head_dim", h.head_dim),
        ("prompt_len", h.prompt_len),
        ("post_vision_len", h.post_vision_len),
        ("decode_len", h.decode_len),
    ];
    for (name, v) in fields {
        out.extend_from_slice(&to_u32(name, v)?.to_le_bytes());
    }
    out.extend_from_slice(&h.seed.to_le_bytes());
    for seg in [l.pre_vision, l.vision, l.post_vision] {
        out.extend_from_slice(&to_u32("layout", seg.start)?.to_le_bytes());
        out.extend_from_slice(&to_u32("layout", seg.len)?.to_le_bytes());
    }
    for layer in trace.layers() {
        for t in [&layer.queries, &layer.keys] {
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn u64(&mut self) -> u64 {
        let v = u64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        v
    }

    fn tensor(&mut self, shape: [usize; 3]) -> Result<Tensor3> {
        let n: usize = shape.iter().product();
        let data = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 4 * n;
        Tensor3::new(shape, data)
    }
}

pub fn decode_trace(bytes: &[u8]) -> Result<AttentionTrace> {
    let actual = bytes.len() as u64;
    if bytes.len() >= 4 && bytes[..4] != TRACE_MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Truncated {
            expected: PREFIX_LEN as u64,
            actual,
        });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32();
    if version != TRACE_VERSION {
        return Err(Error::UnsupportedVersion { found: version });
    }
    let mut next = || cur.u32() as usize;
    let header = TraceHeader {
        num_layers: next(),
        num_query_heads: next(),
        num_kv_heads: next(),
        head_dim: next(),
        prompt_len: next(),
        post_vision_len: next(),
        decode_len: next(),
        seed: 0,
    };
    let header = TraceHeader {
        seed: cur.u64(),
        ..header
    };
    let mut segment = || Segment::new(cur.u32() as usize, cur.u32() as usize);
    let layout = ModalityLayout {
        pre_vision: segment(),
        vision: segment(),
        post_vision: segment(),
    };
    header.validate()?;
    layout.validate(&header)?;

    let expected = expected_len(&header);
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingBytes { expected, actual });
    }

    let s = header.seq_len();
    let q_shape = [header.num_query_heads, s, header.head_dim];
    let k_shape = [header.num_kv_heads, s, header.head_dim];
    let mut layers = Vec::with_capacity(header.num_layers);
    for _ in 0..header.num_layers {
        let queries = cur.tensor(q_shape)?;
        let keys = cur.tensor(k_shape)?;
        layers.push(LayerTensors { queries, keys });
    }
    AttentionTrace::new(header, layout, layers)
}

/// Writes the binary trace to `path` and its JSON sidecar next to it.
pub fn write_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_trace(trace)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        format: "VLCT",
        version: TRACE_VERSION,
        header: trace.header(),
        layout: trace.layout(),
        payload_bytes: bytes.len() as u64,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&sidecar)?;
    fs::write(&side, json).map_err(|e| Error::io(side, e))?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trace(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_trace, GenSpec};

    fn small() -> AttentionTrace {
        generate_trace(&GenSpec {
            num_layers: 2,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            prompt_len: 64,
            post_vision_len: 8,
            decode_len: 4,
            seed: 7,
            ..GenSpec::default()
        })
        .unwrap()
        .trace
    }

    #[test]
    fn round_trip_is_identity() {
        let t = small();
        let bytes = encode_trace(&t).unwrap();
        assert_eq!(bytes.len() as u64, expected_len(t.header()));
        assert_eq!(decode_trace(&bytes).unwrap(), t);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode_trace(&small()).unwrap();
        bytes[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode_trace(&bytes), Err(Error::BadMagic { found }) if &found == b"NOPE"));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode_trace(&small()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_trace(&bytes), Err(Error::UnsupportedVersion { found: 2 })));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let bytes = encode_trace(&small()).unwrap();
        let full = bytes.len() as u64;
        let cut = &bytes[..bytes.len() - 100];
        match decode_trace(cut) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 100);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_trace(&bytes[..20]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_trace(&small()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_trace(&bytes), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut bytes = encode_trace(&small()).unwrap();
        bytes[PREFIX_LEN..PREFIX_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_trace(&bytes),
            Err(Error::NonFinite { layer: 0, tensor: "query", index: 0 })
        ));
    }

    #[test]
    fn sidecar_mirrors_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vlct");
        let t = small();
        write_trace(&t, &path).unwrap();
        let side: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("t.json")).unwrap()).unwrap();
        assert_eq!(side["format"], "VLCT");
        assert_eq!(side["header"]["prompt_len"], 64);
        assert_eq!(side["layout"]["post_vision"]["len"], 8);
        assert_eq!(read_trace(&path).unwrap(), t);
    }
}
