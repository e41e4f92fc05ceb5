//! Named-tensor weight files.
//!
//! ```text
//! "TMWT0001" | header_len: u64 LE | header (UTF-8) | payload (f32 LE)
//! ```
//!
//! The header has one line per tensor, `name<TAB>f32<TAB>d0,d1,..<TAB>byte_offset`,
//! in payload order. Offsets start at zero, ascend without gaps or overlap,
//! and the last tensor ends exactly at the end of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TMWT0001";

/// Serializes tensors in the given order.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut header = String::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        header.push_str(&format!("{}\tf32\t{}\t{}\n", name, dims.join(","), payload.len()));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_header(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::Header(format!("line {}: {} in `{}`", i + 1, why, line));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, shape, offset] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        if dtype != "f32" {
            return Err(bad("unsupported dtype"));
        }
        let shape = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad("bad shape")))
                .collect::<Result<Vec<_>>>()?
        };
        let offset = offset.parse::<usize>().map_err(|_| bad("bad offset"))?;
        entries.push(Entry {
            name: name.to_string(),
            shape,
            offset,
        });
    }
    Ok(entries)
}

/// Parses and validates a weight file image into named tensors.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated(format!("{} bytes is shorter than the magic", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..8].to_vec(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes runs past end of file")))?
        as usize;
    let text = std::str::from_utf8(&bytes[16..header_end]).map_err(|e| Error::Header(format!("not UTF-8: {e}")))?;
    let entries = parse_header(text)?;
    let payload = &bytes[header_end..];

    let mut seen = std::collections::HashSet::new();
    let mut expected_offset = 0usize;
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Header(format!("tensor `{}` declared twice", e.name)));
        }
        if e.offset < expected_offset {
            return Err(Error::Layout(format!(
                "tensor `{}` at offset {} overlaps data ending at {}",
                e.name, e.offset, expected_offset
            )));
        }
        if e.offset > expected_offset {
            return Err(Error::Layout(format!(
                "gap before tensor `{}`: offset {} but previous data ends at {}",
                e.name, e.offset, expected_offset
            )));
        }
        let bytes_len = e
            .shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Header(format!("tensor `{}` shape overflows", e.name)))?;
        expected_offset += bytes_len;
    }
    if payload.len() < expected_offset {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            expected_offset
        )));
    }
    if payload.len() > expected_offset {
        return Err(Error::Layout(format!(
            "{} trailing payload bytes not covered by any tensor",
            payload.len() - expected_offset
        )));
    }

    entries
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok((e.name, Tensor::new(e.shape, data)?))
        })
        .collect()
}

/// Writes `bytes` next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let named = weights.tensors();
    let bytes = encode_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)));
    write_atomic(path.as_ref(), &bytes)
}

/// Reads a weight file and checks it against `cfg`.
pub fn load_weights(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let named: BTreeMap<String, Tensor> = decode_tensors(&bytes)?.into_iter().collect();
    ModelWeights::from_named(cfg, named)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.5, f32::MIN_POSITIVE]]);
        let b = Tensor::vector(vec![0.25]);
        encode_tensors([("a", &a), ("b", &b)])
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample();
        assert_eq!(&bytes[..8], b"TMWT0001");
        let header = "a\tf32\t2,2\t0\nb\tf32\t1\t16\n";
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), header.len() as u64);
        assert_eq!(&bytes[16..16 + header.len()], header.as_bytes());
        assert_eq!(&bytes[16 + header.len()..16 + header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + header.len() + 20);
    }

    #[test]
    fn decode_inverts_encode() {
        let got = decode_tensors(&sample()).unwrap();
        assert_eq!(got[0].0, "a");
        assert_eq!(got[0].1.data()[3].to_bits(), f32::MIN_POSITIVE.to_bits());
        assert_eq!(got[1].1.shape(), &[1]);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = sample();
        bytes[0] = b'X';
        assert!(matches!(decode_tensors(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_and_header() {
        let bytes = sample();
        assert!(matches!(decode_tensors(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode_tensors(&bytes[..20]), Err(Error::Truncated(_))));
        assert!(matches!(decode_tensors(&bytes[..5]), Err(Error::Truncated(_))));
    }

    fn with_header(header: &str, payload_len: usize) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend(std::iter::repeat_n(0u8, payload_len));
        out
    }

    #[test]
    fn overlapping_or_gapped_offsets() {
        let overlap = with_header("a\tf32\t2\t0\nb\tf32\t2\t4\n", 16);
        assert!(matches!(decode_tensors(&overlap), Err(Error::Layout(m)) if m.contains("overlaps")));
        let gap = with_header("a\tf32\t1\t0\nb\tf32\t1\t8\n", 12);
        assert!(matches!(decode_tensors(&gap), Err(Error::Layout(_))));
        let trailing = with_header("a\tf32\t1\t0\n", 8);
        assert!(matches!(decode_tensors(&trailing), Err(Error::Layout(_))));
    }

    #[test]
    fn malformed_header_lines() {
        assert!(matches!(decode_tensors(&with_header("a\tf16\t1\t0\n", 4)), Err(Error::Header(_))));
        assert!(matches!(decode_tensors(&with_header("a\tf32\t1\n", 4)), Err(Error::Header(_))));
        assert!(matches!(decode_tensors(&with_header("a\tf32\t1\t0\na\tf32\t1\t4\n", 8)), Err(Error::Header(_))));
    }
}
