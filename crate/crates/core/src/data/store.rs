//! Little-endian binary embedding store.
//!
//! ```text
//! "XMIC" | u32 version | u32 D | u32 record_count
//! per record: u32 id_len | id (UTF-8) | u32 F | u8 has_hand
//!             | F*D f32 full | F*D f32 hand (if has_hand)
//! ```

use std::path::Path;

use super::{write_atomic, ClipRecord, Embeddings};
use crate::error::{Result, XmicError};

pub const STORE_MAGIC: [u8; 4] = *b"XMIC";
pub const STORE_VERSION: u32 = 1;

pub fn encode_store(records: &[ClipRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, ClipRecord::dim);
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if r.dim() != dim {
            return Err(XmicError::DimMismatch(format!(
                "clip {} has D={} but the store uses D={dim}",
                r.id,
                r.dim()
            )));
        }
        r.validate()?;
        if !seen.insert(r.id.as_str()) {
            return Err(XmicError::Format(format!("duplicate clip id {:?}", r.id)));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.extend_from_slice(&(r.frames() as u32).to_le_bytes());
        out.push(u8::from(r.hand.is_some()));
        for v in r.full.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(h) = &r.hand {
            for v in h.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_store(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let bytes = encode_store(records)?;
    write_atomic(path, &bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            XmicError::Format(format!("truncated store at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| XmicError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_store(buf: &[u8]) -> Result<Vec<ClipRecord>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| XmicError::Format("missing magic bytes".into()))? != STORE_MAGIC {
        return Err(XmicError::Format("bad magic bytes, not an XMIC store".into()));
    }
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(XmicError::Format(format!("unsupported store version {version}")));
    }
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    if dim == 0 && count > 0 {
        return Err(XmicError::Format("store declares D=0".into()));
    }
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| XmicError::Format("clip id is not UTF-8".into()))?
            .to_string();
        let frames = r.u32()? as usize;
        if frames == 0 {
            return Err(XmicError::Format(format!("clip {id} has zero frames")));
        }
        let has_hand = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(XmicError::Format(format!("bad has_hand flag {b}"))),
        };
        let full = Embeddings::new(frames, dim, r.floats(frames * dim)?)?;
        let hand = if has_hand {
            Some(Embeddings::new(frames, dim, r.floats(frames * dim)?)?)
        } else {
            None
        };
        records.push(ClipRecord {
            id,
            full,
            hand,
            labels: None,
        });
    }
    if r.pos != buf.len() {
        return Err(XmicError::Format(format!(
            "{} trailing bytes after the last record",
            buf.len() - r.pos
        )));
    }
    Ok(records)
}

pub fn read_store(path: &Path) -> Result<Vec<ClipRecord>> {
    let buf = std::fs::read(path).map_err(|e| XmicError::io(path, e))?;
    decode_store(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(id: &str, frames: usize, dim: usize, hand: bool, seed: u32) -> ClipRecord {
        let vals = |k: u32| {
            (0..frames * dim)
                .map(|i| (i as f32 * 0.37 + k as f32).sin())
                .collect::<Vec<_>>()
        };
        ClipRecord {
            id: id.into(),
            full: Embeddings::new(frames, dim, vals(seed)).unwrap(),
            hand: hand.then(|| Embeddings::new(frames, dim, vals(seed + 7)).unwrap()),
            labels: None,
        }
    }

    #[test]
    fn roundtrip_three_clips() {
        let recs = vec![clip("a", 3, 4, true, 1), clip("b", 1, 4, false, 2), clip("ü", 5, 4, true, 3)];
        let back = decode_store(&encode_store(&recs).unwrap()).unwrap();
        assert_eq!(back, recs);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        write_store(&p, &recs).unwrap();
        assert_eq!(read_store(&p).unwrap(), recs);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_store(&[clip("a", 2, 2, false, 1)]).unwrap();
        bytes[0] = b'Y';
        assert!(matches!(decode_store(&bytes), Err(XmicError::Format(_))));
    }

    #[test]
    fn truncation_and_version_are_format_errors() {
        let bytes = encode_store(&[clip("a", 2, 2, true, 1)]).unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(decode_store(&bytes[..cut]), Err(XmicError::Format(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_store(&v2), Err(XmicError::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_store(&extra), Err(XmicError::Format(_))));
    }

    #[test]
    fn hand_with_other_frame_count_is_rejected_at_write() {
        let mut c = clip("a", 3, 4, false, 1);
        c.hand = Some(Embeddings::new(2, 4, vec![0.0; 8]).unwrap());
        assert!(matches!(encode_store(&[c]), Err(XmicError::DimMismatch(_))));
        let recs = vec![clip("a", 2, 4, false, 1), clip("b", 2, 3, false, 1)];
        assert!(matches!(encode_store(&recs), Err(XmicError::DimMismatch(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bit_patterns(
            bits in proptest::collection::vec(any::<u32>(), 1..64),
            dim in 1usize..5,
            hand in any::<bool>(),
        ) {
            let frames = bits.len().div_ceil(dim);
            let mut data: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).collect();
            data.resize(frames * dim, f32::from_bits(0x7fc0_0001));
            let rec = ClipRecord {
                id: "x".into(),
                full: Embeddings::new(frames, dim, data.clone()).unwrap(),
                hand: hand.then(|| Embeddings::new(frames, dim, data.iter().rev().cloned().collect()).unwrap()),
                labels: None,
            };
            let back = decode_store(&encode_store(std::slice::from_ref(&rec)).unwrap()).unwrap();
            let got: Vec<u32> = back[0].full.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back[0].hand.is_some(), hand);
        }
    }
}
