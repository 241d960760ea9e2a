//! Checkpoint layout: `XMICCKPT`, u32 version, u32 metadata length, JSON
//! [`ModelConfig`], u32 blob count, then per blob a u32 name length, the
//! UTF-8 name, a u64 byte length and little-endian f32 values. All integers
//! are little-endian.

use std::collections::HashMap;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::data::write_atomic;
use crate::error::{Result, XmicError};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"XMICCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&model.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let mut blobs = Vec::new();
    model.visit("", &mut |name, t| blobs.push((name, t.data().to_vec())));
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, data) in blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| XmicError::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(XmicError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(XmicError::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(meta_len)?)?;
    let mut model = Model::new(config)?;

    let count = r.u32()? as usize;
    let mut blobs: HashMap<String, Vec<f64>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| XmicError::Format("blob name is not UTF-8".into()))?
            .to_string();
        let bytes = usize::try_from(r.u64()?).map_err(|_| XmicError::Format("blob too large".into()))?;
        if bytes % 4 != 0 {
            return Err(XmicError::Format(format!("blob {name:?} has {bytes} bytes")));
        }
        let data = r
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if blobs.insert(name.clone(), data).is_some() {
            return Err(XmicError::Format(format!("blob {name:?} repeated")));
        }
    }
    if r.pos != buf.len() {
        return Err(XmicError::Format("trailing bytes after checkpoint".into()));
    }

    let mut err = None;
    model.visit_mut("", &mut |name, t| match blobs.remove(&name) {
        Some(data) if data.len() == t.len() => t.data_mut().copy_from_slice(&data),
        Some(data) => {
            err.get_or_insert(XmicError::Format(format!(
                "blob {name:?} has {} values, model expects {}",
                data.len(),
                t.len()
            )));
        }
        None => {
            err.get_or_insert(XmicError::Format(format!("checkpoint lacks {name:?}")));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = blobs.keys().min() {
        return Err(XmicError::Format(format!("unexpected blob {extra:?}")));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|e| XmicError::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Strategy;

    fn model() -> Model {
        Model::new(ModelConfig {
            dim: 16,
            strategy: "early-uni+xmic+tt".parse::<Strategy>().unwrap(),
            zero_init: false,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_rounds_to_f32() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..8], b"XMICCKPT");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        let mut a = Vec::new();
        m.visit("", &mut |_, t| a.extend(t.data().iter().map(|&v| f64::from(v as f32))));
        let mut b = Vec::new();
        back.visit("", &mut |_, t| b.extend_from_slice(t.data()));
        assert_eq!(a, b);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&model()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(decode_checkpoint(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
