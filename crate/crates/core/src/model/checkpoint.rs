use std::fs;
use std::path::Path;

use super::params::Ablation;
use crate::error::{KktError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"KKTC";
pub const VERSION: u32 = 1;

/// Serializes every tensor of `store` as fp32, in insertion order.
///
/// Layout: `KKTC`, version u32, ablation tag u8, tensor count u32, then per
/// tensor a u16-prefixed UTF-8 name, rank u8, u32 dims and the little-endian
/// fp32 payload. All integers are little-endian.
pub fn to_bytes(ablation: Ablation, store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * store.total_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(ablation.tag());
    out.extend_from_slice(&u32::try_from(store.len()).map_err(too_big)?.to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len()).map_err(too_big)?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(too_big)?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn too_big<E>(_: E) -> KktError {
    KktError::Checkpoint("value does not fit its header field".into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| KktError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(Ablation, ParamStore)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(KktError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(KktError::Checkpoint(format!("unsupported version {version}")));
    }
    let ablation = Ablation::from_tag(r.u8()?)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| KktError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        if store.find(&name).is_some() {
            return Err(KktError::Checkpoint(format!("duplicate tensor {name}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| KktError::Checkpoint(format!("{name}: shape overflows")))?;
        let bytes = r.take(
            n.checked_mul(4)
                .ok_or_else(|| KktError::Checkpoint(format!("{name}: too large")))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| KktError::Checkpoint(format!("{name}: {e}")))?;
        store.add(name, t);
    }
    if r.pos != buf.len() {
        return Err(KktError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((ablation, store))
}

pub fn write_checkpoint(path: &Path, ablation: Ablation, store: &ParamStore) -> Result<()> {
    fs::write(path, to_bytes(ablation, store)?).map_err(|e| KktError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(Ablation, ParamStore)> {
    let buf = fs::read(path).map_err(|e| KktError::io(path, e))?;
    from_bytes(&buf)
}
