//! `PFT1` checkpoints: magic, `u32` version, `u32` tensor count, then per
//! tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u32` dims and
//! the little-endian `f64` payload. All integers are little-endian.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFT1";
pub const VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut names: Vec<&str> = tensors.iter().map(|(n, _)| *n).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Checkpoint(format!("duplicate tensor name {}", w[0])));
    }
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "extent")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a PFT1 checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(numel.saturating_mul(8), "payload")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    std::fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(&[2], vec![1.0, -0.0]).unwrap();
        let bytes = encode([("ab", &t)]).unwrap();
        let mut expect = b"PFT1".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::full(&[2, 3], 0.5);
        let bytes = encode([("w", &t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[3] = b'2';
        assert!(decode(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode(&version).is_err());
        assert!(encode([("w", &t), ("w", &t)]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            entries in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..6,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = entries
                .iter()
                .enumerate()
                .map(|(i, (shape, bits))| {
                    let n: usize = shape.iter().product();
                    let data = (0..n as u64).map(|k| f64::from_bits(bits.wrapping_add(k.wrapping_mul(0x9e37_79b9)))).collect();
                    (format!("t{i}.é"), Tensor::new(shape, data).unwrap())
                })
                .collect();
            let bytes = encode(tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((na, a), (nb, b)) in tensors.iter().zip(&back) {
                prop_assert_eq!(na, nb);
                prop_assert!(a.bitwise_eq(b));
            }
            let again = encode(back.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            prop_assert_eq!(again, bytes);
        }
    }
}
