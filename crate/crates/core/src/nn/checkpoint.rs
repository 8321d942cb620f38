//! Binary parameter checkpoints and their JSON sidecars.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "AFCKPT1" | entry count | { name length | name bytes (UTF-8) | rank | extents... | f64 values... }*
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"AFCKPT1";
pub const SIDECAR_VERSION: u32 = 1;
const MAX_RANK: u64 = 8;
const MAX_NAME: u64 = 4096;

pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes a checkpoint. Never panics on malformed input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let count = r.u64("entry count")?;
    // Each entry takes at least 24 bytes, which bounds hostile counts.
    if count > (r.remaining() / 24) as u64 {
        return Err(Error::format(format!("entry count {count} exceeds file size")));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u64("name length")?;
        if name_len > MAX_NAME {
            return Err(Error::format(format!("entry {i}: name length {name_len} too large")));
        }
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| Error::format(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u64("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!("entry {name:?}: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut n: usize = 1;
        for _ in 0..rank {
            let e = r.u64("extent")?;
            let e = usize::try_from(e).ok().filter(|&e| e > 0).ok_or_else(|| {
                Error::format(format!("entry {name:?}: invalid extent {e}"))
            })?;
            n = n
                .checked_mul(e)
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::format(format!("entry {name:?}: extents exceed file size")))?;
            shape.push(e);
        }
        let raw = r.take(n * 8, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("entry {name:?}: non-finite value")));
        }
        if entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return Err(Error::format(format!("duplicate entry {name:?}")));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", r.remaining())));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Where the deterministic random streams had got to when a checkpoint was
/// written. Streams are derived per iteration, so the seed and the next
/// iteration index fully determine the continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    /// `"field"` or `"tpm"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub rng: RngState,
    pub optimizer: Option<crate::nn::optim::AdamConfig>,
    pub optimizer_step: u64,
}

impl Sidecar {
    pub fn check(&self, kind: &str) -> Result<()> {
        if self.format != "AFCKPT1" || self.version != SIDECAR_VERSION {
            return Err(Error::Version(format!(
                "unsupported checkpoint {} version {}",
                self.format, self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Version(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

/// The sidecar sits next to the checkpoint with a `.json` extension.
pub fn sidecar_path(ckpt: &Path) -> std::path::PathBuf {
    ckpt.with_extension("json")
}

pub fn write_sidecar(ckpt: &Path, sidecar: &Sidecar) -> Result<()> {
    let mut s = serde_json::to_string_pretty(sidecar)?;
    s.push('\n');
    fs::write(sidecar_path(ckpt), s)?;
    Ok(())
}

pub fn read_sidecar(ckpt: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(sidecar_path(ckpt))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("sidecar: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("tpm.a".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 0.0]).unwrap()),
            ("tpm.b".into(), Tensor::new(vec![3], vec![1e-300, -0.0, 7.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let e = sample();
        let bytes = encode_checkpoint(&e);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in e.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_checkpoint(&nan).is_err());
        let mut huge = bytes;
        huge[7..15].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
        assert!(decode_checkpoint(b"").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_checkpoint(&data);
            let mut prefixed = MAGIC.to_vec();
            prefixed.extend_from_slice(&data);
            let _ = decode_checkpoint(&prefixed);
        }

        #[test]
        fn random_tensors_round_trip(rows in 1usize..4, cols in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols).map(|i| ((seed as f64) * 1e-10 + i as f64).sin()).collect();
            let e = vec![("w".to_string(), Tensor::matrix(rows, cols, data).unwrap())];
            prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&e)).unwrap(), e);
        }
    }
}
