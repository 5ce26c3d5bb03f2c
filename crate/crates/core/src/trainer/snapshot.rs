//! Binary snapshot container. Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "NSWSNAP\0"
//! version    u32       1
//! endianness u32       0x0A0B0C0D
//! entries    u64
//! entry*     name_len u32, name (UTF-8), kind u8, count u64, payload
//! ```
//!
//! `kind` is 1 for f64 (IEEE-754 bits), 2 for u64 and 3 for raw bytes;
//! `count` is the element count. Entries keep their insertion order, so a
//! load followed by a save reproduces the file byte for byte.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NSWSNAP\0";
pub const VERSION: u32 = 1;
pub const ENDIAN_MARK: u32 = 0x0A0B_0C0D;

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Blob {
    fn kind(&self) -> u8 {
        match self {
            Blob::F64(_) => 1,
            Blob::U64(_) => 2,
            Blob::Bytes(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Snapshot {
    entries: Vec<(String, Blob)>,
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
            .ok_or_else(|| Error::Input(format!("snapshot truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Blob)] {
        &self.entries
    }

    /// Adds an entry; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, blob: Blob) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Usage(format!("snapshot entry `{name}` written twice")));
        }
        self.entries.push((name, blob));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.entries.iter().find(|e| e.0 == name).map(|e| &e.1)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Blob::F64(v)) => Ok(v),
            _ => Err(Error::Incompatible(format!("snapshot lacks f64 entry `{name}`"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Blob::U64(v)) => Ok(v),
            _ => Err(Error::Incompatible(format!("snapshot lacks u64 entry `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Blob::Bytes(v)) => Ok(v),
            _ => Err(Error::Incompatible(format!("snapshot lacks byte entry `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, blob) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(blob.kind());
            match blob {
                Blob::F64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes()));
                }
                Blob::U64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Blob::Bytes(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    out.extend_from_slice(v);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Input("not a snapshot file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Incompatible(format!("snapshot version {version}, expected {VERSION}")));
        }
        if r.u32("endianness marker")? != ENDIAN_MARK {
            return Err(Error::Input("snapshot endianness marker mismatch".into()));
        }
        let count = r.u64("entry count")?;
        let mut snap = Snapshot::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Input(format!("snapshot entry {i} has a non-UTF-8 name")))?
                .to_string();
            let kind = r.take(1, "kind")?[0];
            let n = usize::try_from(r.u64("element count")?).map_err(|_| Error::Input(format!("entry `{name}` is too large")))?;
            let width = if kind == 3 { 1 } else { 8 };
            let payload = r.take(n.saturating_mul(width), &name)?;
            let words = || payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")));
            let blob = match kind {
                1 => Blob::F64(words().map(f64::from_bits).collect()),
                2 => Blob::U64(words().collect()),
                3 => Blob::Bytes(payload.to_vec()),
                k => return Err(Error::Input(format!("entry `{name}` has unknown kind {k}"))),
            };
            snap.push(name, blob).map_err(|e| Error::Input(e.to_string()))?;
        }
        if r.pos != buf.len() {
            return Err(Error::Input(format!("{} trailing bytes after snapshot", buf.len() - r.pos)));
        }
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Snapshot {
        let mut s = Snapshot::new();
        s.push("meta/epoch", Blob::U64(vec![3])).unwrap();
        s.push("param/w", Blob::F64(vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300])).unwrap();
        s.push("meta/config", Blob::Bytes(b"seed = 1\n".to_vec())).unwrap();
        s.push("empty", Blob::F64(vec![])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Snapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(back.f64s("param/w").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Snapshot::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Snapshot::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Snapshot::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Snapshot::from_bytes(&v2), Err(Error::Incompatible(_))));
        assert!(sample().push("meta/epoch", Blob::U64(vec![])).is_err());
    }
}
