//! Little-endian framing shared by the binary file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Reader that tracks its byte offset so parse errors can point at the
/// exact position.
pub(crate) struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    /// Fails unless the stream is exhausted; loaders call this so stray
    /// trailing bytes surface as a parse error instead of silence.
    pub fn expect_eof(&mut self, what: &str) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Parse {
                offset: self.offset,
                message: format!("trailing bytes after {what}"),
            }),
            Err(e) => Err(Error::Io {
                source: e,
                path: None,
            }),
        }
    }

    pub fn bytes_array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: self.offset,
            message: "unexpected end of file".into(),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes_array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes_array::<4>()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes_array::<8>()?))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes_array::<16>()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes_array::<8>()?))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.offset;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: at,
            message: "unexpected end of file in string".into(),
        })?;
        self.offset += len as u64;
        String::from_utf8(buf).map_err(|_| Error::Parse {
            offset: at,
            message: "string is not valid utf-8".into(),
        })
    }

    /// Exact little-endian magic; mismatch is a format error.
    pub fn expect_magic(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        let got = self.bytes_array::<4>()?;
        if &got != magic {
            return Err(Error::Format(format!("not a {what} file (bad magic)")));
        }
        Ok(())
    }
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// FNV-1a over bytes; the provenance fingerprint stamped into checkpoints
/// and eval summaries.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}
