//! Little-endian binary containers shared by every artifact file, plus atomic
//! file replacement.

use std::io::Write;
use std::path::Path;

/// Version written by every container in this crate.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("unrecognized format: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },
    #[error("truncated at offset {offset}: needed {needed} more byte(s)")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension overflow at offset {offset}: {detail}")]
    DimensionOverflow { offset: usize, detail: String },
    #[error("invalid value at offset {offset}: {detail}")]
    InvalidValue { offset: usize, detail: String },
    #[error("{0} trailing byte(s) after payload")]
    TrailingBytes(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(magic);
        let mut w = ByteWriter { buf };
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn i8(&mut self, v: i8) {
        self.buf.push(v as u8);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn dim(&mut self, v: usize) -> Result<(), FormatError> {
        let v = u32::try_from(v).map_err(|_| FormatError::DimensionOverflow {
            offset: self.buf.len(),
            detail: format!("{v} does not fit in u32"),
        })?;
        self.u32(v);
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Checks magic and version, leaving the cursor on the first header field.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self, FormatError> {
        if buf.len() < 4 || &buf[..4] != magic {
            let found = String::from_utf8_lossy(&buf[..buf.len().min(4)]).into_owned();
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found,
            });
        }
        let mut r = ByteReader { buf, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { what, version });
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.buf.len(),
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.take(n)
    }

    pub fn bool(&mut self) -> Result<bool, FormatError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(FormatError::InvalidValue {
                offset: at,
                detail: format!("flag byte {v}"),
            }),
        }
    }

    /// Multiplies dimensions by an element size, failing before any allocation
    /// if the product overflows or exceeds the bytes that remain.
    pub fn checked_payload(&self, dims: &[usize], elem: usize) -> Result<usize, FormatError> {
        let total = dims
            .iter()
            .try_fold(elem, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::DimensionOverflow {
                offset: self.pos,
                detail: format!("{dims:?} x {elem} bytes overflows"),
            })?;
        let remaining = self.buf.len() - self.pos;
        if total > remaining {
            return Err(FormatError::Truncated {
                offset: self.buf.len(),
                needed: total - remaining,
            });
        }
        Ok(total)
    }

    pub fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip_and_errors() {
        let mut w = ByteWriter::new(b"TEST");
        w.u32(7);
        w.f64(-1.5);
        let bytes = w.finish();

        let mut r = ByteReader::open(&bytes, b"TEST", "test").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), -1.5);
        r.finish().unwrap();

        assert!(matches!(
            ByteReader::open(&bytes, b"NOPE", "test"),
            Err(FormatError::BadMagic { .. })
        ));
        let mut r = ByteReader::open(&bytes[..10], b"TEST", "test").unwrap();
        assert!(matches!(
            r.u32(),
            Err(FormatError::Truncated {
                offset: 10,
                needed: 2
            })
        ));
    }

    #[test]
    fn payload_overflow_is_detected() {
        let bytes = ByteWriter::new(b"TEST").finish();
        let r = ByteReader::open(&bytes, b"TEST", "test").unwrap();
        assert!(matches!(
            r.checked_payload(&[usize::MAX, 2], 8),
            Err(FormatError::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
