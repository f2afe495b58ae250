//! Little-endian framing shared by the feature, index and head files.
//!
//! Layout: 4-byte magic, `u32` version, `u32` dim, `u64` count, then
//! `count` records of `u16` id length, UTF-8 id, `dim` floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, vs: &[f32]) -> std::io::Result<()> {
        for v in vs {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        for v in vs {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn id(&mut self, id: &str) -> std::io::Result<()> {
        let len = u16::try_from(id.len()).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "id longer than 65535 bytes")
        })?;
        self.u16(len)?;
        self.bytes(id.as_bytes())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<'a, R: Read> Reader<'a, R> {
    pub fn new(inner: R, path: &'a Path) -> Self {
        Self { inner, path }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.path, "unexpected end of file")
            } else {
                Error::io(self.path, e)
            }
        })
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        if &buf != expected {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16> {
        let mut buf = [0u8; 2];
        self.fill(&mut buf)?;
        Ok(u16::from_le_bytes(buf))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            self.fill(&mut buf)?;
            out.push(f32::from_le_bytes(buf));
        }
        Ok(out)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            self.fill(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    }

    pub fn id(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        self.fill(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::format(self.path, "record id is not UTF-8"))
    }

    /// Errors if any bytes remain.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(self.path, "trailing bytes after last record")),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }
}

/// Writes an id-keyed float32 record file.
pub(crate) fn write_records(
    path: &Path,
    magic: &[u8; 4],
    dim: usize,
    records: &[(&str, &[f32])],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer::new(BufWriter::new(file));
    let dim32 = u32::try_from(dim).map_err(|_| Error::format(path, "dimension overflows u32"))?;
    let io = |e| Error::io(path, e);
    w.bytes(magic).map_err(io)?;
    w.u32(FORMAT_VERSION).map_err(io)?;
    w.u32(dim32).map_err(io)?;
    w.u64(records.len() as u64).map_err(io)?;
    for (id, values) in records {
        if values.len() != dim {
            return Err(Error::FeatureDimMismatch {
                expected: dim,
                found: values.len(),
            });
        }
        w.id(id).map_err(io)?;
        w.f32s(values).map_err(io)?;
    }
    w.finish().map_err(io)?;
    Ok(())
}

/// Reads an id-keyed float32 record file, returning `(dim, records)` in file order.
pub(crate) fn read_records(path: &Path, magic: &[u8; 4]) -> Result<(usize, Vec<(String, Vec<f32>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(magic)?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let id = r.id()?;
        let values = r.f32s(dim)?;
        records.push((id, values));
    }
    r.expect_eof()?;
    Ok((dim, records))
}
