//! Little-endian binary encoding primitives shared by the backbone and
//! adapter file formats.
//!
//! Both formats follow the same framing: a 4-byte magic, a u16 format
//! version, a body, and a trailing CRC32 computed over the body (everything
//! between the version field and the checksum).

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("unsupported format version {got} (expected {expected})")]
    UnsupportedVersion { expected: u16, got: u16 },
    #[error("file truncated: needed {needed} more byte(s) at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Body writer; call [`Writer::finish`] to get magic + version + body + CRC.
pub struct Writer {
    magic: [u8; 4],
    version: u16,
    body: Vec<u8>,
}

impl Writer {
    pub fn new(magic: [u8; 4], version: u16) -> Self {
        Self {
            magic,
            version,
            body: Vec::new(),
        }
    }

    pub fn put_u16(&mut self, v: u16) {
        self.body.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.body.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.body.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_str(&mut self, s: &str) {
        let bytes = s.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "string too long for u16 length");
        self.put_u16(bytes.len() as u16);
        self.body.extend_from_slice(bytes);
    }

    /// Raw f32 payload, no shape header; the reader must know the length.
    pub fn put_f32_payload(&mut self, t: &Tensor) {
        self.body.reserve(t.numel() * 4);
        for &v in t.data() {
            self.body.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Self-describing record: name length, name bytes, rank, dims, payload.
    pub fn put_named_tensor(&mut self, name: &str, t: &Tensor) {
        self.put_str(name);
        self.body.push(t.rank() as u8);
        for &d in t.shape() {
            self.put_u32(d as u32);
        }
        self.put_f32_payload(t);
    }

    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + self.body.len() + 4);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&crc32fast::hash(&self.body).to_le_bytes());
        out
    }
}

/// Cursor over the body of a checked file.
#[derive(Debug)]
pub struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version, and the trailing CRC, returning a cursor
    /// over the body bytes.
    pub fn open(bytes: &'a [u8], magic: [u8; 4], version: u16) -> Result<Self, FormatError> {
        if bytes.len() < 4 + 2 + 4 {
            return Err(FormatError::Truncated {
                offset: bytes.len(),
                needed: 4 + 2 + 4 - bytes.len(),
            });
        }
        let got_magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if got_magic != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                got: got_magic,
            });
        }
        let got_version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if got_version != version {
            return Err(FormatError::UnsupportedVersion {
                expected: version,
                got: got_version,
            });
        }
        let body = &bytes[6..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::CrcMismatch { stored, computed });
        }
        Ok(Self { body, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.body.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.body.len(),
            });
        }
        let out = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn get_u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn get_u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_str(&mut self) -> Result<String, FormatError> {
        let len = self.get_u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| FormatError::Malformed(format!("invalid UTF-8 string: {e}")))
    }

    pub fn get_f32_payload(&mut self, shape: &[usize]) -> Result<Tensor, FormatError> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    /// Reads a named tensor record and checks the name matches `expect`.
    pub fn get_named_tensor(&mut self, expect: &str) -> Result<Tensor, FormatError> {
        let name = self.get_str()?;
        if name != expect {
            return Err(FormatError::Malformed(format!(
                "expected tensor '{expect}', found '{name}'"
            )));
        }
        let rank = self.get_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.get_u32()? as usize);
        }
        self.get_f32_payload(&shape)
    }

    pub fn expect_end(&self) -> Result<(), FormatError> {
        if self.pos != self.body.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing byte(s) after payload",
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Exact encoded size of a named tensor record.
pub fn named_tensor_size(name: &str, shape: &[usize]) -> usize {
    2 + name.len() + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_named_tensor() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut w = Writer::new(*b"TEST", 1);
        w.put_named_tensor("weights", &t);
        let bytes = w.finish();
        assert_eq!(bytes.len(), 4 + 2 + named_tensor_size("weights", &[2, 3]) + 4);

        let mut r = Reader::open(&bytes, *b"TEST", 1).unwrap();
        let back = r.get_named_tensor("weights").unwrap();
        r.expect_end().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let mut w = Writer::new(*b"TEST", 1);
        w.put_u32(42);
        let mut bytes = w.finish();
        bytes[7] ^= 0xFF;
        let err = Reader::open(&bytes, *b"TEST", 1).unwrap_err();
        assert!(matches!(err, FormatError::CrcMismatch { .. }));
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = Writer::new(*b"AAAA", 1).finish();
        let err = Reader::open(&bytes, *b"BBBB", 1).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { .. }));
    }

    #[test]
    fn wrong_version_rejected() {
        let bytes = Writer::new(*b"TEST", 2).finish();
        let err = Reader::open(&bytes, *b"TEST", 1).unwrap_err();
        assert!(matches!(err, FormatError::UnsupportedVersion { .. }));
    }

    #[test]
    fn truncation_detected() {
        let mut w = Writer::new(*b"TEST", 1);
        w.put_u32(7);
        let bytes = w.finish();
        let err = Reader::open(&bytes[..bytes.len() - 5], *b"TEST", 1).unwrap_err();
        // Chopping the tail corrupts the CRC frame one way or another.
        assert!(matches!(
            err,
            FormatError::CrcMismatch { .. } | FormatError::Truncated { .. }
        ));
    }
}
