//! Image input for the CLI: raw f32 tensor files with a small dimension
//! header, plus a binary PGM (P5) reader for convenience.
//!
//! Raw layout, little-endian: u32 channels, u32 height, u32 width, then
//! `channels·height·width` f32 values in channel-major row-major order.

use anyhow::{bail, Context, Result};
use std::path::Path;
use vitlora_core::Tensor;

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"P5") {
        read_pgm(&bytes)
    } else {
        read_raw(&bytes)
    }
}

pub fn write_raw(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 {
        bail!("raw image tensors must be channels×height×width, got {shape:?}");
    }
    let mut out = Vec::with_capacity(12 + image.numel() * 4);
    for &dim in shape {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_raw(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        bail!("raw image file too short for its dimension header");
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = 12 + c * h * w * 4;
    if bytes.len() != expected {
        bail!(
            "raw image payload is {} bytes, expected {} for {c}×{h}×{w}",
            bytes.len() - 12,
            expected - 12
        );
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&[c, h, w], data)?)
}

/// Binary PGM: single channel, values scaled to [0, 1].
fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 2; // past "P5"
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            bail!("malformed PGM header");
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])?.parse()?;
        fields.push(v);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        bail!("only 8-bit PGM supported (maxval {maxval})");
    }
    let pixels = &bytes[pos..];
    if pixels.len() != w * h {
        bail!("PGM payload is {} bytes, expected {}", pixels.len(), w * h);
    }
    let data: Vec<f32> = pixels.iter().map(|&p| f32::from(p) / maxval as f32).collect();
    Ok(Tensor::new(&[1, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip() {
        let t = Tensor::new(&[1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.raw");
        write_raw(&path, &t).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn pgm_parsing() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        std::fs::write(&path, &bytes).unwrap();
        let t = read_image(&path).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn truncated_raw_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.raw");
        std::fs::write(&path, [1, 0, 0, 0]).unwrap();
        assert!(read_image(&path).is_err());
    }
}
