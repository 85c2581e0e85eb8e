//! Binary PPM (P6) and PGM (P5) image files, maxval 255.
//!
//! Reading maps bytes to [0,1] by /255; writing quantizes with
//! round(clamp(v)·255), so write-then-read equals 8-bit quantization of the
//! input exactly. Parse errors carry the byte offset where the file stopped
//! making sense.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Parser<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Malformed {
            path: self.path.clone(),
            offset: self.pos,
            message: message.into(),
        })
    }

    /// Skip whitespace and `#` comment lines.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn ascii_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail(format!("expected {what} as a decimal integer"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits");
        text.parse()
            .map_err(|_| Error::Malformed {
                path: self.path.clone(),
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

fn read_netpbm<S: Scalar>(path: impl AsRef<Path>, magic: &[u8], channels: usize) -> Result<Tensor<S>> {
    let path_str = path.as_ref().display().to_string();
    let bytes = std::fs::read(&path)?;
    let mut p = Parser {
        bytes: &bytes,
        pos: 0,
        path: path_str,
    };
    if !p.bytes.starts_with(magic) {
        return p.fail(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        ));
    }
    p.pos = magic.len();
    let width = p.ascii_uint("width")?;
    let height = p.ascii_uint("height")?;
    let maxval = p.ascii_uint("maxval")?;
    if maxval != 255 {
        return p.fail(format!("only maxval 255 is supported, got {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if p.pos >= p.bytes.len() || !p.bytes[p.pos].is_ascii_whitespace() {
        return p.fail("expected a single whitespace byte before the pixel payload");
    }
    p.pos += 1;
    let expected = width * height * channels;
    let actual = p.bytes.len() - p.pos;
    if actual < expected {
        return p.fail(format!(
            "truncated payload: expected {expected} bytes, found {actual}"
        ));
    }
    let payload = &p.bytes[p.pos..p.pos + expected];
    // File order is interleaved (r,g,b per pixel); tensors are planar.
    let mut t = Tensor::zeros(channels, height, width);
    for (i, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            t.data_mut()[c * height * width + i] = S::from_f64(b as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Read a binary P6 PPM into a 3×H×W tensor scaled to [0,1].
pub fn ppm_read<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    read_netpbm(path, b"P6", 3)
}

/// Read a binary P5 PGM into a 1×H×W tensor scaled to [0,1].
pub fn pgm_read<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    read_netpbm(path, b"P5", 1)
}

#[inline]
fn quantize<S: Scalar>(v: S) -> u8 {
    (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>, magic: &str) -> Result<()> {
    let (c, h, w) = t.shape();
    let mut out = Vec::with_capacity(c * h * w + 32);
    out.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    for i in 0..h * w {
        for ch in 0..c {
            out.push(quantize(t.data()[ch * h * w + i]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a 3×H×W tensor as binary PPM, clamping to [0,1].
pub fn ppm_write<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    if t.channels() != 3 {
        return Err(Error::dim("ppm channels", 3, t.channels()));
    }
    write_netpbm(t, path, "P6")
}

/// Write a 1×H×W scalar field as binary PGM, clamping to [0,1].
pub fn pgm_write<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::dim("pgm channels", 1, t.channels()));
    }
    write_netpbm(t, path, "P5")
}
