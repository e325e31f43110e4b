//! Binary PPM (P6, maxval 255) images.

use std::path::Path;

use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// `[-1, 1]` to `0..=255`: clamp, shift, scale, round half away from zero.
pub fn to_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 0.5 * 255.0).round() as u8
}

/// Encode a `[3, h, w]` image.
pub fn encode<F: Real>(image: &Tensor<F>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("ppm_encode", format!("expected [3, h, w], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + i].as_f64()));
        }
    }
    Ok(out)
}

pub fn write<F: Real>(path: &Path, image: &Tensor<F>) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

/// Decode a P6 file with maxval 255 back to `[3, h, w]` values in `[-1, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Corrupt(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if pixels.len() != 3 * w * h {
        return Err(bad("pixel data has the wrong length"));
    }
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}
