use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_SIGNATURE: &[u8] = b"\x89PNG";

/// Reads a binary PPM (or, with the `png` feature, a PNG) into a `3×H×W`
/// tensor with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes)
    } else {
        Err(Error::data("unsupported image format (expected binary PPM P6 or PNG)"))
    };
    img.map_err(|e| e.at_path(path))
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("PNG decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(planar_from_interleaved(img.as_raw(), h as usize, w as usize))
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> Result<Tensor<f32>> {
    Err(Error::data("PNG input requires building with the `png` feature"))
}

fn planar_from_interleaved(rgb: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized above")
}

/// Splits the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::data("truncated PPM header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data(format!("invalid PPM {what}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::data("not a binary PPM (P6) file"));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::data(format!("PPM maxval {maxval} unsupported (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::data("PPM has zero size"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 3 * w * h;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::data(format!("truncated PPM raster: expected {need} bytes, found {}", bytes.len().saturating_sub(pos)))
    })?;
    Ok(planar_from_interleaved(raster, h, w))
}

/// Quantizes a `3×H×W` tensor to 8 bits (round to nearest, clamped).
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape(format!("PPM output needs a 3×H×W image, got {:?}", img.shape())));
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = img.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ppm(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
