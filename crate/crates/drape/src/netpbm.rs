//! Binary netpbm codecs (P6 PPM for color, P5 PGM for grayscale).
//!
//! The value mapping is fixed: 8-bit channel c reads as 2*(c/255) - 1, and a
//! value v in [-1, 1] writes as round((v+1)/2 * 255) clamped to [0, 255].
//! Writers emit the canonical header `P6\n<w> <h>\n255\n`, so files written
//! here round-trip byte-for-byte.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_header(bytes: &[u8], path: &str) -> Result<(u8, usize, usize, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' || (bytes[1] != b'5' && bytes[1] != b'6') {
        return Err(Error::format(path, "not a binary PGM (P5) or PPM (P6) file"));
    }
    let kind = bytes[1];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed header: expected an integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(path, "malformed header: integer overflow"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "malformed header: missing separator before payload"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {} unsupported (need 255)", maxval)));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    Ok((kind, w, h, pos))
}

fn byte_to_value(c: u8) -> f64 {
    2.0 * (c as f64 / 255.0) - 1.0
}

fn value_to_byte(v: f64) -> u8 {
    let scaled = ((v + 1.0) / 2.0 * 255.0).round();
    scaled.clamp(0.0, 255.0) as u8
}

/// Reads a binary PPM (P6) into a [3,H,W] tensor or a binary PGM (P5) into
/// [1,H,W], with values mapped into [-1, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_image(&bytes, &path.display().to_string())
}

pub fn decode_image(bytes: &[u8], name: &str) -> Result<Tensor> {
    let (kind, w, h, payload) = parse_header(bytes, name)?;
    let channels = if kind == b'6' { 3 } else { 1 };
    let need = w * h * channels;
    let data = &bytes[payload..];
    if data.len() < need {
        return Err(Error::format(name, format!("truncated payload: need {} bytes, have {}", need, data.len())));
    }
    // interleaved RGB -> planar [c,h,w]
    let mut out = vec![0.0; need];
    for i in 0..w * h {
        for c in 0..channels {
            out[c * w * h + i] = byte_to_value(data[i * channels + c]);
        }
    }
    Tensor::new(vec![channels, h, w], out)
}

/// Writes a [3,H,W] tensor as binary PPM or a [1,H,W] / [H,W] tensor as
/// binary PGM with the canonical header.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_image(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (channels, h, w) = match image.shape() {
        [3, h, w] => (3usize, *h, *w),
        [1, h, w] => (1usize, *h, *w),
        [h, w] => (1usize, *h, *w),
        other => {
            return Err(Error::shape("write_image", format!("{:?} (need [3,H,W], [1,H,W] or [H,W])", other)))
        }
    };
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{}\n{} {}\n255\n", magic, w, h).into_bytes();
    let data = image.data();
    for i in 0..w * h {
        for c in 0..channels {
            out.push(value_to_byte(data[c * w * h + i]));
        }
    }
    Ok(out)
}
