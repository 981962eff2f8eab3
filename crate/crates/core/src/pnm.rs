//! Binary PGM (P5) and PPM (P6) files with maxval 255.
//!
//! Samples are mapped to `[0, 1]` on load and quantized back with rounding on
//! save.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imagecore::MultibandImage;

pub fn decode(bytes: &[u8]) -> Result<MultibandImage> {
    let bands = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(magic) => {
            return Err(Error::UnsupportedFormat(format!(
                "expected binary PGM (P5) or PPM (P6), found magic {:?}",
                String::from_utf8_lossy(magic)
            )))
        }
        None => return Err(Error::UnsupportedFormat("file too short for PNM header".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments may precede every header field.
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::UnsupportedFormat("malformed PNM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat("malformed PNM header number".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "only 8-bit PNM (maxval 255) is supported, got maxval {maxval}"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::UnsupportedFormat("missing whitespace after PNM header".into()));
    }
    pos += 1;
    let n = width * height * bands;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::UnsupportedFormat(format!("truncated raster, expected {n} bytes")))?;
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    MultibandImage::new(width, height, bands, data)
}

pub fn encode(img: &MultibandImage) -> Result<Vec<u8>> {
    let magic = match img.bands() {
        1 => "P5",
        3 => "P6",
        m => {
            return Err(Error::UnsupportedFormat(format!(
                "PNM holds 1 or 3 bands, image has {m}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn load(path: impl AsRef<Path>) -> Result<MultibandImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::UnsupportedFormat(msg) => Error::UnsupportedFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save(img: &MultibandImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(img)?).map_err(|e| Error::file(path, e))
}

/// Rescales values linearly so the minimum maps to 0 and the maximum to 1.
/// Constant images map to 0.
pub fn normalize_for_display(img: &MultibandImage) -> MultibandImage {
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    if span > 0.0 {
        img.map(|v| (v - lo) / span)
    } else {
        img.map(|_| 0.0)
    }
}
