//! 16-bit binary PGM (P5) images.
//!
//! Field frames are exported as one grayscale image per (frame, channel,
//! source) triple. Each image is min-max scaled to the full 16-bit range and
//! the `(lo, hi)` pair is recorded beside it, so `lo + q/65535·(hi−lo)`
//! reconstructs the field to within half a quantization step.

use std::io::{self, Read};
use std::path::Path;

pub const PGM_MAX: u16 = u16::MAX;

/// Min and max of a slice; `(0, 0)` for empty input.
pub fn value_range(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// Writes `values` (row-major, `h` rows of `w`) as a 16-bit P5 image scaled
/// from `[lo, hi]` onto `[0, 65535]`. A degenerate range writes all zeros;
/// the recorded `lo` alone then reconstructs the constant field.
pub fn write_pgm16(
    path: &Path,
    values: &[f64],
    w: usize,
    h: usize,
    lo: f64,
    hi: f64,
) -> io::Result<()> {
    if values.len() != w * h {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} values cannot fill a {w}x{h} image", values.len()),
        ));
    }
    let mut buf = Vec::with_capacity(32 + values.len() * 2);
    buf.extend_from_slice(format!("P5\n{w} {h}\n{PGM_MAX}\n").as_bytes());
    let span = hi - lo;
    for &v in values {
        let q = if span > 0.0 {
            (((v - lo) / span) * f64::from(PGM_MAX)).round().clamp(0.0, f64::from(PGM_MAX)) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, buf)
}

/// Reads a 16-bit P5 image back as `(w, h, raw levels)`.
pub fn read_pgm16(path: &Path) -> io::Result<(usize, usize, Vec<u16>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> io::Result<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != u32::from(PGM_MAX) {
        return Err(bad("expected a 16-bit image (maxval 65535)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * 2;
    if bytes.len() != pos + need {
        return Err(bad("raster size does not match the header"));
    }
    let raster = bytes[pos..]
        .chunks_exact(2)
        .map(|p| u16::from_be_bytes([p[0], p[1]]))
        .collect();
    Ok((w, h, raster))
}

/// Inverse of the scaling in [`write_pgm16`].
pub fn dequantize(levels: &[u16], lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    levels.iter().map(|&q| lo + f64::from(q) / f64::from(PGM_MAX) * span).collect()
}
