//! Binary PPM (P6) reader/writer and the raw-tensor alternative input.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

fn load_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Reads a binary PPM (P6, maxval 255). Returns (pixels, height, width).
pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| load_err(path, e.to_string()))?
        .read_to_end(&mut bytes)
        .map_err(|e| load_err(path, e.to_string()))?;

    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(load_err(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(load_err(path, "not a binary PPM (expected magic P6)"));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| load_err(path, "bad width"))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| load_err(path, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| load_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(load_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(load_err(
            path,
            format!("pixel payload truncated: need {need} bytes"),
        ));
    }
    Ok((bytes[pos..pos + need].to_vec(), h, w))
}

/// Writes a binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(pixels.len(), h * w * 3);
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

/// Reads the raw-tensor alternative: little-endian f32, C-order `3xHxW`,
/// described by a `<file>.json` sidecar. Values are interpreted in [0,1]
/// and quantized to 8-bit RGB.
pub fn read_raw_tensor(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let sidecar_path = path.with_extension(format!(
        "{}.json",
        path.extension().and_then(|e| e.to_str()).unwrap_or("raw")
    ));
    let sidecar: RawSidecar =
        serde_json::from_str(&std::fs::read_to_string(&sidecar_path).map_err(|e| {
            load_err(&sidecar_path, format!("missing raw sidecar: {e}"))
        })?)
        .map_err(|e| load_err(&sidecar_path, e.to_string()))?;
    if sidecar.dtype != "f32" || sidecar.order != "row-major" {
        return Err(load_err(
            &sidecar_path,
            format!(
                "unsupported raw layout dtype={} order={}",
                sidecar.dtype, sidecar.order
            ),
        ));
    }
    if sidecar.shape.len() != 3 || sidecar.shape[0] != 3 {
        return Err(load_err(
            &sidecar_path,
            format!("expected shape [3,H,W], got {:?}", sidecar.shape),
        ));
    }
    let (h, w) = (sidecar.shape[1], sidecar.shape[2]);
    let bytes = std::fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    if bytes.len() != 3 * h * w * 4 {
        return Err(load_err(
            path,
            format!("expected {} bytes, got {}", 3 * h * w * 4, bytes.len()),
        ));
    }
    let mut planes = vec![0.0f32; 3 * h * w];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        planes[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    let mut pixels = vec![0u8; h * w * 3];
    for c in 0..3 {
        for i in 0..h * w {
            let v = (planes[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            pixels[i * 3 + c] = v;
        }
    }
    Ok((pixels, h, w))
}
