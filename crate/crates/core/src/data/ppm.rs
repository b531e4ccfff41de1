//! Binary PPM (P6, 8-bit) frame storage.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes a `3 × H × W` raster with values in `[0, 1]` as P6 bytes.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match frame.shape() {
        [3, h, w] => (*h, *w),
        s => {
            return Err(Error::Dimension {
                op: "encode_ppm",
                lhs: s.to_vec(),
                rhs: vec![3, 0, 0],
            })
        }
    };
    if let Some(i) = frame.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data(format!(
            "frame value {} at flat index {i} outside [0, 1]",
            frame.data()[i]
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = frame.data();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let bytes = encode_ppm(frame)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|(offset, message)| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    })
}

/// Parses P6 bytes into a `3 × H × W` raster. Errors carry the byte offset.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, (usize, String)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err((0, "missing P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
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
            return Err((pos, format!("expected header field {i}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or((start, "header field overflows".to_string()))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err((pos, format!("invalid extents {w}x{h}")));
    }
    if maxval != 255 {
        return Err((pos, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err((pos, "missing separator after header".into()));
    }
    pos += 1;
    let plane = w * h;
    let payload = &bytes[pos..];
    if payload.len() != 3 * plane {
        return Err((
            pos + payload.len().min(3 * plane),
            format!("expected {} payload bytes, found {}", 3 * plane, payload.len()),
        ));
    }
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = f64::from(payload[3 * p + c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("ppm shape"))
}
