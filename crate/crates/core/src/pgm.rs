//! Binary Netpbm greymap (P5) codec.
//! https://netpbm.sourceforge.net/doc/pgm.html
//!
//! Frames are always written with maxval 65535, i.e. two bytes per pixel,
//! most significant byte first, row-major from the top-left corner.

use std::path::Path;

use crate::cube::{Frame, RAW_MAX};
use crate::error::{Error, Result};

/// Encodes a raw frame. Values are rounded and clamped into `[0, 65535]`.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", frame.width(), frame.height());
    let mut out = Vec::with_capacity(header.len() + 2 * frame.data().len());
    out.extend_from_slice(header.as_bytes());
    for &v in frame.data() {
        let px = v.round().clamp(0.0, RAW_MAX) as u16;
        out.extend_from_slice(&px.to_be_bytes());
    }
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic".into());
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?;
        *field = text.parse().map_err(|e| format!("bad header number {text:?}: {e}"))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos,
    })
}

/// Decodes a P5 image into a raw-domain frame.
pub fn decode(bytes: &[u8]) -> std::result::Result<Frame, String> {
    let h = parse_header(bytes)?;
    let bytes_per_px = if h.maxval < 256 { 1 } else { 2 };
    let n = h.width * h.height;
    let raster = &bytes[h.data_offset..];
    if raster.len() < n * bytes_per_px {
        return Err(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            n * bytes_per_px
        ));
    }
    let data: Vec<f64> = if bytes_per_px == 1 {
        raster[..n].iter().map(|&b| f64::from(b)).collect()
    } else {
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    };
    if data.iter().any(|&v| v > f64::from(h.maxval)) {
        return Err("pixel exceeds maxval".into());
    }
    Frame::raw(h.width, h.height, data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, frame: &Frame) -> Result<()> {
    std::fs::write(path, encode(frame)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Frame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Pgm {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let f = Frame::raw(3, 2, vec![0.0, 1.0, 256.0, 65535.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&f);
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(&bytes[13..19], &[0, 0, 0, 1, 1, 0]);
        assert_eq!(&bytes[19..21], &[0xff, 0xff]);
    }

    #[test]
    fn accepts_comments_and_8bit() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 200]);
        let f = decode(&bytes).unwrap();
        assert_eq!(f.data(), &[7.0, 200.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n65535\n\x00\x01").is_err());
        assert!(decode(b"P5\n2 2\n70000\n").is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let data: Vec<f64> = (0..w * h)
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 48) as f64)
                .collect();
            let f = Frame::raw(w, h, data).unwrap();
            prop_assert_eq!(decode(&encode(&f)).unwrap(), f);
        }
    }
}
