//! Single-channel portable float map (PFM) disparity files.
//!
//! ```text
//! "Pf\n"
//! "<width> <height>\n"
//! "-1.0\n"                      negative scale: little-endian samples
//! width*height f32 samples, rows stored bottom to top
//! ```
//!
//! Invalid pixels are written as -1.0; on reading, any negative sample is
//! invalid. Big-endian files (positive scale) are accepted on input.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::DisparityMap;

pub const INVALID_SENTINEL: f32 = -1.0;

pub fn encode_disparity(map: &DisparityMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(map.width * map.height * 4);
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            let i = y * map.width + x;
            let v = if map.valid[i] { map.values[i] } else { INVALID_SENTINEL };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits off the next whitespace-delimited header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(path, "header is not text"))
}

pub fn decode_disparity(bytes: &[u8], path: &Path) -> Result<DisparityMap> {
    let mut pos = 0;
    match token(bytes, &mut pos, path)? {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "three-channel float map, expected single channel (Pf)")),
        other => return Err(Error::format(path, format!("bad magic {other:?}, expected Pf"))),
    }
    let mut dim = |what: &str| -> Result<usize> {
        token(bytes, &mut pos, path)?
            .parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {what} in header")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let scale: f64 = token(bytes, &mut pos, path)?
        .parse()
        .map_err(|_| Error::format(path, "bad scale in header"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "scale must be non-zero"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "truncated header"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    let body = &bytes[pos..];
    if body.len() != n {
        return Err(Error::format(
            path,
            format!("expected {n} bytes of samples for {width}x{height}, found {}", body.len()),
        ));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0f32; width * height];
    let mut valid = vec![false; width * height];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (k / width, k % width);
        let i = (height - 1 - row) * width + x;
        if v >= 0.0 && v.is_finite() {
            values[i] = v;
            valid[i] = true;
        } else {
            values[i] = INVALID_SENTINEL;
        }
    }
    DisparityMap::new(width, height, values, valid)
}

pub fn save_disparity(path: &Path, map: &DisparityMap) -> Result<()> {
    if let Some(i) = (0..map.values.len()).find(|&i| map.valid[i] && !(map.values[i].is_finite() && map.values[i] >= 0.0)) {
        return Err(Error::InvalidRange(format!(
            "disparity {} at pixel {i} is not a finite value >= 0",
            map.values[i]
        )));
    }
    fs::write(path, encode_disparity(map)).map_err(|e| Error::io(path, e))
}

pub fn load_disparity(path: &Path) -> Result<DisparityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_disparity(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.pfm")
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); s };
            let values: Vec<f32> = (0..w * h).map(|_| (next() >> 40) as f32 / 1e5).collect();
            let valid: Vec<bool> = (0..w * h).map(|_| next() % 4 != 0).collect();
            let map = DisparityMap::new(w, h, values, valid).unwrap();
            let back = decode_disparity(&encode_disparity(&map), p()).unwrap();
            prop_assert_eq!(&back.valid, &map.valid);
            for i in 0..w * h {
                if map.valid[i] {
                    prop_assert_eq!(back.values[i].to_bits(), map.values[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let map = DisparityMap::new(1, 2, vec![0.25, 0.5], vec![true, true]).unwrap();
        let bytes = encode_disparity(&map);
        let header = b"Pf\n1 2\n-1.0\n".len();
        assert_eq!(&bytes[header..header + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn big_endian_input_is_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.75f32.to_be_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_be_bytes());
        let map = decode_disparity(&bytes, p()).unwrap();
        assert_eq!(map.get(0, 0), Some(0.75));
        assert_eq!(map.get(1, 0), None);
    }

    #[test]
    fn truncation_and_bad_headers_are_format_errors() {
        let map = DisparityMap::filled(3, 2, 0.1);
        let bytes = encode_disparity(&map);
        for cut in [0, 2, 6, bytes.len() - 1] {
            assert!(matches!(decode_disparity(&bytes[..cut], p()), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_disparity(&extra, p()), Err(Error::Format { .. })));
        assert!(matches!(decode_disparity(b"PF\n1 1\n-1.0\n0000", p()), Err(Error::Format { .. })));
        assert!(matches!(decode_disparity(b"Pf\n1 x\n-1.0\n0000", p()), Err(Error::Format { .. })));
    }
}
