//! Depth maps as NumPy `.npy` v1.0 files holding `<f4` arrays of shape
//! `(height, width)`. Pixels without depth are stored as 0.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::DepthMap;

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}",
        d.height, d.width
    );
    // Magic, version, length field and header end on a 64-byte boundary.
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 4 * d.depth.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (v, m) in d.depth.iter().zip(&d.mask) {
        let v = if *m { *v as f32 } else { 0.0 };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("not an NPY file"));
    }
    let (hlen, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        _ => return Err(bad("unsupported NPY version")),
    };
    let header = bytes
        .get(start..start + hlen)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("truncated header"))?;
    if !header.contains("'descr': '<f4'") {
        return Err(bad("depth arrays must be little-endian float32"));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("Fortran-ordered arrays are not supported"));
    }
    let shape = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let dims: Vec<u32> = shape
        .trim_start_matches([' ', '('])
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    let [height, width] = dims[..] else {
        return Err(bad("depth arrays must be two-dimensional"));
    };
    let n = width as usize * height as usize;
    let body = &bytes[start + hlen..];
    if body.len() != 4 * n {
        return Err(bad("payload size does not match shape"));
    }
    let depth: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mask = depth.iter().map(|v| v.is_finite() && *v > 0.0).collect::<Vec<_>>();
    let depth = depth.iter().zip(&mask).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
    Ok(DepthMap {
        width,
        height,
        depth,
        mask,
    })
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    super::atomic_write(path, &encode_depth(d))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&super::read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_float32_values_and_mask() {
        let mut d = DepthMap::empty(4, 3);
        d.depth[1] = 5.25;
        d.mask[1] = true;
        d.depth[7] = 12.5;
        d.mask[7] = true;
        d.depth[8] = 99.0; // masked out
        let back = decode_depth(&encode_depth(&d), Path::new("x.npy")).unwrap();
        assert_eq!(back.mask, d.mask);
        assert_eq!(back.depth[1], 5.25);
        assert_eq!(back.depth[8], 0.0);
        assert_eq!((back.width, back.height), (4, 3));
    }

    #[test]
    fn header_is_aligned() {
        let bytes = encode_depth(&DepthMap::empty(7, 5));
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes.len(), 10 + hlen + 4 * 35);
    }

    #[test]
    fn rejects_wrong_dtype() {
        let mut bytes = encode_depth(&DepthMap::empty(2, 2));
        let pos = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[pos + 2] = b'8';
        assert!(decode_depth(&bytes, Path::new("x.npy")).is_err());
    }
}
