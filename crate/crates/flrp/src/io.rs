//! Binary netpbm images (P6 colour, P5 grey), RTEN tensor files and raw
//! relevance maps.

use std::fs;
use std::path::Path;

use flrp_core::attribution::{Method, RelevanceMap};
use flrp_core::evalkit::BinaryMask;
use flrp_core::rten::{self, TensorFile};
use flrp_core::{GrayImage, RgbImage, Tensor};

use crate::error::{Error, Result};

/// Name of the single entry in a raw relevance-map file.
pub const RELEVANCE_ENTRY: &str = "relevance";

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments before each number
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
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header value out of range")?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("malformed header".into()),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("maxval {} unsupported, expected 255", maxval));
    }
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    Ok(Header {
        width,
        height,
        offset: pos,
    })
}

fn raster<'a>(
    bytes: &'a [u8],
    h: &Header,
    channels: usize,
) -> std::result::Result<&'a [u8], String> {
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or("image too large")?;
    let data = &bytes[h.offset..];
    match data.len().cmp(&n) {
        std::cmp::Ordering::Less => Err(format!("truncated raster: {} of {} bytes", data.len(), n)),
        std::cmp::Ordering::Greater => Err(format!("{} trailing bytes", data.len() - n)),
        std::cmp::Ordering::Equal => Ok(data),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let h = parse_header(bytes, b"P6")?;
    let data = raster(bytes, &h, 3)?;
    RgbImage::new(h.width, h.height, data.to_vec()).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let h = parse_header(bytes, b"P5")?;
    let data = raster(bytes, &h, 1)?;
    GrayImage::new(h.width, h.height, data.to_vec()).map_err(|e| e.to_string())
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path)?).map_err(|m| Error::format(path, m))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path)?).map_err(|m| Error::format(path, m))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(img))
}

/// Mask as a 0/255 grey image.
pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let data = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    GrayImage::new(mask.width, mask.height, data).expect("mask dimensions are positive")
}

/// Inverse of [`mask_to_gray`]; any value other than 0 or 255 is rejected.
pub fn gray_to_mask(img: &GrayImage) -> std::result::Result<BinaryMask, String> {
    let data = img
        .data()
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            v => Err(format!("mask value {} is neither 0 nor 255", v)),
        })
        .collect::<std::result::Result<Vec<bool>, String>>()?;
    Ok(BinaryMask {
        width: img.width(),
        height: img.height(),
        data,
    })
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    gray_to_mask(&read_pgm(path)?).map_err(|m| Error::format(path, m))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_pgm(path, &mask_to_gray(mask))
}

pub fn read_rten(path: &Path) -> Result<TensorFile> {
    rten::deserialize(&read_bytes(path)?).map_err(|e| Error::core(path, e))
}

pub fn write_rten(path: &Path, file: &TensorFile) -> Result<()> {
    let bytes = rten::serialize(file).map_err(|e| Error::core(path, e))?;
    write_bytes(path, &bytes)
}

/// Single-entry RTEN file with an `H x W` tensor.
pub fn relevance_to_rten(map: &RelevanceMap) -> Result<TensorFile> {
    let t = Tensor::new(vec![map.height, map.width], map.data.clone())?;
    Ok(TensorFile::from_entries(vec![(
        RELEVANCE_ENTRY.to_string(),
        t,
    )])?)
}

pub fn write_relevance(path: &Path, map: &RelevanceMap) -> Result<()> {
    write_rten(path, &relevance_to_rten(map)?)
}

/// Reads a raw relevance map; the method tag is not stored in the file.
pub fn read_relevance(path: &Path, method: Method) -> Result<RelevanceMap> {
    let file = read_rten(path)?;
    let t = match file.entries() {
        [(name, t)] if name == RELEVANCE_ENTRY && t.shape().len() == 2 => t,
        _ => {
            return Err(Error::format(
                path,
                "expected a single 2-d 'relevance' entry",
            ))
        }
    };
    RelevanceMap::new(t.shape()[0], t.shape()[1], t.data().to_vec(), method)
        .map_err(|e| Error::core(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let img = decode_ppm(b"P6 # made by hand\n1\t1 255\n\x01\x02\x03").unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn rejects_bad_rasters() {
        assert!(decode_ppm(b"P6\n1 1\n255\n\x01\x02")
            .unwrap_err()
            .contains("truncated"));
        assert!(decode_ppm(b"P6\n1 1\n255\n\x01\x02\x03\x04")
            .unwrap_err()
            .contains("trailing"));
        assert!(decode_ppm(b"P5\n1 1\n255\n\x01").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x01\x01")
            .unwrap_err()
            .contains("maxval"));
        assert!(decode_pgm(b"P5\n0 1\n255\n").is_err());
    }

    #[test]
    fn mask_values_are_strict() {
        let g = GrayImage::new(2, 1, vec![0, 128]).unwrap();
        assert!(gray_to_mask(&g).is_err());
    }
}
