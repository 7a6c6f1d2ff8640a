//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use rads_core::raster::RasterImage;
use rads_core::ImageDims;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("not a P5/P6 file")]
    BadMagic,
    #[error("malformed header")]
    BadHeader,
    #[error("unsupported maxval {0}; only 255 is supported")]
    MaxVal(u32),
    #[error("pixel data truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(img: &RasterImage) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<u32, PnmError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|b| *b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(PnmError::BadHeader),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().and_then(|s| s.parse().ok()).ok_or(PnmError::BadHeader)
}

/// Returns the image and the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(RasterImage, usize), PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1u8,
        Some(b"P6") => 3u8,
        _ => return Err(PnmError::BadMagic),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PnmError::MaxVal(maxval));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PnmError::BadHeader);
    }
    pos += 1;
    let dims = ImageDims::new(width, height).map_err(|_| PnmError::BadHeader)?;
    let need = dims.pixel_count() * usize::from(channels);
    let have = bytes.len() - pos;
    if have < need {
        return Err(PnmError::Truncated { need, have });
    }
    let img = RasterImage::new(dims, channels, bytes[pos..pos + need].to_vec()).map_err(|_| PnmError::BadHeader)?;
    Ok((img, pos + need))
}

pub fn decode(bytes: &[u8]) -> Result<RasterImage, PnmError> {
    decode_prefix(bytes).map(|(img, _)| img)
}

pub fn load(path: &Path) -> Result<RasterImage, PnmError> {
    decode(&fs::read(path)?)
}

pub fn save(path: &Path, img: &RasterImage) -> Result<(), PnmError> {
    Ok(fs::write(path, encode(img))?)
}

/// `pgm` for one channel, `ppm` for three.
pub fn extension(img: &RasterImage) -> &'static str {
    if img.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}
