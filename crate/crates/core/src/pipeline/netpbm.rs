//! Binary PPM (P6, maxval 255) images and PGM (P5) label masks.
//!
//! Writers emit the canonical header `P6\n<w> <h>\n255\n`; readers accept any
//! whitespace and `#` comments in the header, as the format allows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format("file too short for a netpbm header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header number out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    Ok(Header { magic, width: fields[0], height: fields[1], maxval: fields[2], data_start: pos + 1 })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(Error::Format(format!("raster truncated: {} of {need} bytes", data.len())));
    }
    Ok(&data[..need])
}

/// Decodes a P6 image into `[3, H, W]` with values `byte / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format("not a binary PPM (P6) file".into()));
    }
    if h.maxval != 255 {
        return Err(Error::Format(format!("PPM maxval must be 255, got {}", h.maxval)));
    }
    let data = raster(bytes, &h, 3)?;
    let hw = h.width * h.height;
    Tensor::new(
        vec![3, h.height, h.width],
        (0..3 * hw).map(|i| data[(i % hw) * 3 + i / hw] as f64 / 255.0).collect(),
    )
}

/// Encodes `[3, H, W]` values in [0, 1] as P6, rounding to the nearest byte.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs a [3, H, W] image, got {:?}", image.shape())));
    }
    let (hh, w) = (image.shape()[1], image.shape()[2]);
    let hw = hh * w;
    let mut out = format!("P6\n{w} {hh}\n255\n").into_bytes();
    let d = image.data();
    for px in 0..hw {
        for c in 0..3 {
            out.push((d[c * hw + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// A P5 label mask: `labels` row-major, `maxval` = classes - 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub labels: Vec<u8>,
}

impl LabelImage {
    pub fn new(labels: Vec<u8>, width: usize, height: usize, classes: usize) -> Result<Self> {
        if !(2..=256).contains(&classes) {
            return Err(Error::InvalidArgument(format!("PGM masks need 2..=256 classes, got {classes}")));
        }
        if labels.len() != width * height {
            return Err(Error::InvalidArgument(format!("{} labels for {width}x{height}", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange { label: l as usize, classes });
        }
        Ok(Self { width, height, maxval: (classes - 1) as u8, labels })
    }

    pub fn classes(&self) -> usize {
        self.maxval as usize + 1
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Format("not a binary PGM (P5) file".into()));
    }
    if !(1..=255).contains(&h.maxval) {
        return Err(Error::Format(format!("PGM maxval must be in 1..=255, got {}", h.maxval)));
    }
    let labels = raster(bytes, &h, 1)?.to_vec();
    LabelImage::new(labels, h.width, h.height, h.maxval + 1)
}

pub fn encode_pgm(mask: &LabelImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", mask.width, mask.height, mask.maxval).into_bytes();
    out.extend_from_slice(&mask.labels);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image)?)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &LabelImage) -> Result<()> {
    Ok(fs::write(path, encode_pgm(mask))?)
}
