//! Binary netpbm image containers: P6 (RGB) and P5 (grayscale).
//!
//! P5 files double as label maps: the pixel value is the class id and 255
//! marks unscored pixels. Writers emit the canonical header
//! `P6\n{w} {h}\n255\n`; readers accept any whitespace/comment layout the
//! format allows and report malformed input with its byte offset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Label id reserved for pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize) -> Self {
        RgbImage {
            h,
            w,
            data: vec![0; 3 * h * w],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.w + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// To a 1xCxHxW tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let shape = Shape::new(1, 3, self.h, self.w);
        let mut t = Tensor::zeros(shape);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    t.set(0, c, y, x, self.data[3 * (y * self.w + x) + c] as f32 / 255.0);
                }
            }
        }
        t
    }
}

/// Per-pixel class ids; 255 = ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        LabelMap {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#`-to-newline comments.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse::<usize>()
            .map_err(|e| self.err(format!("bad {what}: {e}")))
    }
}

fn parse_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut s = HeaderScanner { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(s.err(format!(
            "expected magic {}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    s.pos = 2;
    let w = s.read_number("width")?;
    let h = s.read_number("height")?;
    let maxval = s.read_number("maxval")?;
    if maxval != 255 {
        return Err(s.err(format!("unsupported maxval {maxval} (only 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if s.pos >= bytes.len() || !bytes[s.pos].is_ascii_whitespace() {
        return Err(s.err("expected single whitespace before raster"));
    }
    s.pos += 1;
    let need = channels * w * h;
    let raster = &bytes[s.pos..];
    if raster.len() < need {
        return Err(Error::Format {
            offset: s.pos + raster.len(),
            msg: format!("raster truncated: need {need} bytes, have {}", raster.len()),
        });
    }
    if raster.len() > need {
        return Err(Error::Format {
            offset: s.pos + need,
            msg: format!("{} trailing bytes after raster", raster.len() - need),
        });
    }
    Ok((w, h, raster.to_vec()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, data) = parse_pnm(bytes, b"P6", 3)?;
    Ok(RgbImage { h, w, data })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, data) = parse_pnm(bytes, b"P5", 1)?;
    Ok(LabelMap { h, w, data })
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    out.extend_from_slice(&map.data);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    Ok(fs::write(path, encode_pgm(map))?)
}
