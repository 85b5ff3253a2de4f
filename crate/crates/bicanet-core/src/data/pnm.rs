//! Binary PPM (P6) and PGM (P5) rasters, 8-bit, plus the fixed 256-entry
//! class palette used for color-coded predictions.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub w: usize,
    pub h: usize,
    /// Interleaved r, g, b rows, h * w * 3 bytes.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn new(w: usize, h: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != w * h * 3 {
            return Err(Error::shape("rgb raster", (w * h * 3).to_string(), data.len().to_string()));
        }
        Ok(Rgb { w, h, data })
    }
}

impl Gray {
    pub fn new(w: usize, h: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != w * h {
            return Err(Error::shape("gray raster", (w * h).to_string(), data.len().to_string()));
        }
        Ok(Gray { w, h, data })
    }
}

pub fn encode_ppm(img: &Rgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are utf8")
            .parse()
            .map_err(|_| self.err("number out of range"))
    }
}

fn parse_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut p = HeaderParser { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(p.err(format!(
            "expected magic `{}`",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    p.pos = 2;
    let w = p.number()?;
    let h = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return Err(p.err(format!("only 8-bit rasters supported, maxval {maxval}")));
    }
    if p.pos >= bytes.len() || !matches!(bytes[p.pos], b' ' | b'\t' | b'\r' | b'\n') {
        return Err(p.err("expected single whitespace before pixel data"));
    }
    p.pos += 1;
    if w == 0 || h == 0 {
        return Err(p.err("zero raster dimension"));
    }
    let need = w * h * channels;
    let data = &bytes[p.pos..];
    if data.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("pixel data truncated: need {need} bytes, have {}", data.len()),
        });
    }
    Ok((w, h, data[..need].to_vec()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb> {
    let (w, h, data) = parse_pnm(bytes, b"P6", 3)?;
    Ok(Rgb { w, h, data })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Gray> {
    let (w, h, data) = parse_pnm(bytes, b"P5", 1)?;
    Ok(Gray { w, h, data })
}

pub fn write_ppm(path: &Path, img: &Rgb) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

pub fn read_ppm(path: &Path) -> Result<Rgb> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    Ok(fs::write(path, encode_pgm(img))?)
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    decode_pgm(&fs::read(path)?)
}

/// Fixed 256-entry palette (the bit-reversal colormap common in segmentation
/// tooling); class k always maps to entry k.
pub fn palette() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (k, entry) in table.iter_mut().enumerate() {
        let mut c = k;
        for j in 0..8 {
            for (ch, v) in entry.iter_mut().enumerate() {
                *v |= (((c >> ch) & 1) as u8) << (7 - j);
            }
            c >>= 3;
        }
    }
    table
}

/// Color-code a label map through the palette.
pub fn colorize(labels: &Gray) -> Rgb {
    let table = palette();
    let mut data = Vec::with_capacity(labels.data.len() * 3);
    for &l in &labels.data {
        data.extend_from_slice(&table[l as usize]);
    }
    Rgb {
        w: labels.w,
        h: labels.h,
        data,
    }
}
