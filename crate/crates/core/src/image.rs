//! Binary PPM (P6) colour images and PGM (P5) part-index maps.

use std::path::Path;

use crate::error::{Error, Result};

/// Part-map value for background pixels.
pub const BACKGROUND_LABEL: u8 = 255;

/// RGB image with channel values in `[0, 1]`, row-major, 3 per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid("rgb buffer length does not match extents"));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        RgbImage {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Values rounded to 8 bits, as stored on disk.
    pub fn quantized(&self) -> RgbImage {
        RgbImage {
            data: self.data.iter().map(|&v| f64::from(to_byte(v)) / 255.0).collect(),
            ..*self
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| to_byte(v)));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_header(bytes, b"P6")?;
        if body.len() < w * h * 3 {
            return Err(Error::Data("ppm: truncated pixel data".into()));
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data: body[..w * h * 3].iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Per-pixel part index, `BACKGROUND_LABEL` for empty space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl PartMap {
    pub fn background(width: usize, height: usize) -> Self {
        PartMap {
            width,
            height,
            labels: vec![BACKGROUND_LABEL; width * height],
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_header(bytes, b"P5")?;
        if body.len() < w * h {
            return Err(Error::Data("pgm: truncated pixel data".into()));
        }
        Ok(PartMap {
            width: w,
            height: h,
            labels: body[..w * h].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Maps background to `k` and returns class indices in `0..=k`.
    pub fn class_indices(&self, k: usize) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| match l {
                BACKGROUND_LABEL => Ok(k),
                l if (l as usize) < k => Ok(l as usize),
                l => Err(Error::Data(format!("part label {l} out of range for K = {k}"))),
            })
            .collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses `magic w h maxval` followed by one whitespace byte.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    let bad = |m: &str| Error::Data(format!("image header: {m}"));
    if !bytes.starts_with(magic) {
        return Err(bad("wrong magic"));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected a number"))?;
    }
    if fields[2] != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}
