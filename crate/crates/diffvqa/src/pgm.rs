//! Binary 8-bit PGM (P5) images and masks.

use std::fs;
use std::path::Path;

use diffvqa_core::tensor::Tensor;

use crate::error::{Error, Result};

/// An 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `round(255 v)` after clamping to `[0, 1]`; NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Gray {
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            pixels: values.iter().map(|&v| quantize(v)).collect(),
        }
    }

    /// `[1, 1, H, W]` or any tensor whose last two axes are `H, W` with one
    /// plane.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
            return Err(Error::Dataset(format!("expected a single-plane image, got shape {s:?}")));
        }
        Ok(Self::from_values(s[s.len() - 1], s[s.len() - 2], t.data()))
    }

    pub fn from_mask(width: usize, height: usize, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), width * height);
        Self {
            width,
            height,
            pixels: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        }
    }

    /// `[1, 1, H, W]` with values `p / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("pixels match the header and are finite")
    }

    /// Pixels at or above 128 are set.
    pub fn to_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p >= 128).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a P5 file with maxval <= 255. Header comments are skipped.
    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("header ends early".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "header is not ASCII")?);
        }
        if fields[0] != "P5" {
            return Err(format!("magic `{}` is not P5", fields[0]));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
        let (width, height, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
        if maxval == 0 || maxval > 255 {
            return Err(format!("maxval {maxval} unsupported (8-bit only)"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(format!("raster has {} of {n} bytes", bytes.len().saturating_sub(pos)));
        }
        let mut pixels = bytes[pos..pos + n].to_vec();
        if maxval != 255 {
            for p in &mut pixels {
                *p = ((*p as usize).min(maxval) * 255 / maxval) as u8;
            }
        }
        Ok(Self { width, height, pixels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::decode(&bytes).map_err(|reason| Error::Pgm {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    Gray::from_tensor(t)?.write(path)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    Ok(Gray::read(path)?.to_tensor())
}
