//! Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::resize::bilinear_resize;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub samples: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(0, "expected P5 or P6 magic")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            maxval_at,
            format!("maxval {maxval}: only 8-bit samples are supported"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(3, "zero image extent"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(cur.pos, "missing whitespace after header")),
    }
    let len = width * height * channels;
    let data = bytes.get(cur.pos..cur.pos + len).ok_or_else(|| {
        Error::format(
            bytes.len(),
            format!(
                "truncated pixel data: need {len} bytes from offset {}",
                cur.pos
            ),
        )
    })?;
    let samples = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
            .collect()
    };
    Ok(Pnm {
        width,
        height,
        channels,
        samples,
    })
}

pub fn encode(pnm: &Pnm) -> Vec<u8> {
    let magic = if pnm.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", pnm.width, pnm.height).into_bytes();
    out.extend_from_slice(&pnm.samples);
    out
}

fn read(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn write(path: &Path, pnm: &Pnm) -> Result<()> {
    fs::write(path, encode(pnm)).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Channels-first `[3, h, w]` tensor in `[0, 1]` from a P6 file, at its stored size.
pub fn pnm_to_tensor(pnm: &Pnm) -> Result<Tensor> {
    if pnm.channels != 3 {
        return Err(Error::format(0, "expected a colour (P6) image"));
    }
    let (h, w) = (pnm.height, pnm.width);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in pnm.samples.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Loads a P6 image as `[3, side, side]`. Non-square or mis-sized images are
/// scaled so the short edge equals `side`, then center-cropped.
pub fn load_image(path: impl AsRef<Path>, side: usize) -> Result<Tensor> {
    let img = pnm_to_tensor(&read(path.as_ref())?)?;
    fit_square(&img, side)
}

/// Short-edge scale to `side`, then center crop.
pub fn fit_square(img: &Tensor, side: usize) -> Result<Tensor> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::shape(format!(
            "expected [c,h,w], got {:?}",
            img.shape()
        )));
    };
    if h == side && w == side {
        return Ok(img.clone());
    }
    let (nh, nw) = if h <= w {
        (
            side,
            ((w as f64 * side as f64 / h as f64).round() as usize).max(side),
        )
    } else {
        (
            ((h as f64 * side as f64 / w as f64).round() as usize).max(side),
            side,
        )
    };
    let scaled = if (nh, nw) == (h, w) {
        img.clone()
    } else {
        bilinear_resize(img, nh, nw)?
    };
    let (r0, c0) = ((nh - side) / 2, (nw - side) / 2);
    let mut data = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        let plane = scaled.channel(ch);
        for r in r0..r0 + side {
            data.extend_from_slice(&plane[r * nw + c0..r * nw + c0 + side]);
        }
    }
    Tensor::new(vec![c, side, side], data)
}

/// Writes a `[3, h, w]` tensor in `[0, 1]` as P6 (values clamped, rounded).
pub fn save_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::shape(format!(
            "save_image expects [3,h,w], got {:?}",
            img.shape()
        )));
    };
    let mut samples = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            samples.push(quantize(img.data()[c * h * w + i]));
        }
    }
    write(
        path.as_ref(),
        &Pnm {
            width: w,
            height: h,
            channels: 3,
            samples,
        },
    )
}

/// Min–max normalised 8-bit quantisation of a `[h, w]` map; constant maps become 0.
pub fn quantize_map(map: &Tensor) -> Result<Pnm> {
    let [h, w] = *map.shape() else {
        return Err(Error::shape(format!(
            "map expects [h,w], got {:?}",
            map.shape()
        )));
    };
    let min = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let samples = map
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                quantize((v - min) / span)
            } else {
                0
            }
        })
        .collect();
    Ok(Pnm {
        width: w,
        height: h,
        channels: 1,
        samples,
    })
}

/// Writes a `[h, w]` map as P5 after min–max normalisation.
pub fn save_map(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &quantize_map(map)?)
}

/// Reads a P5 map as `[h, w]` values `k / 255`.
pub fn load_map(path: impl AsRef<Path>) -> Result<Tensor> {
    let pnm = read(path.as_ref())?;
    if pnm.channels != 1 {
        return Err(Error::format(0, "expected a grayscale (P5) map"));
    }
    Tensor::new(
        vec![pnm.height, pnm.width],
        pnm.samples.iter().map(|&v| v as f64 / 255.0).collect(),
    )
}
