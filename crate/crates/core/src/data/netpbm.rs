//! Binary netpbm (P5 graymap, P6 pixmap) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::check_binary;
use crate::tensor::{fmt_shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Row-major, channel-interleaved samples.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            pixels,
        }
    }

    /// `[1×H×W]` in `[0, 1]`; colour images are averaged over channels.
    pub fn to_gray_tensor(&self) -> Tensor {
        let c = self.channels;
        let data = self
            .pixels
            .chunks_exact(c)
            .map(|px| px.iter().map(|&v| f64::from(v)).sum::<f64>() / (255.0 * c as f64))
            .collect();
        Tensor::from_parts(vec![1, self.height, self.width], data)
    }

    /// Binary `[1×H×W]` mask: `1` where the (channel-mean) sample is `>= 128`.
    pub fn to_mask(&self) -> Tensor {
        self.to_gray_tensor().map(|v| if v * 255.0 >= 128.0 { 1.0 } else { 0.0 })
    }

    /// Quantizes a `[1×H×W]` tensor in `[0, 1]` to 8 bits (values are clamped).
    pub fn from_gray_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = plane_dims(t)?;
        let pixels = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(Self::gray(w, h, pixels))
    }

    /// Binary mask to a graymap with foreground 255.
    pub fn from_mask(mask: &Tensor) -> Result<Self> {
        let (h, w) = plane_dims(mask)?;
        check_binary(mask, "mask")?;
        let pixels = mask.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
        Ok(Self::gray(w, h, pixels))
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a P5/P6 file. `path` is used only in error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |msg: &str| Error::format(path, msg);
        let mut pos = 0;
        let magic = header_token(bytes, &mut pos).ok_or_else(|| err("empty file"))?;
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(err("not a binary netpbm file (expected P5 or P6)")),
        };
        let mut field = |name: &str| -> Result<usize> {
            let tok = header_token(bytes, &mut pos).ok_or_else(|| err(&format!("truncated header, missing {name}")))?;
            std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(&format!("bad {name} {:?}", String::from_utf8_lossy(tok))))
        };
        let width = field("width")?;
        let height = field("height")?;
        let maxval = field("maxval")?;
        if maxval != 255 {
            return Err(err(&format!("maxval {maxval} unsupported (only 8-bit 255)")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let len = width * height * channels;
        let raster = bytes
            .get(pos..pos + len)
            .ok_or_else(|| err(&format!("raster truncated: need {len} bytes")))?;
        if bytes.len() > pos + len {
            return Err(err("trailing bytes after raster"));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: raster.to_vec(),
        })
    }
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape(format!("expected a [1xHxW] plane, got {}", fmt_shape(s)))),
    }
}

/// Next whitespace-delimited header token, skipping `#` comments. Leaves
/// `pos` on the delimiter that ended the token.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::decode(&bytes, path)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}

/// Writes a binary `[1×H×W]` mask as a P5 file with foreground 255.
pub fn write_mask(mask: &Tensor, path: &Path) -> Result<()> {
    write_image(path, &Image::from_mask(mask)?)
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    Ok(read_image(path)?.to_mask())
}

/// Writes a `[1×H×W]` frame in `[0, 1]` as an 8-bit P5 file.
pub fn write_frame(frame: &Tensor, path: &Path) -> Result<()> {
    write_image(path, &Image::from_gray_tensor(frame)?)
}

pub fn read_frame(path: &Path) -> Result<Tensor> {
    Ok(read_image(path)?.to_gray_tensor())
}
