//! Binary netpbm images: P6 (RGB) and P5 (grayscale), 8-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

/// Maps `[0, 1]` to `0..=255`, rounding halves up. Values outside the range
/// are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || width == 0 || height == 0 {
            return Err(Error::Format(format!("unsupported image {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Planar `[C, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = vec![0.0; c * h * w];
        for (i, &v) in self.data.iter().enumerate() {
            let (px, ch) = (i / c, i % c);
            out[ch * h * w + px] = f64::from(v) / 255.0;
        }
        Tensor::from_parts(vec![c, h, w], out)
    }

    /// Quantizes a `[C, H, W]` (C = 1 or 3) or `[H, W]` tensor in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim(format!("cannot store {:?} as an image", t.shape()))),
        };
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for px in 0..h * w {
                data[px * c + ch] = quantize(t.data()[ch * h * w + px]);
            }
        }
        Self::new(w, h, c, data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let io = |e: std::io::Error| Error::Format(format!("image write failed: {e}"));
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height).map_err(io)?;
        w.write_all(&self.data).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(r)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("image read failed: {e}")))?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(Error::Format("bad magic: expected P5 or P6".into())),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            *f = header_number(bytes, &mut pos)?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::Format(format!(
                "unsupported maxval {maxval}; only 8-bit 255 is read"
            )));
        }
        match bytes.get(pos) {
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::Format("missing whitespace after header".into())),
        }
        let need = width * height * channels;
        let payload = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format(format!("payload shorter than {need} bytes")))?;
        Self::new(width, height, channels, payload.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_digit() => break,
            _ => return Err(Error::Format("malformed header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("header number out of range".into()))
}
