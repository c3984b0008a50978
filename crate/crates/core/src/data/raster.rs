//! Binary PPM (P6) and PGM (P5) rasters, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor;

/// Interleaved 8-bit raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = match self.channels {
            1 => "P5",
            _ => "P6",
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated raster header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII header".into()))?);
        }
        // exactly one whitespace byte separates the header from the payload
        pos += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            m => return Err(Error::Format(format!("unsupported magic {m:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field {s:?}")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("maxval {maxval} unsupported")));
        }
        let len = width * height * channels;
        let payload = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Format(format!("payload shorter than {len} bytes")))?;
        Ok(Self {
            width,
            height,
            channels,
            data: payload.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    /// Planar `[C, H, W]` copy with values in `0..=255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (c, hw) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[c, self.height, self.width], |i| self.data[(i % hw) * c + i / hw] as f32)
    }

    /// Rounds and clamps a planar `[C, H, W]` tensor into a raster.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("raster from {:?}", t.shape())));
        };
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("{c} channels; rasters hold 1 or 3")));
        }
        let hw = h * w;
        let data = (0..c * hw)
            .map(|i| t.data()[(i % c) * hw + i / c].round().clamp(0.0, 255.0) as u8)
            .collect();
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    pub fn from_labels(y: &LabelMap) -> Self {
        Self {
            width: y.width,
            height: y.height,
            channels: 1,
            data: y.classes.clone(),
        }
    }

    pub fn to_labels(&self) -> Result<LabelMap> {
        if self.channels != 1 {
            return Err(Error::Format("label rasters must be single-channel".into()));
        }
        LabelMap::new(self.height, self.width, self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\xff";
        let r = Raster::decode(bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 1));
        assert_eq!(r.data, vec![7, 255]);
        assert!(Raster::decode(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(Raster::decode(b"P6\n2 2\n255\n\x00").is_err());
        assert!(Raster::decode(b"P6\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let r = Raster {
            width: 2,
            height: 1,
            channels: 3,
            data: vec![1, 2, 3, 4, 5, 6],
        };
        let t = r.to_tensor();
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(Raster::from_tensor(&t).unwrap(), r);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.pgm");
        let y = LabelMap::new(2, 3, vec![0, 1, 255, 3, 2, 1]).unwrap();
        Raster::from_labels(&y).write(&p).unwrap();
        assert_eq!(Raster::read(&p).unwrap().to_labels().unwrap(), y);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let data = (0..w * h * c).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let r = Raster { width: w, height: h, channels: c, data };
            let bytes = r.encode();
            let back = Raster::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
