//! Row-major image buffers and PFM / PNG export.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Depth value marking pixels with no surface.
pub const EMPTY_DEPTH: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Image<[f64; 3]>;
pub type DepthMap = Image<f64>;
pub type Mask = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

impl DepthMap {
    pub fn mask(&self) -> Mask {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&d| d > 0.0).collect(),
        }
    }
}

fn write_pfm<W: Write>(mut w: W, width: usize, height: usize, channels: usize, value: impl Fn(usize, usize) -> f64) -> Result<()> {
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(w, "{tag}\n{width} {height}\n-1.0\n")?;
    // PFM stores rows bottom to top.
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                w.write_all(&(value(y * width + x, c) as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_pfm<R: Read>(r: R) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bad = |why: &str| Error::format("pfm", why);
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim().to_string())
    };
    let channels = match next_line(&mut r)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("bad header")),
    };
    let dims = next_line(&mut r)?;
    let mut it = dims.split_whitespace().map(|t| t.parse::<usize>());
    let (w, h) = match (it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h))) => (w, h),
        _ => return Err(bad("bad dimensions")),
    };
    let scale: f64 = next_line(&mut r)?.parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let mut buf = vec![0u8; 4 * w * h * channels];
    r.read_exact(&mut buf)?;
    let mut out = vec![0f32; w * h * channels];
    for (k, c) in buf.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let row = k / (w * channels);
        let rest = k % (w * channels);
        out[(h - 1 - row) * w * channels + rest] = v;
    }
    Ok((w, h, channels, out))
}

impl RgbImage {
    pub fn write_pfm<W: Write>(&self, w: W) -> Result<()> {
        write_pfm(w, self.width, self.height, 3, |i, c| self.data[i][c])
    }

    pub fn read_pfm<R: Read>(r: R) -> Result<Self> {
        let (width, height, ch, v) = read_pfm(r)?;
        if ch != 3 {
            return Err(Error::format("pfm", "expected a color image"));
        }
        Ok(Image {
            width,
            height,
            data: v.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect(),
        })
    }

    /// 8-bit RGB PNG, values clamped to `[0, 1]`.
    pub fn write_png<W: Write>(&self, w: W) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|p| p.map(to_u8)).collect();
        encode_png(w, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        save_with(path, |w| self.write_pfm(w))
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        Self::read_pfm(std::fs::File::open(path)?).map_err(|e| relabel(e, path))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_with(path, |w| self.write_png(w))
    }
}

impl DepthMap {
    pub fn write_pfm<W: Write>(&self, w: W) -> Result<()> {
        write_pfm(w, self.width, self.height, 1, |i, _| {
            let d = self.data[i];
            if d > 0.0 {
                d
            } else {
                EMPTY_DEPTH
            }
        })
    }

    pub fn read_pfm<R: Read>(r: R) -> Result<Self> {
        let (width, height, ch, v) = read_pfm(r)?;
        if ch != 1 {
            return Err(Error::format("pfm", "expected a single-channel image"));
        }
        Ok(Image {
            width,
            height,
            data: v.into_iter().map(|x| x as f64).collect(),
        })
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        save_with(path, |w| self.write_pfm(w))
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        Self::read_pfm(std::fs::File::open(path)?).map_err(|e| relabel(e, path))
    }
}

impl Mask {
    /// Grayscale PNG with 255 for set pixels and 0 elsewhere.
    pub fn write_png<W: Write>(&self, w: W) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_png(w, self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_with(path, |w| self.write_png(w))
    }
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png<W: Write>(w: W, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format("png", e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::format("png", e.to_string()))?;
    writer.finish().map_err(|e| Error::format("png", e.to_string()))?;
    Ok(())
}

fn save_with(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { reason, .. } => Error::format(path.display(), reason),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_rgb_and_depth() {
        let img = Image {
            width: 3,
            height: 2,
            data: (0..6).map(|i| [i as f64 * 0.1, 0.5, 1.0 - i as f64 * 0.1]).collect(),
        };
        let mut buf = Vec::new();
        img.write_pfm(&mut buf).unwrap();
        assert!(buf.starts_with(b"PF\n3 2\n-1.0\n"));
        let back = RgbImage::read_pfm(buf.as_slice()).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert_eq!(a[c] as f32 as f64, b[c]);
            }
        }
        let depth = Image {
            width: 2,
            height: 2,
            data: vec![1.5, EMPTY_DEPTH, 0.0, 3.25],
        };
        let mut buf = Vec::new();
        depth.write_pfm(&mut buf).unwrap();
        let back = DepthMap::read_pfm(buf.as_slice()).unwrap();
        assert_eq!(back.data, vec![1.5, -1.0, -1.0, 3.25]);
    }

    #[test]
    fn pfm_rejects_garbage() {
        assert!(RgbImage::read_pfm(&b"P6\n1 1\n255\n"[..]).is_err());
        assert!(DepthMap::read_pfm(&b"Pf\n2 2\n-1.0\n\0\0"[..]).is_err());
    }

    #[test]
    fn png_encodes() {
        let mask = Image {
            width: 2,
            height: 1,
            data: vec![true, false],
        };
        let mut buf = Vec::new();
        mask.write_png(&mut buf).unwrap();
        assert!(buf.starts_with(&[0x89, b'P', b'N', b'G']));
        assert_eq!(mask.count(), 1);
    }
}
