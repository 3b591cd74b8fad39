//! 8-bit image containers and PNG I/O.
//!
//! Depth maps, prompts exported to disk, and label maps are single-channel
//! 8-bit images; RGB is interleaved 8-bit. 16-bit grayscale input (SUN RGB-D
//! style depth) is accepted on read and right-shifted to 8 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read};
use std::path::Path;

use crate::error::{io_err, GpError, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

macro_rules! plane_type {
    ($(#[$m:meta])* $name:ident, $channels:expr) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq, Eq, Hash)]
        pub struct $name {
            width: usize,
            height: usize,
            data: Vec<u8>,
        }

        impl $name {
            pub const CHANNELS: usize = $channels;

            pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
                if data.len() != width * height * Self::CHANNELS {
                    return Err(GpError::Shape(format!(
                        "{}: {}x{}x{} needs {} bytes, got {}",
                        stringify!($name),
                        width,
                        height,
                        Self::CHANNELS,
                        width * height * Self::CHANNELS,
                        data.len()
                    )));
                }
                Ok(Self { width, height, data })
            }

            pub fn filled(width: usize, height: usize, v: u8) -> Self {
                Self { width, height, data: vec![v; width * height * Self::CHANNELS] }
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn data(&self) -> &[u8] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [u8] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<u8> {
                self.data
            }
        }
    };
}

plane_type!(
    /// H×W geometric channel in `[0, 255]`: ground truth, degraded, or an exported prompt.
    DepthMap,
    1
);
plane_type!(
    /// Interleaved 8-bit RGB.
    RgbImage,
    3
);
plane_type!(
    /// Per-pixel class index, or [`IGNORE_INDEX`].
    LabelMap,
    1
);

impl DepthMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Round-and-clip a real-valued map into a depth map.
    pub fn from_f32(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, data) = read_gray(path)?;
        Self::new(w, h, data)
    }
}

impl LabelMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, data) = read_gray(path)?;
        Self::new(w, h, data)
    }
}

impl RgbImage {
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let (info, buf) = decode(path, &bytes)?;
        let data = match (info.color_type, info.bit_depth) {
            (png::ColorType::Rgb, png::BitDepth::Eight) => buf,
            (png::ColorType::Rgba, png::BitDepth::Eight) => {
                buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
            }
            (png::ColorType::Grayscale, png::BitDepth::Eight) => buf.iter().flat_map(|&v| [v, v, v]).collect(),
            (c, d) => return Err(GpError::Png { path: path.into(), msg: format!("unsupported RGB format {c:?}/{d:?}") }),
        };
        Self::new(info.width as usize, info.height as usize, data)
    }
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| GpError::Png { path: path.into(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(png::OutputInfo, Vec<u8>)> {
    let png_err = |e: png::DecodingError| GpError::Png { path: path.into(), msg: e.to_string() };
    let mut dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| GpError::Png { path: path.into(), msg: "image too large".into() })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Single-channel 8- or 16-bit PNG; 16-bit samples are right-shifted by 8.
fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
    let (info, buf) = decode(path, &bytes)?;
    let data = match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => buf,
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => {
            buf.chunks_exact(2).map(|b| (u16::from_be_bytes([b[0], b[1]]) >> 8) as u8).collect()
        }
        (c, d) => return Err(GpError::Png { path: path.into(), msg: format!("expected grayscale, got {c:?}/{d:?}") }),
    };
    Ok((info.width as usize, info.height as usize, data))
}

/// Write a 16-bit grayscale PNG (used to exercise the 16-bit read path).
pub fn save_gray16_png(path: &Path, w: usize, h: usize, data: &[u16]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let png_err = |e: png::EncodingError| GpError::Png { path: path.into(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixteen_bit_depth_is_shifted_to_eight() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d16.png");
        save_gray16_png(&p, 2, 1, &[0xABCD, 0x00FF]).unwrap();
        let d = DepthMap::load_png(&p).unwrap();
        assert_eq!(d.data(), &[0xAB, 0x00]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn png_roundtrip_is_bit_identical(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); (s >> 56) as u8 };
            let rgb = RgbImage::new(w, h, (0..w * h * 3).map(|_| next()).collect()).unwrap();
            let depth = DepthMap::new(w, h, (0..w * h).map(|_| next()).collect()).unwrap();
            rgb.save_png(&dir.path().join("rgb.png")).unwrap();
            depth.save_png(&dir.path().join("d.png")).unwrap();
            prop_assert_eq!(RgbImage::load_png(&dir.path().join("rgb.png")).unwrap(), rgb);
            prop_assert_eq!(DepthMap::load_png(&dir.path().join("d.png")).unwrap(), depth);
        }
    }
}
