//! Dense float images and their on-disk forms.
//!
//! Float images are stored as a 16-byte little-endian header
//! `{height u32, width u32, channels u32, reserved u32}` followed by
//! `height * width * channels` float32 values in row-major, channel-last order.
//! The same layout with a 3D header is used for voxel grids (see
//! [`crate::hypothesis::voxel`]).

use std::io::{self, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == width * height * channels).then_some(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn px(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn px_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// 8-bit PNG. One channel writes grayscale, three write RGB; values are
    /// clamped to [0, 1].
    pub fn save_png(&self, path: &Path) -> io::Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("png export needs 1 or 3 channels, got {c}"),
                ))
            }
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(io::Error::other)
    }

    pub fn load_png_rgb(path: &Path) -> io::Result<Self> {
        let img = image::open(path).map_err(io::Error::other)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data,
        })
    }

    pub fn write_float<W: Write>(&self, mut w: W) -> io::Result<()> {
        for v in [self.height as u32, self.width as u32, self.channels as u32, 0u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_float<R: Read>(mut r: R) -> io::Result<Self> {
        let mut hdr = [0u8; 16];
        r.read_exact(&mut hdr)?;
        let field = |i: usize| u32::from_le_bytes(hdr[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (field(0), field(1), field(2));
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "image header overflows"))?;
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_header_layout() {
        let img = ImageBuf::from_vec(2, 1, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, -2.0]).unwrap();
        let mut bytes = Vec::new();
        img.write_float(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(&bytes[0..4], &1u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
        let back = ImageBuf::read_float(&bytes[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_float_image_is_an_error() {
        let img = ImageBuf::filled(3, 3, 1, 0.5);
        let mut bytes = Vec::new();
        img.write_float(&mut bytes).unwrap();
        bytes.truncate(20);
        assert!(ImageBuf::read_float(&bytes[..]).is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = ImageBuf::from_vec(1, 1, 3, vec![1.0, 0.0, 0.5]).unwrap();
        img.save_png(&p).unwrap();
        let back = ImageBuf::load_png_rgb(&p).unwrap();
        assert_eq!(back.data[0], 1.0);
        assert_eq!(back.data[1], 0.0);
        assert!((back.data[2] - 0.5).abs() < 1.0 / 255.0);
    }
}
