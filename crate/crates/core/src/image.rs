//! RGB image buffers in the canonical `[0, 1]` range.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::hashing::Fingerprinter;

pub const CHANNELS: usize = 3;

/// Height × width × 3, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, clamping every value into `[0, 1]`. Non-finite values are
    /// rejected rather than clamped.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation("image must be non-empty".into()));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::Validation(format!(
                "image buffer has {} values, {}x{}x3 needs {}",
                data.len(),
                height,
                width,
                height * width * CHANNELS
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprinter::new();
        fp.update(&(self.height as u64).to_le_bytes());
        fp.update(&(self.width as u64).to_le_bytes());
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fp.update(&bytes);
        fp.finish()
    }

    /// Writes a 16-bit RGB PNG. Quantization error is at most `0.5 / 65535`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v * 65535.0).round() as u16)
            .collect();
        let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, buf)
                .expect("buffer length matches dimensions");
        if let Some(dir) = path.parent() {
            crate::io_util::ensure_dir(dir)?;
        }
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        crate::io_util::write_atomic(path, &bytes)
    }

    /// Loads any image the decoder understands, converting to `[0, 1]` RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let rgb = img.into_rgb16();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Self::new(h as usize, w as usize, data)
    }
}
