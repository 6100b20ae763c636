//! RGB images as plain `f32` buffers plus the few pixel operations the
//! explainers and evaluation protocols need.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel normalisation applied before a backbone sees the pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const CLIP: Normalization = Normalization {
        mean: [0.48145466, 0.4578275, 0.40821073],
        std: [0.26862954, 0.26130258, 0.27577711],
    };
}

/// Height-major RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageInput {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::argument("image must have non-zero size"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::argument(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::argument("empty image payload"));
        }
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn open(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        self.to_rgb8().write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )?;
        Ok(bytes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let o = (row * self.width + col) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let resized = image::imageops::resize(
            &self.to_rgb8(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_dynamic(&image::DynamicImage::ImageRgb8(resized))
    }

    /// Scales the shorter side to cover the target, centre-crops, then
    /// resizes to exactly `height`×`width`.
    pub fn fit(&self, height: usize, width: usize) -> Result<Self> {
        if (self.height, self.width) == (height, width) {
            return Ok(self.clone());
        }
        let side = height.max(width);
        let scale = side as f64 / self.height.min(self.width) as f64;
        let rh = ((self.height as f64 * scale).round() as usize).max(side);
        let rw = ((self.width as f64 * scale).round() as usize).max(side);
        let square = self.resize(rh, rw).center_crop(side)?;
        Ok(if (height, width) == (side, side) {
            square
        } else {
            square.resize(height, width)
        })
    }

    /// Square crop of side `size` around the image centre.
    pub fn center_crop(&self, size: usize) -> Result<Self> {
        if size == 0 || size > self.height || size > self.width {
            return Err(Error::argument(format!(
                "crop {size} does not fit a {}x{} image",
                self.height, self.width
            )));
        }
        let top = (self.height - size) / 2;
        let left = (self.width - size) / 2;
        let mut data = Vec::with_capacity(size * size * 3);
        for r in top..top + size {
            let o = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[o..o + size * 3]);
        }
        Self::new(size, size, data)
    }

    /// Separable Gaussian blur with edge clamping.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (h, w) = (self.height as isize, self.width as isize);
        let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
            let mut out = vec![0f32; src.len()];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = [0f64; 3];
                    for (ki, k) in kernel.iter().enumerate() {
                        let d = ki as isize - radius;
                        let (rr, cc) = if horizontal {
                            (r, (c + d).clamp(0, w - 1))
                        } else {
                            ((r + d).clamp(0, h - 1), c)
                        };
                        let o = ((rr * w + cc) * 3) as usize;
                        for ch in 0..3 {
                            acc[ch] += k * src[o + ch] as f64;
                        }
                    }
                    let o = ((r * w + c) * 3) as usize;
                    for ch in 0..3 {
                        out[o + ch] = acc[ch] as f32;
                    }
                }
            }
            out
        };
        let horizontal = pass(&self.data, true);
        let data = pass(&horizontal, false);
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Per-channel mean over all pixels.
    pub fn channel_mean(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for ch in 0..3 {
                acc[ch] += px[ch] as f64;
            }
        }
        let n = self.pixels() as f64;
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }

    /// Normalised `(3, H, W)` tensor.
    pub fn to_tensor(&self, norm: &Normalization, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = (self.height, self.width);
        let mut chw = vec![0f64; 3 * h * w];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                chw[ch * h * w + p] = (px[ch] as f64 - norm.mean[ch]) / norm.std[ch];
            }
        }
        Ok(Tensor::from_vec(chw, (3, h, w), device)?.to_dtype(dtype)?)
    }
}

/// Row-major scalar grid, used for score maps and heatmaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::argument(format!(
                "grid {height}x{width} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.width)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Min-max scaling into `[0, 1]`; a constant grid maps to 0.5 everywhere.
    pub fn min_max_normalized(&self) -> Grid {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let values = if range > 0.0 && range.is_finite() {
            self.values.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.5; self.values.len()]
        };
        Grid {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn upsample_bilinear(&self, height: usize, width: usize) -> Grid {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = y - y0 as f64;
            for c in 0..width {
                let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = x - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid {
            height,
            width,
            values,
        }
    }
}
