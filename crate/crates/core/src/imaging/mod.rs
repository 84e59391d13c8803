//! RGB images, seeded randomness, PPM files, augmentations, task-oriented
//! distortions and procedural datasets.

mod ops;
mod ppm;
mod rng;
pub mod synth;

pub use ops::{
    apply_color_jitter, color_jitter, crop, gaussian_blur, random_crop, to_grayscale,
    Augmentation, CropWindow, DistortionSpec, JitterRanges, LUMA,
};
pub use ppm::{decode_ppm, encode_ppm, load_image, save_image};
pub use rng::Rng;

use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PPM maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated PPM payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("invalid image dimensions {height}x{width}")]
    Dimensions { height: usize, width: usize },
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("crop of size {size} does not fit a {height}x{width} image")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("rotation by a quarter turn needs a square image, got {height}x{width}")]
    NotSquare { height: usize, width: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("image size {0} is below the minimum of 16")]
    TooSmall(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// `height × width × 3` RGB raster, row-major with interleaved channels.
/// Every stored value lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image from interleaved RGB values, clamping into `[0,1]`.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImageError::Dimensions { height, width });
        }
        if pixels.len() != height * width * 3 {
            return Err(ImageError::PixelCount {
                expected: height * width * 3,
                actual: pixels.len(),
            });
        }
        for p in &mut pixels {
            *p = clamp_unit(*p);
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn same_extent(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Per-channel mean values.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.pixels.chunks(3) {
            for c in 0..3 {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.height * self.width) as f64;
        acc.map(|v| v / n)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Channel-planar `[3, H, W]` copy of the pixel values.
    pub fn to_planar<T: Real>(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); 3 * plane];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::lit(f64::from(px[c]));
            }
        }
        out
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[3, self.height, self.width], self.to_planar())
            .expect("image extents are non-zero")
    }

    /// Image from a planar `[3, H, W]` buffer; values are clamped.
    pub fn from_planar<T: Real>(height: usize, width: usize, planar: &[T]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != 3 * plane {
            return Err(ImageError::PixelCount {
                expected: 3 * plane,
                actual: planar.len(),
            });
        }
        let mut pixels = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                pixels.push(planar[c * plane + i].as_f64() as f32);
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [3, h, w] => Self::from_planar(h, w, t.data()),
            ref s => Err(ImageError::InvalidParameter(format!(
                "expected a [3,H,W] tensor, got {s:?}"
            ))),
        }
    }

    /// Places images side by side (all must share a height).
    pub fn hconcat(images: &[&Image]) -> Result<Image> {
        let height = images.first().map_or(0, |i| i.height);
        if images.iter().any(|i| i.height != height) {
            return Err(ImageError::InvalidParameter("heights differ".into()));
        }
        let width = images.iter().map(|i| i.width).sum();
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for img in images {
                pixels.extend_from_slice(&img.pixels[y * img.width * 3..(y + 1) * img.width * 3]);
            }
        }
        Image::new(height, width, pixels)
    }
}

pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}
