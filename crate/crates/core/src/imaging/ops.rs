use super::{Image, ImageError, Result, Rng};
use crate::tensor::kernels;

/// Top-left corner and side of a square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl CropWindow {
    /// Uniformly random valid window (row offset drawn first).
    pub fn draw(height: usize, width: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 || size > height || size > width {
            return Err(ImageError::CropTooLarge {
                size,
                height,
                width,
            });
        }
        let top = rng.below(height - size + 1);
        let left = rng.below(width - size + 1);
        Ok(CropWindow { top, left, size })
    }
}

pub fn crop(image: &Image, window: CropWindow) -> Result<Image> {
    let CropWindow { top, left, size } = window;
    if size == 0 || top + size > image.height() || left + size > image.width() {
        return Err(ImageError::CropTooLarge {
            size,
            height: image.height(),
            width: image.width(),
        });
    }
    Image::from_fn(size, size, |y, x| image.get(top + y, left + x))
}

/// Axis-aligned `size × size` crop at a uniformly random offset.
pub fn random_crop(image: &Image, size: usize, rng: &mut Rng) -> Result<Image> {
    let window = CropWindow::draw(image.height(), image.width(), size, rng)?;
    crop(image, window)
}

/// One draw of the flip/rotation augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn draw(rng: &mut Rng) -> Self {
        let flip_horizontal = rng.coin();
        let flip_vertical = rng.coin();
        let quarter_turns = rng.below(4) as u8;
        Augmentation {
            flip_horizontal,
            flip_vertical,
            quarter_turns,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let (h, w) = (image.height(), image.width());
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(ImageError::NotSquare {
                height: h,
                width: w,
            });
        }
        let mut out = image.clone();
        if self.flip_horizontal {
            out = Image::from_fn(h, w, |y, x| out.get(y, w - 1 - x))?;
        }
        if self.flip_vertical {
            out = Image::from_fn(h, w, |y, x| out.get(h - 1 - y, x))?;
        }
        for _ in 0..self.quarter_turns % 4 {
            let (oh, ow) = (out.height(), out.width());
            // clockwise: new(y, x) = old(H-1-x, y)
            out = Image::from_fn(ow, oh, |y, x| out.get(oh - 1 - x, y))?;
        }
        Ok(out)
    }
}

/// Separable Gaussian blur, radius `ceil(3σ)`, mirrored borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImageError::InvalidParameter(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let taps = kernels::gaussian_kernel(sigma);
    let planar: Vec<f64> = image.to_planar();
    let out = kernels::gaussian_blur_planes(3, h, w, &taps, &planar);
    Image::from_planar(h, w, &out)
}

/// Closed ranges for per-channel jitter draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterRanges {
    pub scale: (f64, f64),
    pub bias: (f64, f64),
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            scale: (0.6, 1.4),
            bias: (-0.1, 0.1),
        }
    }
}

impl JitterRanges {
    pub const SCALE_BOUNDS: (f64, f64) = (0.5, 1.5);
    pub const BIAS_BOUNDS: (f64, f64) = (-0.25, 0.25);

    pub fn validate(&self) -> Result<()> {
        let within = |(lo, hi): (f64, f64), (blo, bhi): (f64, f64)| lo <= hi && lo >= blo && hi <= bhi;
        if !within(self.scale, Self::SCALE_BOUNDS) {
            return Err(ImageError::InvalidParameter(format!(
                "jitter scale range {:?} must lie within [0.5, 1.5]",
                self.scale
            )));
        }
        if !within(self.bias, Self::BIAS_BOUNDS) {
            return Err(ImageError::InvalidParameter(format!(
                "jitter bias range {:?} must lie within [-0.25, 0.25]",
                self.bias
            )));
        }
        Ok(())
    }
}

/// `v' = clamp(s_c·v + b_c)` per channel.
pub fn apply_color_jitter(image: &Image, scale: [f32; 3], bias: [f32; 3]) -> Image {
    let pixels = image
        .pixels()
        .chunks(3)
        .flat_map(|px| (0..3).map(move |c| scale[c] * px[c] + bias[c]))
        .collect();
    Image::new(image.height(), image.width(), pixels).expect("same extent")
}

/// Random per-channel affine color change; scale then bias drawn per channel.
pub fn color_jitter(image: &Image, rng: &mut Rng, ranges: &JitterRanges) -> Result<Image> {
    ranges.validate()?;
    let mut scale = [0f32; 3];
    let mut bias = [0f32; 3];
    for c in 0..3 {
        scale[c] = rng.range(ranges.scale.0, ranges.scale.1) as f32;
        bias[c] = rng.range(ranges.bias.0, ranges.bias.1) as f32;
    }
    Ok(apply_color_jitter(image, scale, bias))
}

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// BT.601 luma replicated into all three channels.
pub fn to_grayscale(image: &Image) -> Image {
    let pixels = image
        .pixels()
        .chunks(3)
        .flat_map(|px| {
            let y = LUMA
                .iter()
                .zip(px)
                .map(|(w, &v)| w * f64::from(v))
                .sum::<f64>() as f32;
            [y, y, y]
        })
        .collect();
    Image::new(image.height(), image.width(), pixels).expect("same extent")
}

/// Task-oriented distortion used to build triplet anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistortionSpec {
    /// Blur with σ drawn uniformly from the range.
    GaussianBlur { sigma: (f64, f64) },
    ColorJitter(JitterRanges),
    Grayscale,
}

impl DistortionSpec {
    pub const SIGMA_BOUNDS: (f64, f64) = (0.3, 5.0);

    pub fn blur(lo: f64, hi: f64) -> Self {
        DistortionSpec::GaussianBlur { sigma: (lo, hi) }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistortionSpec::GaussianBlur { .. } => "gaussian_blur",
            DistortionSpec::ColorJitter(_) => "color_jitter",
            DistortionSpec::Grayscale => "grayscale",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistortionSpec::GaussianBlur { sigma: (lo, hi) } => {
                let (blo, bhi) = Self::SIGMA_BOUNDS;
                if !(lo <= hi && *lo >= blo && *hi <= bhi) {
                    return Err(ImageError::InvalidParameter(format!(
                        "blur sigma range ({lo}, {hi}) must lie within [{blo}, {bhi}]"
                    )));
                }
                Ok(())
            }
            DistortionSpec::ColorJitter(r) => r.validate(),
            DistortionSpec::Grayscale => Ok(()),
        }
    }

    pub fn apply(&self, image: &Image, rng: &mut Rng) -> Result<Image> {
        self.validate()?;
        match self {
            DistortionSpec::GaussianBlur { sigma: (lo, hi) } => gaussian_blur(image, rng.range(*lo, *hi)),
            DistortionSpec::ColorJitter(r) => color_jitter(image, rng, r),
            DistortionSpec::Grayscale => Ok(to_grayscale(image)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Rng::seed(seed);
        Image::from_fn(h, w, |_, _| {
            [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
        })
        .unwrap()
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = random_image(8, 8, 1);
        let mut rng = Rng::seed(0);
        assert_eq!(random_crop(&img, 8, &mut rng).unwrap(), img);
    }

    #[test]
    fn oversized_crop_errors() {
        let img = random_image(8, 6, 1);
        let mut rng = Rng::seed(0);
        assert!(matches!(
            random_crop(&img, 7, &mut rng),
            Err(ImageError::CropTooLarge { size: 7, .. })
        ));
    }

    #[test]
    fn constant_image_crops_constant() {
        let img = Image::filled(20, 20, [0.2, 0.4, 0.6]).unwrap();
        let mut rng = Rng::seed(5);
        for _ in 0..10 {
            let c = random_crop(&img, 7, &mut rng).unwrap();
            assert!(c.pixels().chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
        }
    }

    #[test]
    fn crop_offsets_cover_both_extremes() {
        let mut rng = Rng::seed(11);
        let (mut tops, mut lefts) = (Vec::new(), Vec::new());
        for _ in 0..1000 {
            let w = CropWindow::draw(64, 64, 32, &mut rng).unwrap();
            tops.push(w.top);
            lefts.push(w.left);
        }
        for v in [&tops, &lefts] {
            assert_eq!(*v.iter().min().unwrap(), 0);
            assert_eq!(*v.iter().max().unwrap(), 32);
        }
    }

    #[test]
    fn crop_never_reads_out_of_bounds() {
        let mut rng = Rng::seed(2);
        let img = random_image(9, 13, 4);
        for size in 1..=9 {
            for _ in 0..20 {
                let c = random_crop(&img, size, &mut rng).unwrap();
                assert_eq!((c.height(), c.width()), (size, size));
            }
        }
    }

    #[test]
    fn identity_augmentation() {
        let img = random_image(6, 6, 3);
        assert_eq!(Augmentation::default().apply(&img).unwrap(), img);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let img = random_image(6, 6, 3);
        let half = Augmentation {
            quarter_turns: 2,
            ..Default::default()
        };
        assert_eq!(half.apply(&half.apply(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn quarter_turn_is_clockwise() {
        // 2x2: [a b; c d] -> [c a; d b]
        let img = Image::from_fn(2, 2, |y, x| [(y * 2 + x) as f32 / 4.0; 3]).unwrap();
        let rot = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        }
        .apply(&img)
        .unwrap();
        let vals: Vec<f32> = (0..4).map(|i| rot.get(i / 2, i % 2)[0] * 4.0).collect();
        assert_eq!(vals, vec![2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn augmentation_preserves_pixel_multiset() {
        let img = random_image(8, 8, 7);
        let sorted = |i: &Image| {
            let mut px: Vec<[u32; 3]> = i
                .pixels()
                .chunks(3)
                .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
                .collect();
            px.sort_unstable();
            px
        };
        let reference = sorted(&img);
        let mut rng = Rng::seed(1);
        for _ in 0..32 {
            let aug = Augmentation::draw(&mut rng);
            assert_eq!(sorted(&aug.apply(&img).unwrap()), reference);
        }
    }

    #[test]
    fn rotation_of_non_square_errors() {
        let img = random_image(4, 6, 3);
        let quarter = Augmentation {
            quarter_turns: 3,
            ..Default::default()
        };
        assert!(matches!(quarter.apply(&img), Err(ImageError::NotSquare { .. })));
        let flip = Augmentation {
            flip_vertical: true,
            quarter_turns: 2,
            ..Default::default()
        };
        assert!(flip.apply(&img).is_ok());
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = Image::filled(10, 12, [0.25, 0.5, 0.75]).unwrap();
        let b = gaussian_blur(&img, 1.7).unwrap();
        for (a, b) in img.pixels().iter().zip(b.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_channel_means() {
        let img = random_image(16, 20, 8);
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let b = gaussian_blur(&img, sigma).unwrap();
            let (ma, mb) = (img.channel_means(), b.channel_means());
            for c in 0..3 {
                assert!((ma[c] - mb[c]).abs() < 1e-4, "sigma {sigma} channel {c}");
            }
        }
    }

    #[test]
    fn blur_matches_dense_kernel() {
        let img = random_image(9, 13, 4);
        let sigma = 1.3;
        let r = (3.0f64 * sigma).ceil() as isize;
        let g = |d: isize| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        let total: f64 = (-r..=r)
            .flat_map(|i| (-r..=r).map(move |j| g(i) * g(j)))
            .sum();
        let out = gaussian_blur(&img, sigma).unwrap();
        for y in 0..9 {
            for x in 0..13 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for i in -r..=r {
                        for j in -r..=r {
                            let sy = kernels::mirror_index(y as isize + i, 9);
                            let sx = kernels::mirror_index(x as isize + j, 13);
                            acc += g(i) * g(j) * f64::from(img.get(sy, sx)[c]);
                        }
                    }
                    let got = f64::from(out.get(y, x)[c]);
                    assert!((got - acc / total).abs() < 1e-6, "({y},{x},{c})");
                }
            }
        }
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let img = random_image(4, 4, 1);
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn jitter_identity_and_black() {
        let img = random_image(5, 5, 2);
        let ranges = JitterRanges {
            scale: (1.0, 1.0),
            bias: (0.0, 0.0),
        };
        let mut rng = Rng::seed(0);
        assert_eq!(color_jitter(&img, &mut rng, &ranges).unwrap(), img);
        let black = apply_color_jitter(&img, [0.0; 3], [0.0; 3]);
        assert!(black.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jitter_output_stays_in_unit_range() {
        let img = random_image(6, 6, 2);
        let ranges = JitterRanges {
            scale: (0.5, 1.5),
            bias: (-0.25, 0.25),
        };
        let mut rng = Rng::seed(4);
        for _ in 0..50 {
            let out = color_jitter(&img, &mut rng, &ranges).unwrap();
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn jitter_ranges_are_validated() {
        let bad = JitterRanges {
            scale: (0.2, 1.0),
            bias: (0.0, 0.0),
        };
        assert!(bad.validate().is_err());
        let inverted = JitterRanges {
            scale: (1.2, 1.0),
            bias: (0.0, 0.0),
        };
        assert!(inverted.validate().is_err());
        assert!(JitterRanges::default().validate().is_ok());
    }

    #[test]
    fn grayscale_properties() {
        let red = Image::filled(2, 2, [1.0, 0.0, 0.0]).unwrap();
        let g = to_grayscale(&red);
        assert!(g.pixels().iter().all(|&v| (v - 0.299).abs() < 1e-7));

        let gray = Image::filled(3, 3, [0.4, 0.4, 0.4]).unwrap();
        let gg = to_grayscale(&gray);
        for (a, b) in gray.pixels().iter().zip(gg.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }

        let img = random_image(4, 4, 9);
        let once = to_grayscale(&img);
        let twice = to_grayscale(&once);
        for (a, b) in once.pixels().iter().zip(twice.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn distortions_are_reproducible() {
        let img = random_image(12, 12, 6);
        for spec in [
            DistortionSpec::blur(1.0, 2.0),
            DistortionSpec::ColorJitter(JitterRanges::default()),
            DistortionSpec::Grayscale,
        ] {
            let a = spec.apply(&img, &mut Rng::seed(77)).unwrap();
            let b = spec.apply(&img, &mut Rng::seed(77)).unwrap();
            assert_eq!(a, b);
        }
    }
}
