//! Seeded procedural datasets.
//!
//! `Textures` is a 10-way classification set used to pretrain the feature
//! network. The paired tasks start from a procedural scene `Y` (neutral gray
//! gradient background, faint luminance texture, a few saturated shapes)
//! and derive the source `X` by the single factor the task is about.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use super::{color_jitter, gaussian_blur, Image, ImageError, JitterRanges, Result, Rng};

pub const TEXTURE_CLASSES: usize = 10;

pub const TEXTURE_NAMES: [&str; TEXTURE_CLASSES] = [
    "stripes",
    "checker",
    "dots",
    "radial_gradient",
    "linear_gradient",
    "noise",
    "rings",
    "diagonal_bands",
    "blobs",
    "grid",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// `X = 0.2·Y + N(0, 0.02²)`.
    Darken,
    /// `X = color_jitter(Y)` with the default ranges.
    Colorcast,
    /// `X = gaussian_blur(Y, σ ~ U[1, 2])`.
    Blur,
    /// Labeled textures for feature-network pretraining.
    Textures,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Darken => "darken",
            Task::Colorcast => "colorcast",
            Task::Blur => "blur",
            Task::Textures => "textures",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "darken" => Ok(Task::Darken),
            "colorcast" => Ok(Task::Colorcast),
            "blur" => Ok(Task::Blur),
            "textures" => Ok(Task::Textures),
            other => Err(format!(
                "unknown task '{other}' (expected darken, colorcast, blur or textures)"
            )),
        }
    }
}

/// A source/target training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub x: Image,
    pub y: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticSet {
    Pairs(Vec<Pair>),
    Labeled(Vec<LabeledImage>),
}

pub fn generate_synthetic(task: Task, count: usize, size: usize, rng: &mut Rng) -> Result<SyntheticSet> {
    match task {
        Task::Textures => generate_textures(count, size, rng).map(SyntheticSet::Labeled),
        _ => generate_pairs(task, count, size, rng).map(SyntheticSet::Pairs),
    }
}

pub fn generate_pairs(task: Task, count: usize, size: usize, rng: &mut Rng) -> Result<Vec<Pair>> {
    if size < 16 {
        return Err(ImageError::TooSmall(size));
    }
    if task == Task::Textures {
        return Err(ImageError::InvalidParameter(
            "textures is a labeled set, not a paired task".into(),
        ));
    }
    (0..count)
        .map(|_| {
            let y = scene(size, rng)?;
            let x = degrade(task, &y, rng)?;
            Ok(Pair { x, y })
        })
        .collect()
}

/// Applies the task's degradation to a clean target.
pub fn degrade(task: Task, y: &Image, rng: &mut Rng) -> Result<Image> {
    match task {
        Task::Darken => {
            let pixels = y
                .pixels()
                .iter()
                .map(|&v| (0.2 * f64::from(v) + 0.02 * rng.normal()) as f32)
                .collect();
            Image::new(y.height(), y.width(), pixels)
        }
        Task::Colorcast => color_jitter(y, rng, &JitterRanges::default()),
        Task::Blur => {
            let sigma = rng.range(1.0, 2.0);
            gaussian_blur(y, sigma)
        }
        Task::Textures => Err(ImageError::InvalidParameter(
            "textures has no degradation".into(),
        )),
    }
}

/// Balanced labels (`i mod 10`) with randomized appearance per sample.
pub fn generate_textures(count: usize, size: usize, rng: &mut Rng) -> Result<Vec<LabeledImage>> {
    if size < 16 {
        return Err(ImageError::TooSmall(size));
    }
    (0..count)
        .map(|i| {
            let label = i % TEXTURE_CLASSES;
            Ok(LabeledImage {
                image: texture(label, size, rng)?,
                label,
            })
        })
        .collect()
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    [0, 1, 2].map(|c| (a[c] * (1.0 - t) + b[c] * t) as f32)
}

fn random_color(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.range(lo, hi), rng.range(lo, hi), rng.range(lo, hi)]
}

/// Hue/saturation/value to RGB, all in [0,1].
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn texture(label: usize, size: usize, rng: &mut Rng) -> Result<Image> {
    let bg = random_color(rng, 0.0, 0.45);
    let fg = random_color(rng, 0.55, 1.0);
    let n = size as f64;
    let center = n / 2.0;
    let angle = rng.range(0.0, PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let phase = rng.range(0.0, 2.0 * PI);
    let grain = 0.03;
    let mut noise = rng.fork();
    let img = match label {
        // hard stripes at a random angle
        0 => {
            let period = rng.range(4.0, 8.0);
            Image::from_fn(size, size, |y, x| {
                let u = x as f64 * ca + y as f64 * sa;
                let on = (2.0 * PI * u / period + phase).sin() > 0.0;
                mix(bg, fg, if on { 1.0 } else { 0.0 })
            })
        }
        1 => {
            let cell = 2 + rng.below(5);
            let (oy, ox) = (rng.below(cell * 2), rng.below(cell * 2));
            Image::from_fn(size, size, |y, x| {
                let on = ((y + oy) / cell + (x + ox) / cell) % 2 == 0;
                mix(bg, fg, if on { 1.0 } else { 0.0 })
            })
        }
        2 => {
            let spacing = 5 + rng.below(4);
            let radius = rng.range(1.0, spacing as f64 / 3.0);
            let (oy, ox) = (rng.below(spacing), rng.below(spacing));
            Image::from_fn(size, size, |y, x| {
                let dy = ((y + oy) % spacing) as f64 - spacing as f64 / 2.0;
                let dx = ((x + ox) % spacing) as f64 - spacing as f64 / 2.0;
                mix(bg, fg, if dy.hypot(dx) <= radius { 1.0 } else { 0.0 })
            })
        }
        3 => {
            let (cy, cx) = (center + rng.range(-3.0, 3.0), center + rng.range(-3.0, 3.0));
            let reach = rng.range(0.5, 0.8) * n;
            Image::from_fn(size, size, |y, x| {
                let d = (y as f64 - cy).hypot(x as f64 - cx);
                mix(fg, bg, d / reach)
            })
        }
        4 => Image::from_fn(size, size, |y, x| {
            let u = ((x as f64 - center) * ca + (y as f64 - center) * sa) / n + 0.5;
            mix(bg, fg, u)
        }),
        5 => Image::from_fn(size, size, |_, _| mix(bg, fg, noise.uniform())),
        6 => {
            let (cy, cx) = (center + rng.range(-2.0, 2.0), center + rng.range(-2.0, 2.0));
            let period = rng.range(4.0, 7.0);
            Image::from_fn(size, size, |y, x| {
                let d = (y as f64 - cy).hypot(x as f64 - cx);
                let on = (2.0 * PI * d / period + phase).sin() > 0.0;
                mix(bg, fg, if on { 1.0 } else { 0.0 })
            })
        }
        7 => {
            let period = rng.range(10.0, 16.0);
            let dir = if rng.coin() { 1.0 } else { -1.0 };
            Image::from_fn(size, size, |y, x| {
                let u = (x as f64 + dir * y as f64) / std::f64::consts::SQRT_2;
                mix(bg, fg, 0.5 + 0.5 * (2.0 * PI * u / period + phase).sin())
            })
        }
        8 => {
            let blobs: Vec<(f64, f64, f64)> = (0..3 + rng.below(3))
                .map(|_| (rng.range(0.0, n), rng.range(0.0, n), rng.range(2.0, n / 6.0)))
                .collect();
            Image::from_fn(size, size, |y, x| {
                let t: f64 = blobs
                    .iter()
                    .map(|&(by, bx, s)| {
                        let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                        (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                mix(bg, fg, t)
            })
        }
        _ => {
            let spacing = 4 + rng.below(5);
            let (oy, ox) = (rng.below(spacing), rng.below(spacing));
            Image::from_fn(size, size, |y, x| {
                let on = (y + oy) % spacing == 0 || (x + ox) % spacing == 0;
                mix(bg, fg, if on { 1.0 } else { 0.0 })
            })
        }
    }?;
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| (f64::from(v) + grain * noise.normal()) as f32)
        .collect();
    Image::new(size, size, pixels)
}

/// Procedural target scene.
pub fn scene(size: usize, rng: &mut Rng) -> Result<Image> {
    let n = size as f64;
    let g0 = rng.range(0.35, 0.55);
    let g1 = rng.range(0.55, 0.8);
    let angle = rng.range(0.0, 2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let tex_period = rng.range(3.0, 6.0);
    let tex_angle = rng.range(0.0, PI);
    let (tc, ts) = (tex_angle.cos(), tex_angle.sin());

    enum Shape {
        Disc { cy: f64, cx: f64, r: f64 },
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    }
    let shapes: Vec<(Shape, [f64; 3])> = (0..3 + rng.below(3))
        .map(|_| {
            let color = hsv(rng.uniform(), rng.range(0.5, 1.0), rng.range(0.4, 0.95));
            let shape = if rng.coin() {
                Shape::Disc {
                    cy: rng.range(0.0, n),
                    cx: rng.range(0.0, n),
                    r: rng.range(n / 10.0, n / 4.0),
                }
            } else {
                let (h, w) = (rng.range(n / 6.0, n / 2.5), rng.range(n / 6.0, n / 2.5));
                let (y0, x0) = (rng.range(-h / 2.0, n - h / 2.0), rng.range(-w / 2.0, n - w / 2.0));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + h,
                    x1: x0 + w,
                }
            };
            (shape, color)
        })
        .collect();

    Image::from_fn(size, size, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let u = ((fx - n / 2.0) * ca + (fy - n / 2.0) * sa) / n + 0.5;
        let detail = 0.05 * (2.0 * PI * (fx * tc + fy * ts) / tex_period).sin();
        let gray = g0 + (g1 - g0) * u.clamp(0.0, 1.0) + detail;
        let mut px = [gray; 3];
        for (shape, color) in &shapes {
            let inside = match *shape {
                Shape::Disc { cy, cx, r } => (fy - cy).hypot(fx - cx) <= r,
                Shape::Rect { y0, x0, y1, x1 } => fy >= y0 && fy < y1 && fx >= x0 && fx < x1,
            };
            if inside {
                px = [0, 1, 2].map(|c| color[c] + detail);
            }
        }
        px.map(|v| v as f32)
    })
}
