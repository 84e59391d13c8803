//! Image quality metrics: PSNR, three-scale MS-SSIM on luma, and DFD, a
//! distance between unit-normalized features of the frozen extractor.
//! DFD is its own quantity and not comparable to LPIPS.

use crate::imaging::{Augmentation, Image, LUMA};
use crate::networks::{FeatureNetPsi, NetworkError};
use crate::tensor::kernels::{gaussian_kernel, mirror_index};
use crate::tensor::{exact, Real};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("image extents differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("ms_ssim needs both extents >= {min}, got {height}x{width}")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("a metric report needs at least one image")]
    Empty,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_extent(a: &Image, b: &Image) -> Result<()> {
    if a.same_extent(b) {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch(a.height(), a.width(), b.height(), b.width()))
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`; `+inf` when equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_extent(a, b)?;
    let sq: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    let mse = sq / a.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

pub const MS_SSIM_SCALES: usize = 3;
pub const MS_SSIM_MIN_EXTENT: usize = 32;
const MS_SSIM_WEIGHTS: [f64; MS_SSIM_SCALES] = [0.0448, 0.2856, 0.3001];
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luma(img: &Image) -> Plane {
        let v = img
            .pixels()
            .chunks(3)
            .map(|px| LUMA.iter().zip(px).map(|(w, &c)| w * f64::from(c)).sum())
            .collect();
        Plane { h: img.height(), w: img.width(), v }
    }

    fn map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        let v = self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect();
        Plane { h: self.h, w: self.w, v }
    }

    /// 2x2 mean; a trailing odd row or column is dropped.
    fn halve(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let at = |dr: usize, dc: usize| self.v[(2 * r + dr) * self.w + 2 * c + dc];
                v.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, v }
    }

    /// Separable Gaussian filter with mirrored borders.
    fn filter(&self, taps: &[f64]) -> Plane {
        let radius = (taps.len() / 2) as isize;
        let mut tmp = vec![0.0; self.v.len()];
        for r in 0..self.h {
            for c in 0..self.w {
                tmp[r * self.w + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * self.v[r * self.w + mirror_index(c as isize + k as isize - radius, self.w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; self.v.len()];
        for r in 0..self.h {
            for c in 0..self.w {
                out[r * self.w + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[mirror_index(r as isize + k as isize - radius, self.h) * self.w + c])
                    .sum();
            }
        }
        Plane { h: self.h, w: self.w, v: out }
    }
}

/// Mean luminance and contrast-structure terms at one scale.
fn ssim_terms(a: &Plane, b: &Plane, taps: &[f64]) -> (f64, f64) {
    let mu_a = a.filter(taps);
    let mu_b = b.filter(taps);
    let aa = a.map(a, |x, y| x * y).filter(taps);
    let bb = b.map(b, |x, y| x * y).filter(taps);
    let ab = a.map(b, |x, y| x * y).filter(taps);
    let n = a.v.len();
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        l_sum += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs_sum += (2.0 * cov + C2) / (va + vb + C2);
    }
    (l_sum / n as f64, cs_sum / n as f64)
}

/// Multi-scale SSIM of the luma channel over three dyadic scales.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_extent(a, b)?;
    if a.height() < MS_SSIM_MIN_EXTENT || a.width() < MS_SSIM_MIN_EXTENT {
        return Err(MetricError::TooSmall {
            height: a.height(),
            width: a.width(),
            min: MS_SSIM_MIN_EXTENT,
        });
    }
    let taps = gaussian_kernel(SSIM_SIGMA);
    let total: f64 = MS_SSIM_WEIGHTS.iter().sum();
    let (mut pa, mut pb) = (Plane::luma(a), Plane::luma(b));
    let mut value = 1.0;
    for (scale, w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (l, cs) = ssim_terms(&pa, &pb, &taps);
        let mut term = cs.max(0.0);
        if scale + 1 == MS_SSIM_SCALES {
            term *= l.max(0.0);
        } else {
            pa = pa.halve();
            pb = pb.halve();
        }
        value *= term.powf(w / total);
    }
    Ok(value.clamp(0.0, 1.0))
}

fn unit_normalized(t: &[f64], c: usize) -> Vec<f64> {
    let hw = t.len() / c;
    let mut out = t.to_vec();
    for p in 0..hw {
        let norm = (0..c).map(|k| t[k * hw + p].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            out[k * hw + p] /= norm + 1e-10;
        }
    }
    out
}

fn single_view_distance<T: Real>(a: &Image, b: &Image, psi: &FeatureNetPsi<T>) -> Result<f64> {
    let fa = psi.extract(&a.to_tensor::<T>())?;
    let fb = psi.extract(&b.to_tensor::<T>())?;
    let mut total = 0.0;
    for (ta, tb) in fa.iter().zip(&fb) {
        let c = ta.shape()[0];
        let na = unit_normalized(&ta.to_f64_vec(), c);
        let nb = unit_normalized(&tb.to_f64_vec(), c);
        let sq: f64 = na.iter().zip(&nb).map(|(x, y)| (x - y).powi(2)).sum();
        total += sq / na.len() as f64;
    }
    Ok(total / fa.len() as f64)
}

/// The flips and rotations that keep an `h × w` extent.
fn orientations(h: usize, w: usize) -> Vec<Augmentation> {
    let turns: &[u8] = if h == w { &[0, 1, 2, 3] } else { &[0, 2] };
    turns
        .iter()
        .flat_map(|&quarter_turns| {
            [false, true].map(|flip_horizontal| Augmentation {
                flip_horizontal,
                flip_vertical: false,
                quarter_turns,
            })
        })
        .collect()
}

/// DFD: mean over feature taps of the mean squared difference between
/// per-position unit-normalized features, averaged over every flip and
/// rotation of the pair so that joint augmentation leaves it unchanged.
pub fn feature_distance<T: Real>(a: &Image, b: &Image, psi: &FeatureNetPsi<T>) -> Result<f64> {
    check_extent(a, b)?;
    let views = orientations(a.height(), a.width());
    let mut terms = Vec::with_capacity(views.len());
    for aug in &views {
        let (va, vb) = (aug.apply(a).expect("extent kept"), aug.apply(b).expect("extent kept"));
        terms.push(single_view_distance(&va, &vb, psi)?);
    }
    Ok(exact::sum(terms) / views.len() as f64)
}

/// Mean absolute difference of per-channel means.
pub fn color_error(a: &Image, b: &Image) -> Result<f64> {
    check_extent(a, b)?;
    let (ma, mb) = (a.channel_means(), b.channel_means());
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub dfd: f64,
}

/// Per-image rows and their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = MetricRow {
            id: "mean".into(),
            psnr: avg(|r| r.psnr),
            ms_ssim: avg(|r| r.ms_ssim),
            dfd: avg(|r| r.dfd),
        };
        Ok(MetricReport { rows, mean })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }
}

/// Scores one output against its reference.
pub fn score<T: Real>(id: impl Into<String>, output: &Image, reference: &Image, psi: &FeatureNetPsi<T>) -> Result<MetricRow> {
    Ok(MetricRow {
        id: id.into(),
        psnr: psnr(output, reference)?,
        ms_ssim: ms_ssim(output, reference)?,
        dfd: feature_distance(output, reference, psi)?,
    })
}
