//! Feature-space and pixel-space losses, recorded on a [`Tape`].
//!
//! A feature set is a slice of per-tap `[C,H,W]` variables. Every loss
//! returns a rank-0 variable.

use crate::imaging::LUMA;
use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a)?, tape.shape(b)?);
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

fn check_taps(op: &'static str, a: &[Var], b: &[Var]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(invalid(op, format!("tap counts {} and {} differ or are zero", a.len(), b.len())));
    }
    Ok(())
}

/// Mean of `(a-b)²`.
pub fn mse<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mse", a, b)?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

fn mean_of<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Mean over taps of the per-tap mean squared difference.
pub fn perceptual_loss<T: Real>(tape: &mut Tape<T>, fa: &[Var], fb: &[Var]) -> Result<Var> {
    check_taps("perceptual_loss", fa, fb)?;
    let terms = fa
        .iter()
        .zip(fb)
        .map(|(&a, &b)| mse(tape, a, b))
        .collect::<Result<Vec<_>>>()?;
    mean_of(tape, &terms)
}

/// Bandwidth and stabilizer of the contextual loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextualParams {
    pub bandwidth: f64,
    pub epsilon: f64,
}

impl Default for ContextualParams {
    fn default() -> Self {
        ContextualParams {
            bandwidth: 0.5,
            epsilon: 1e-5,
        }
    }
}

impl ContextualParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(invalid("contextual_loss", "bandwidth must be > 0"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("contextual_loss", "epsilon must be > 0"));
        }
        Ok(())
    }
}

/// `[C,H,W]` to one row per spatial position: `[H·W, C]`.
fn positions<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<(Var, usize, usize)> {
    let shape = tape.shape(f)?.to_vec();
    if shape.len() != 3 {
        return Err(invalid("contextual_loss", format!("expected [C,H,W] features, got {shape:?}")));
    }
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let flat = tape.reshape(f, &[c, n])?;
    Ok((tape.transpose(flat)?, n, c))
}

/// Rows scaled to unit length; `ε²` under the root keeps zero rows finite.
fn unit_rows<T: Real>(tape: &mut Tape<T>, x: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let sq = tape.square(x)?;
    let n2 = tape.sum_axis(sq, 1)?;
    let n2 = tape.shift(n2, eps * eps)?;
    let norm = tape.sqrt(n2)?;
    let norm = tape.broadcast_to(norm, &shape)?;
    tape.div(x, norm)
}

fn contextual_tap<T: Real>(tape: &mut Tape<T>, fx: Var, fy: Var, p: &ContextualParams) -> Result<Var> {
    let (x, nx, cx) = positions(tape, fx)?;
    let (y, ny, cy) = positions(tape, fy)?;
    if cx != cy {
        return Err(TensorError::ShapeMismatch {
            op: "contextual_loss",
            lhs: tape.shape(fx)?.to_vec(),
            rhs: tape.shape(fy)?.to_vec(),
        });
    }
    let mu = tape.sum_axis(y, 0)?;
    let mu = tape.scale(mu, 1.0 / ny as f64)?;
    let mu_x = tape.broadcast_to(mu, &[nx, cx])?;
    let mu_y = tape.broadcast_to(mu, &[ny, cy])?;
    let x = tape.sub(x, mu_x)?;
    let y = tape.sub(y, mu_y)?;
    let x = unit_rows(tape, x, p.epsilon)?;
    let y = unit_rows(tape, y, p.epsilon)?;
    let yt = tape.transpose(y)?;
    let cos = tape.matmul(x, yt)?;
    let d = tape.scale(cos, -1.0)?;
    let d = tape.shift(d, 1.0)?;
    let dmin = tape.min_axis(d, 1)?;
    let dmin = tape.shift(dmin, p.epsilon)?;
    let dmin = tape.broadcast_to(dmin, &[nx, ny])?;
    let rel = tape.div(d, dmin)?;
    let z = tape.scale(rel, -1.0 / p.bandwidth)?;
    let z = tape.shift(z, 1.0 / p.bandwidth)?;
    let w = tape.exp(z)?;
    let total = tape.sum_axis(w, 1)?;
    let total = tape.broadcast_to(total, &[nx, ny])?;
    let cx_ij = tape.div(w, total)?;
    let best = tape.max_axis(cx_ij, 0)?;
    let score = tape.mean(best)?;
    let log = tape.ln(score)?;
    tape.scale(log, -1.0)
}

/// Contextual loss of generated features `fa` against target features
/// `fb`, averaged over taps. Spatial extents may differ between the sets.
pub fn contextual_loss<T: Real>(
    tape: &mut Tape<T>,
    fa: &[Var],
    fb: &[Var],
    params: &ContextualParams,
) -> Result<Var> {
    params.validate()?;
    check_taps("contextual_loss", fa, fb)?;
    let terms = fa
        .iter()
        .zip(fb)
        .map(|(&a, &b)| contextual_tap(tape, a, b, params))
        .collect::<Result<Vec<_>>>()?;
    mean_of(tape, &terms)
}

/// Sum over taps of the mean squared difference.
pub fn feature_sq_distance<T: Real>(tape: &mut Tape<T>, fa: &[Var], fb: &[Var]) -> Result<Var> {
    check_taps("triplet_loss", fa, fb)?;
    let mut total: Option<Var> = None;
    for (&a, &b) in fa.iter().zip(fb) {
        let d = mse(tape, a, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// `max(d(a,p) − d(a,n) + margin, 0)` with size-normalized squared
/// distances summed over taps.
pub fn triplet_loss<T: Real>(
    tape: &mut Tape<T>,
    anchor: &[Var],
    positive: &[Var],
    negative: &[Var],
    margin: f64,
) -> Result<Var> {
    let dp = feature_sq_distance(tape, anchor, positive)?;
    let dn = feature_sq_distance(tape, anchor, negative)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.shift(gap, margin)?;
    tape.relu(gap)
}

/// MSE between Gaussian-blurred `[3,H,W]` images.
pub fn color_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, sigma: f64) -> Result<Var> {
    same_shape(tape, "color_loss", a, b)?;
    let ba = tape.gaussian_blur(a, sigma)?;
    let bb = tape.gaussian_blur(b, sigma)?;
    mse(tape, ba, bb)
}

fn luma<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let w = Tensor::new(&[1, 3, 1, 1], LUMA.iter().map(|&v| T::lit(v)).collect())?;
    let w = tape.constant(&w);
    let b = tape.constant(&Tensor::zeros(&[1])?);
    tape.conv2d(x, w, b, 1, 0)
}

/// MSE between the luma planes of two `[3,H,W]` images.
pub fn texture_loss<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "texture_loss", a, b)?;
    let ga = luma(tape, a)?;
    let gb = luma(tape, b)?;
    mse(tape, ga, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLoss {
    L1,
    Mse,
}

pub fn pixel_loss<T: Real>(tape: &mut Tape<T>, kind: PixelLoss, a: Var, b: Var) -> Result<Var> {
    match kind {
        PixelLoss::Mse => mse(tape, a, b),
        PixelLoss::L1 => {
            same_shape(tape, "pixel_loss", a, b)?;
            let d = tape.sub(a, b)?;
            let d = tape.abs(d)?;
            tape.mean(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.input(shape, data.to_vec()).unwrap()
    }

    /// Points as a `[2,1,n]` feature map.
    fn points(tape: &mut Tape<f64>, pts: &[[f64; 2]]) -> Var {
        let mut data: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        data.extend(pts.iter().map(|p| p[1]));
        input(tape, &[2, 1, pts.len()], &data)
    }

    #[test]
    fn perceptual_examples() {
        let mut t = Tape::new();
        let a = input(&mut t, &[2], &[1.0, 2.0]);
        let b = input(&mut t, &[2], &[1.0, 4.0]);
        let l = perceptual_loss(&mut t, &[a], &[b]).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 2.0);
        let l = perceptual_loss(&mut t, &[a, b], &[a, b]).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 0.0);
        let c = input(&mut t, &[3], &[1.0, 4.0, 0.0]);
        assert!(perceptual_loss(&mut t, &[a], &[c]).is_err());
        assert!(perceptual_loss(&mut t, &[a], &[a, b]).is_err());
    }

    #[test]
    fn contextual_self_match_is_near_zero() {
        let mut t = Tape::new();
        let pts = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5], [0.3, -1.0]];
        let a = points(&mut t, &pts);
        let b = points(&mut t, &pts);
        let l = contextual_loss(&mut t, &[a], &[b], &ContextualParams::default()).unwrap();
        let v = t.scalar(l).unwrap();
        assert!((0.0..0.01).contains(&v), "{v}");
    }

    #[test]
    fn contextual_uniform_affinity_gives_log_n() {
        let mut t = Tape::new();
        // y has zero mean, so centering is a no-op; x is orthogonal to both.
        let y = points(&mut t, &[[1.0, 0.0], [-1.0, 0.0]]);
        let x = points(&mut t, &[[0.0, 1.0]]);
        let l = contextual_loss(&mut t, &[x], &[y], &ContextualParams::default()).unwrap();
        assert!((t.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contextual_ignores_generated_order() {
        let mut t = Tape::new();
        let xs = [[0.2, 0.9], [1.0, -0.3], [-0.7, -0.1]];
        let ys = [[0.5, 0.5], [-0.4, 0.8], [0.9, -0.9], [0.1, 0.0]];
        let y = points(&mut t, &ys);
        let x1 = points(&mut t, &xs);
        let x2 = points(&mut t, &[xs[2], xs[0], xs[1]]);
        let p = ContextualParams::default();
        let a = contextual_loss(&mut t, &[x1], &[y], &p).unwrap();
        let b = contextual_loss(&mut t, &[x2], &[y], &p).unwrap();
        assert!((t.scalar(a).unwrap() - t.scalar(b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn contextual_params_are_validated() {
        let mut t = Tape::new();
        let x = points(&mut t, &[[0.0, 1.0]]);
        let bad = ContextualParams {
            bandwidth: 0.0,
            ..Default::default()
        };
        assert!(contextual_loss(&mut t, &[x], &[x], &bad).is_err());
    }

    #[test]
    fn triplet_examples() {
        let mut t = Tape::new();
        let a = input(&mut t, &[1], &[0.3]);
        let l = triplet_loss(&mut t, &[a], &[a], &[a], 1.0).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 1.0);

        // single-element taps: squared distance equals the squared gap
        let zero = input(&mut t, &[1], &[0.0]);
        let p = input(&mut t, &[1], &[0.2f64.sqrt()]);
        let n = input(&mut t, &[1], &[1.5f64.sqrt()]);
        let l = triplet_loss(&mut t, &[zero], &[p], &[n], 1.0).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 0.0);

        let p = input(&mut t, &[1], &[0.5f64.sqrt()]);
        let n = input(&mut t, &[1], &[0.3f64.sqrt()]);
        let l = triplet_loss(&mut t, &[zero], &[p], &[n], 1.0).unwrap();
        assert!((t.scalar(l).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn color_loss_of_constants() {
        let mut t = Tape::new();
        let a = input(&mut t, &[3, 8, 8], &[0.2; 192]);
        let b = input(&mut t, &[3, 8, 8], &[0.4; 192]);
        let l = color_loss(&mut t, a, b, 3.0).unwrap();
        assert!((t.scalar(l).unwrap() - 0.04).abs() < 1e-12);
        let l = color_loss(&mut t, a, a, 3.0).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn texture_loss_is_color_blind() {
        let mut t = Tape::new();
        let red: Vec<f64> = [1.0, 0.0, 0.0].iter().flat_map(|&v| vec![v; 16]).collect();
        // same luma as pure red: 0.299 = 0.587·g + 0.114·b with g = 0.4
        let b_val = (0.299 - 0.587 * 0.4) / 0.114;
        let other: Vec<f64> = [0.0, 0.4, b_val].iter().flat_map(|&v| vec![v; 16]).collect();
        let a = input(&mut t, &[3, 4, 4], &red);
        let b = input(&mut t, &[3, 4, 4], &other);
        let l = texture_loss(&mut t, a, b).unwrap();
        assert!(t.scalar(l).unwrap() < 1e-24);
    }

    #[test]
    fn pixel_examples() {
        let mut t = Tape::new();
        let a = input(&mut t, &[2], &[0.0, 1.0]);
        let b = input(&mut t, &[2], &[1.0, 1.0]);
        for kind in [PixelLoss::L1, PixelLoss::Mse] {
            let l = pixel_loss(&mut t, kind, a, b).unwrap();
            assert_eq!(t.scalar(l).unwrap(), 0.5);
            let l = pixel_loss(&mut t, kind, a, a).unwrap();
            assert_eq!(t.scalar(l).unwrap(), 0.0);
        }
    }

    #[test]
    fn l1_subgradient_is_zero_at_equality() {
        let mut t = Tape::new();
        let p = Tensor::<f64>::param(&[2], vec![0.5, 0.5]).unwrap();
        let a = t.param(&p);
        let b = input(&mut t, &[2], &[0.5, 0.0]);
        let l = pixel_loss(&mut t, PixelLoss::L1, a, b).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p.id()).unwrap(), &[0.0, 0.5]);
    }
}
