use super::{Real, Result, Tensor, TensorError};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers and step count for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_param(param: &Tensor<T>) -> Self {
        AdamState {
            m: vec![T::zero(); param.numel()],
            v: vec![T::zero(); param.numel()],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` from its current gradient.
///
/// An all-zero gradient leaves the parameter and the state untouched, so a
/// window in which nothing was learned never moves the weights. The
/// gradient buffer itself is left as is; callers zero it explicitly.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let grad = param.grad().ok_or(TensorError::MissingGrad)?.to_vec();
    if state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(TensorError::DataLength {
            shape: param.shape().to_vec(),
            expected: param.numel(),
            actual: state.m.len(),
        });
    }
    if grad.iter().all(|g| *g == T::zero()) {
        return Ok(());
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.epsilon));
    let data = param.data_mut();
    for (i, &g) in grad.iter().enumerate() {
        let m = b1 * state.m[i] + (one - b1) * g;
        let v = b2 * state.v[i] + (one - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over an ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Adam {
            config,
            states: params.into_iter().map(AdamState::for_param).collect(),
        }
    }

    pub fn states(&self) -> &[AdamState<T>] {
        &self.states
    }

    /// Steps every parameter, in the order the optimizer was built with.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        let mut count = 0;
        for (p, s) in params.into_iter().zip(self.states.iter_mut()) {
            adam_step(p, s, &self.config)?;
            count += 1;
        }
        if count != self.states.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!("expected {} parameters, got {count}", self.states.len()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::param(&[2], vec![0.5, -0.5]).unwrap();
        p.accumulate_grad(&[1.0, 1.0]).unwrap();
        let mut s = AdamState::for_param(&p);
        adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        for (after, before) in p.data().iter().zip([0.5, -0.5]) {
            assert!((after - before + 1e-4).abs() < 1e-11);
        }
        assert_eq!(s.t, 1);
        assert_eq!(p.grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_grad_is_noop_even_with_history() {
        let mut p = Tensor::<f64>::param(&[1], vec![1.0]).unwrap();
        let mut s = AdamState::for_param(&p);
        let cfg = AdamConfig::default();
        p.accumulate_grad(&[3.0]).unwrap();
        adam_step(&mut p, &mut s, &cfg).unwrap();
        let snapshot = (p.data().to_vec(), s.clone());
        p.zero_grad();
        adam_step(&mut p, &mut s, &cfg).unwrap();
        assert_eq!(p.data(), snapshot.0.as_slice());
        assert_eq!(s, snapshot.1);
    }

    #[test]
    fn missing_grad_errors() {
        let mut p = Tensor::<f32>::param(&[1], vec![1.0]).unwrap();
        let mut s = AdamState::for_param(&p);
        assert_eq!(
            adam_step(&mut p, &mut s, &AdamConfig::default()),
            Err(TensorError::MissingGrad)
        );
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(w) = w², grad = 2w, simulated directly.
        let mut w = Tensor::<f64>::param(&[], vec![1.0]).unwrap();
        let mut s = AdamState::for_param(&w);
        let cfg = AdamConfig::default();
        let mut prev = 1.0;
        for _ in 0..10 {
            w.zero_grad();
            let g = 2.0 * w.data()[0];
            w.accumulate_grad(&[g]).unwrap();
            adam_step(&mut w, &mut s, &cfg).unwrap();
            let f = w.data()[0] * w.data()[0];
            assert!(f < prev);
            prev = f;
        }
        assert_eq!(s.t, 10);
    }
}
