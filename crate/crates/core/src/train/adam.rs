use super::TrainError;
use crate::autodiff::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], config: AdamConfig) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
///
/// A tensor whose gradient is entirely zero keeps its values; its moments
/// still decay.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::GradientShape(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::GradientShape(format!(
                "{name}: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let skip = grads[i].is_all_zero();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..g.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
        }
        if skip {
            continue;
        }
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_set(1.5);
        let mut s = AdamState::new(&p.shapes(), AdamConfig::default());
        adam_step(&mut p, &[Tensor::scalar(2.0)], &mut s, 0.1).unwrap();
        let after_one = p.get(0).get(0, 0);
        let m_before = s.m[0].get(0, 0);
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        assert_eq!(p.get(0).get(0, 0), after_one);
        assert_eq!(s.m[0].get(0, 0), 0.9 * m_before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = scalar_set(0.0);
        let mut s = AdamState::new(&p.shapes(), AdamConfig::default());
        let lr = 0.01;
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, lr).unwrap();
            let x = p.get(0).get(0, 0);
            last_step = prev - x;
            prev = x;
        }
        // With g = 1 the bias-corrected ratio m_hat / sqrt(v_hat) is exactly 1.
        assert!((last_step - lr).abs() < 1e-9, "{last_step}");
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = scalar_set(0.0);
        let mut s = AdamState::new(&p.shapes(), AdamConfig::default());
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(ref n) if n == "x"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = scalar_set(0.3);
            let mut s = AdamState::new(&p.shapes(), AdamConfig::default());
            for i in 0..10 {
                adam_step(&mut p, &[Tensor::scalar((i as f64).sin())], &mut s, 0.05).unwrap();
            }
            p.get(0).get(0, 0).to_bits()
        };
        assert_eq!(run(), run());
    }
}
