//! Adam parameter update with bias correction.

use crate::error::{Error, Result};

use super::Scalar;

/// Optimizer hyper-parameters. Defaults follow the training configuration:
/// lr 1e-4 and the standard moment decays.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One bias-corrected Adam step, t >= 1. A non-finite gradient rejects the
/// whole step before any state is touched.
pub fn adam_update<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    t: u64,
    hyper: AdamHyper,
) -> Result<()> {
    assert!(t >= 1, "adam step count must start at 1");
    assert_eq!(value.len(), grad.len());
    assert_eq!(value.len(), state.m.len());
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient element {idx} is {} — step rejected",
            grad[idx]
        )));
    }
    let b1 = T::of(hyper.beta1);
    let b2 = T::of(hyper.beta2);
    let one = T::one();
    let corr1 = T::of(1.0 - hyper.beta1.powi(t as i32));
    let corr2 = T::of(1.0 - hyper.beta2.powi(t as i32));
    let lr = T::of(hyper.lr);
    let eps = T::of(hyper.eps);
    for ((p, &g), (m, v)) in value
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut value = vec![1.5f64, -0.25, 3.0];
        let mut state = AdamState::zeros(3);
        adam_update(&mut value, &[0.0; 3], &mut state, 1, AdamHyper::default()).unwrap();
        assert_eq!(value, vec![1.5, -0.25, 3.0]);
    }

    #[test]
    fn single_scalar_matches_hand_evaluated_update() {
        // g=1, t=1: m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let hyper = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        let mut value = vec![2.0f64];
        let mut state = AdamState::zeros(1);
        adam_update(&mut value, &[1.0], &mut state, 1, hyper).unwrap();
        let expect = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((value[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut value = vec![1.0f32, 2.0];
        let mut state = AdamState::zeros(2);
        let err = adam_update(
            &mut value,
            &[0.5, f32::NAN],
            &mut state,
            1,
            AdamHyper::default(),
        );
        assert!(err.is_err());
        assert_eq!(value, vec![1.0, 2.0]);
        assert_eq!(state.m, vec![0.0, 0.0]);
    }

    #[test]
    fn default_learning_rate_is_1e_4() {
        assert_eq!(AdamHyper::default().lr, 1e-4);
        assert_eq!(AdamHyper::default().beta1, 0.9);
        assert_eq!(AdamHyper::default().beta2, 0.999);
        assert_eq!(AdamHyper::default().eps, 1e-8);
    }
}
