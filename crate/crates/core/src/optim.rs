//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::DivergedGradient {
            index: i,
            value: grads[i],
        });
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        assert_eq!(st.m, vec![0.45, 0.45]);
        assert!((st.v[0] - 0.24975).abs() < 1e-15);

        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.m, vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_hand_computed() {
        let g = [0.5, -2.0, 1e-3];
        let lr = 0.01;
        let mut p = vec![1.0, 1.0, 1.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        // m = 0.1 g, v = 0.001 g^2; m_hat = g, v_hat = g^2 -> step = lr g / (|g| + eps)
        let expected = [
            1.0 - 0.01 * 0.5 / (0.5 + 1e-8),
            1.0 + 0.01 * 2.0 / (2.0 + 1e-8),
            1.0 - 0.01 * 1e-3 / (1e-3 + 1e-8),
        ];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut theta = vec![0.0];
        let mut st = AdamState::new(1);
        for _ in 0..500 {
            let g = [2.0 * (theta[0] - 3.0)];
            adam_step(&mut theta, &g, &mut st, 0.1).unwrap();
        }
        assert!((theta[0] - 3.0).abs() < 1e-3, "theta = {}", theta[0]);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        let e = adam_step(&mut p, &[0.0, f64::NAN], &mut st, 0.1).unwrap_err();
        assert!(matches!(e, Error::DivergedGradient { index: 1, .. }));
    }
}
