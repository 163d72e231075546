//! Update rules: SGD with a scaled rate `γβ`, and RMSprop.

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPSILON: f64 = 1e-8;

/// Returns `θ − γβ∇`. `beta` must lie in `[0, 1]`.
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, gamma: f64, beta: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be a non-negative number, got {gamma}")));
    }
    if !theta.same_layout(grad) {
        return Err(Error::LayoutMismatch);
    }
    let rate = gamma * beta;
    if rate == 0.0 {
        return Ok(theta.clone());
    }
    let mut out = theta.clone();
    out.axpy_in_place(-rate, grad)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("sgd step"));
    }
    Ok(out)
}

/// Running average of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState {
    pub decay: f64,
    pub epsilon: f64,
    pub sq_avg: ParamVector,
}

impl RmspropState {
    pub fn new(like: &ParamVector) -> Self {
        RmspropState::with_constants(like, RMSPROP_DECAY, RMSPROP_EPSILON)
    }

    pub fn with_constants(like: &ParamVector, decay: f64, epsilon: f64) -> Self {
        RmspropState {
            decay,
            epsilon,
            sq_avg: ParamVector::zeros_like(like),
        }
    }
}

/// `v ← ρv + (1−ρ)g²`, then `θ ← θ − γ g / (√v + ε)`.
pub fn rmsprop_step(
    theta: &ParamVector,
    grad: &ParamVector,
    state: &RmspropState,
    gamma: f64,
) -> Result<(ParamVector, RmspropState)> {
    if !theta.same_layout(grad) || !theta.same_layout(&state.sq_avg) {
        return Err(Error::LayoutMismatch);
    }
    if !(0.0..1.0).contains(&state.decay) || !(state.epsilon > 0.0) {
        return Err(Error::invalid("rmsprop decay must lie in [0, 1) and epsilon be positive"));
    }
    let mut next = state.clone();
    let mut out = theta.clone();
    let rho = state.decay;
    for ((th, v), g) in out
        .as_mut_slice()
        .iter_mut()
        .zip(next.sq_avg.as_mut_slice())
        .zip(grad.as_slice())
    {
        *v = rho * *v + (1.0 - rho) * g * g;
        *th -= gamma * g / (v.sqrt() + state.epsilon);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("rmsprop step"));
    }
    Ok((out, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_slice(v).unwrap()
    }

    #[test]
    fn sgd_examples() {
        let theta = pv(&[1.0, 2.0]);
        let grad = pv(&[2.0, -4.0]);
        assert_eq!(sgd_step(&theta, &grad, 0.1, 0.0).unwrap(), theta);
        let half = sgd_step(&theta, &grad, 0.1, 0.5).unwrap();
        assert!((half.as_slice()[0] - 0.9).abs() < 1e-15);
        assert!((half.as_slice()[1] - 2.2).abs() < 1e-15);
        let full = sgd_step(&theta, &grad, 0.1, 1.0).unwrap();
        assert_eq!(full.as_slice(), &[1.0 - 0.2, 2.0 + 0.4]);
    }

    #[test]
    fn sgd_rejects_bad_beta() {
        let theta = pv(&[1.0]);
        assert!(sgd_step(&theta, &theta, 0.1, 1.5).is_err());
        assert!(sgd_step(&theta, &theta, 0.1, -0.1).is_err());
        assert!(sgd_step(&theta, &pv(&[1.0, 2.0]), 0.1, 0.5).is_err());
    }

    #[test]
    fn rmsprop_zero_gradient_only_decays() {
        let theta = pv(&[1.0, -1.0]);
        let mut state = RmspropState::new(&theta);
        state.sq_avg = pv(&[4.0, 1.0]);
        let (next, st) = rmsprop_step(&theta, &pv(&[0.0, 0.0]), &state, 0.1).unwrap();
        assert_eq!(next, theta);
        assert_eq!(st.sq_avg.as_slice(), &[0.9 * 4.0, 0.9]);
    }

    #[test]
    fn rmsprop_first_step() {
        let theta = pv(&[0.0, 0.0]);
        let g = [3.0, -0.5];
        let (next, st) = rmsprop_step(&theta, &pv(&g), &RmspropState::new(&theta), 0.01).unwrap();
        for i in 0..2 {
            let denom = 0.1f64.sqrt() * g[i].abs() + 1e-8;
            assert!((next.as_slice()[i] + 0.01 * g[i] / denom).abs() < 1e-15);
            let approx = -0.01 * g[i].signum() / 0.1f64.sqrt();
            assert!((next.as_slice()[i] - approx).abs() < 1e-8);
            assert!((st.sq_avg.as_slice()[i] - 0.1 * g[i] * g[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsprop_repeated_gradient_converges_to_gamma() {
        let mut theta = pv(&[0.0, 0.0]);
        let grad = pv(&[2.5, -0.01]);
        let mut state = RmspropState::new(&theta);
        let mut last_step = vec![0.0; 2];
        for _ in 0..400 {
            let (next, st) = rmsprop_step(&theta, &grad, &state, 0.05).unwrap();
            last_step = next.as_slice().iter().zip(theta.as_slice()).map(|(a, b)| a - b).collect();
            theta = next;
            state = st;
        }
        assert!((last_step[0] + 0.05).abs() < 1e-6);
        assert!((last_step[1] - 0.05).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn sgd_is_linear_in_beta(
            theta in prop::collection::vec(-5.0f64..5.0, 4),
            grad in prop::collection::vec(-5.0f64..5.0, 4),
            b1 in 0.0f64..0.5,
            b2 in 0.0f64..0.5,
        ) {
            let (theta, grad) = (pv(&theta), pv(&grad));
            let s1 = sgd_step(&theta, &grad, 0.3, b1).unwrap();
            let s2 = sgd_step(&theta, &grad, 0.3, b2).unwrap();
            let s12 = sgd_step(&theta, &grad, 0.3, b1 + b2).unwrap();
            for i in 0..4 {
                let lhs = s1.as_slice()[i] + s2.as_slice()[i] - 2.0 * theta.as_slice()[i];
                let rhs = s12.as_slice()[i] - theta.as_slice()[i];
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn rmsprop_keeps_sq_avg_nonnegative(
            grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..20),
        ) {
            let mut theta = pv(&[0.0; 3]);
            let mut state = RmspropState::new(&theta);
            for g in grads {
                let (t, s) = rmsprop_step(&theta, &pv(&g), &state, 0.01).unwrap();
                prop_assert!(s.sq_avg.as_slice().iter().all(|&v| v >= 0.0));
                theta = t;
                state = s;
            }
        }
    }
}
