//! Meta-learned learning-rate factor.
//!
//! An update batch is split into an older meta-training half and a newer
//! meta-validation half. The factor `β ∈ [0, 1]` is chosen so that one SGD
//! step of size `γβ` on the meta-training half minimises the loss on the
//! meta-validation half:
//!
//! ```text
//! β = argmin_β  L_val(θ − γβ ∇L_train(θ))
//! ```
//!
//! Two solvers are provided. [`fs_select`] scans a finite candidate set of
//! rates; [`gd_meta`] writes `β = σ(α)` and runs a few gradient steps on `α`.
//! Because the trial parameters are affine in `σ(α)`, the derivative
//!
//! ```text
//! dL_val/dα = −γ σ(α)(1 − σ(α)) ⟨∇L_train(θ), ∇L_val(θ̃)⟩
//! ```
//!
//! needs only first-order gradients. Estimates are smoothed by a moving
//! average over the last `q` values ([`MetaState::smooth_beta`]).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Objective, ParamVector};

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Finite set of candidate learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CandidateSet(Vec<f64>);

impl CandidateSet {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("candidate set is empty"));
        }
        for (i, r) in rates.iter().enumerate() {
            if !(r.is_finite() && *r >= 0.0) {
                return Err(Error::invalid(format!("candidate rate {r} must be finite and non-negative")));
            }
            if rates[..i].contains(r) {
                return Err(Error::invalid(format!("duplicate candidate rate {r}")));
            }
        }
        Ok(CandidateSet(rates))
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    /// Rates not above `gamma`, ascending.
    pub fn admissible(&self, gamma: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self.0.iter().copied().filter(|&c| c <= gamma).collect();
        out.sort_by(f64::total_cmp);
        out
    }
}

impl Default for CandidateSet {
    fn default() -> Self {
        CandidateSet(vec![1.0, 0.1, 0.01, 0.001, 0.0001, 0.0])
    }
}

impl TryFrom<Vec<f64>> for CandidateSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        CandidateSet::new(v)
    }
}

impl From<CandidateSet> for Vec<f64> {
    fn from(c: CandidateSet) -> Self {
        c.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdMetaConfig {
    pub k: usize,
    pub eta: f64,
}

impl Default for GdMetaConfig {
    fn default() -> Self {
        GdMetaConfig { k: 3, eta: 0.1 }
    }
}

impl GdMetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Picks `β` with `γβ` the admissible candidate minimising the
/// meta-validation loss after one trial step. Ties go to the smaller rate.
/// Candidates whose trial step diverges are skipped.
pub fn fs_select<T, V>(
    train: &T,
    val: &V,
    theta: &ParamVector,
    gamma: f64,
    candidates: &CandidateSet,
) -> Result<f64>
where
    T: Objective + ?Sized,
    V: Objective + ?Sized,
{
    let rates = candidates.admissible(gamma);
    if rates.is_empty() {
        return Err(Error::invalid(format!("no candidate rate is at most gamma = {gamma}")));
    }
    let g_train = train.grad(theta)?;
    let mut best: Option<(f64, f64)> = None;
    for c in rates {
        let trial = axpy(theta, -c, &g_train)?;
        let loss = if trial.is_finite() {
            val.loss(&trial).unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        if !loss.is_finite() {
            continue;
        }
        if best.map_or(true, |(_, l)| loss < l) {
            best = Some((c, loss));
        }
    }
    let (rate, _) = best.ok_or(Error::NonFinite("every candidate step diverged"))?;
    Ok(if rate == 0.0 { 0.0 } else { (rate / gamma).min(1.0) })
}

/// `dL_val/dα` at the trial point `θ − γσ(α)g_train`.
pub fn alpha_gradient<V>(val: &V, theta: &ParamVector, g_train: &ParamVector, gamma: f64, alpha: f64) -> Result<f64>
where
    V: Objective + ?Sized,
{
    let s = sigmoid(alpha);
    let trial = axpy(theta, -gamma * s, g_train)?;
    if !trial.is_finite() {
        return Err(Error::NonFinite("meta trial parameters"));
    }
    let g_val = val.grad(&trial)?;
    let d = -gamma * s * (1.0 - s) * dot(g_train, &g_val)?;
    if !d.is_finite() {
        return Err(Error::NonFinite("meta gradient"));
    }
    Ok(d)
}

/// Runs `cfg.k` gradient steps on `α` starting from `alpha_in`; returns
/// `(σ(α_out), α_out)`.
pub fn gd_meta<T, V>(
    train: &T,
    val: &V,
    theta: &ParamVector,
    gamma: f64,
    cfg: &GdMetaConfig,
    alpha_in: f64,
) -> Result<(f64, f64)>
where
    T: Objective + ?Sized,
    V: Objective + ?Sized,
{
    cfg.validate()?;
    let g_train = train.grad(theta)?;
    let mut alpha = alpha_in;
    for _ in 0..cfg.k {
        alpha -= cfg.eta * alpha_gradient(val, theta, &g_train, gamma, alpha)?;
    }
    if !alpha.is_finite() {
        return Err(Error::NonFinite("meta parameter alpha"));
    }
    Ok((sigmoid(alpha), alpha))
}

/// Per-stream meta state: the recent `β` estimates and the GD parameter `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    q: usize,
    history: VecDeque<f64>,
    pub alpha: f64,
}

impl MetaState {
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::invalid("moving-average window q must be at least 1"));
        }
        Ok(MetaState {
            q,
            history: VecDeque::with_capacity(q),
            alpha: 0.0,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// The last `min(q, count)` estimates, oldest first.
    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    /// Records `beta_v` and returns the mean of the most recent `q` values.
    pub fn smooth_beta(&mut self, beta_v: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&beta_v) {
            return Err(Error::invalid(format!("beta estimate {beta_v} outside [0, 1]")));
        }
        if self.history.len() == self.q {
            self.history.pop_front();
        }
        self.history.push_back(beta_v);
        let mean = self.history.iter().sum::<f64>() / self.history.len() as f64;
        Ok(mean.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_grad;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_slice(v).unwrap()
    }

    /// `Σ scale·(θ_i − center_i)²`
    struct Quadratic {
        center: Vec<f64>,
        scale: f64,
    }

    impl Objective for Quadratic {
        fn loss(&self, theta: &ParamVector) -> Result<f64> {
            Ok(theta.as_slice().iter().zip(&self.center).map(|(t, c)| self.scale * (t - c) * (t - c)).sum())
        }

        fn grad(&self, theta: &ParamVector) -> Result<ParamVector> {
            let g: Vec<f64> = theta.as_slice().iter().zip(&self.center).map(|(t, c)| 2.0 * self.scale * (t - c)).collect();
            ParamVector::new(theta.layout().clone(), g)
        }
    }

    /// `⟨slope, θ⟩`
    struct Linear(Vec<f64>);

    impl Objective for Linear {
        fn loss(&self, theta: &ParamVector) -> Result<f64> {
            Ok(theta.as_slice().iter().zip(&self.0).map(|(a, b)| a * b).sum())
        }

        fn grad(&self, theta: &ParamVector) -> Result<ParamVector> {
            ParamVector::new(theta.layout().clone(), self.0.clone())
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-15);
        for a in [-30.0, -2.5, 0.3, 7.0] {
            assert!((sigmoid(a) - (1.0 - sigmoid(-a))).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn candidate_set_validation() {
        assert_eq!(CandidateSet::default().rates(), &[1.0, 0.1, 0.01, 0.001, 0.0001, 0.0]);
        assert!(CandidateSet::new(vec![0.1, 0.1]).is_err());
        assert!(CandidateSet::new(vec![-0.1]).is_err());
        assert!(CandidateSet::new(vec![]).is_err());
        assert_eq!(CandidateSet::default().admissible(0.01), vec![0.0, 0.0001, 0.001, 0.01]);
    }

    #[test]
    fn fs_picks_best_candidate() {
        let train = Linear(vec![1.0]);
        let val = Quadratic { center: vec![0.9], scale: 1.0 };
        let beta = fs_select(&train, &val, &pv(&[1.0]), 1.0, &CandidateSet::default()).unwrap();
        assert_eq!(beta, 0.1);
    }

    #[test]
    fn fs_returns_zero_when_no_step_helps() {
        // validation minimum sits at θ_t and the training gradient points away from it
        let train = Linear(vec![-1.0]);
        let val = Quadratic { center: vec![1.0], scale: 1.0 };
        let beta = fs_select(&train, &val, &pv(&[1.0]), 0.1, &CandidateSet::default()).unwrap();
        assert_eq!(beta, 0.0);
    }

    #[test]
    fn fs_breaks_ties_toward_smaller_rate() {
        let train = Linear(vec![0.0, 0.0]);
        let val = Quadratic { center: vec![3.0, 1.0], scale: 1.0 };
        let beta = fs_select(&train, &val, &pv(&[1.0, 1.0]), 1.0, &CandidateSet::default()).unwrap();
        assert_eq!(beta, 0.0);
        let no_zero = CandidateSet::new(vec![0.1, 0.01]).unwrap();
        let beta = fs_select(&train, &val, &pv(&[1.0, 1.0]), 0.1, &no_zero).unwrap();
        assert!((beta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn fs_excludes_rates_above_gamma() {
        // the unconstrained best rate is 1, but only rates ≤ 0.01 are allowed
        let train = Linear(vec![1.0]);
        let val = Quadratic { center: vec![0.0], scale: 1.0 };
        let beta = fs_select(&train, &val, &pv(&[1.0]), 0.01, &CandidateSet::default()).unwrap();
        assert_eq!(beta, 1.0);
        let only_big = CandidateSet::new(vec![1.0]).unwrap();
        assert!(fs_select(&train, &val, &pv(&[1.0]), 0.5, &only_big).is_err());
    }

    #[test]
    fn gd_single_step_matches_hand_computation() {
        let train = Linear(vec![2.0]);
        let val = Quadratic { center: vec![0.0], scale: 1.0 };
        let cfg = GdMetaConfig { k: 1, eta: 0.1 };
        let (beta, alpha) = gd_meta(&train, &val, &pv(&[1.0]), 0.1, &cfg, 0.0).unwrap();
        assert!((alpha - 0.009).abs() < 1e-15);
        assert!((beta - sigmoid(0.009)).abs() < 1e-15);
        assert!((beta - 0.50225).abs() < 1e-7);
    }

    #[test]
    fn gd_zero_training_gradient_keeps_alpha() {
        let train = Linear(vec![0.0, 0.0]);
        let val = Quadratic { center: vec![5.0, -1.0], scale: 2.0 };
        let (beta, alpha) = gd_meta(&train, &val, &pv(&[0.3, 0.2]), 0.5, &GdMetaConfig::default(), 1.3).unwrap();
        assert_eq!(alpha, 1.3);
        assert_eq!(beta, sigmoid(1.3));
    }

    #[test]
    fn alpha_gradient_matches_finite_difference() {
        let train = Quadratic { center: vec![0.4, -0.2, 1.0], scale: 0.7 };
        let val = Quadratic { center: vec![-0.1, 0.5, 0.3], scale: 1.3 };
        let theta = pv(&[1.0, 0.5, -0.5]);
        let g_train = train.grad(&theta).unwrap();
        for alpha in [-2.0, -0.3, 0.0, 0.8, 2.5] {
            let exact = alpha_gradient(&val, &theta, &g_train, 0.4, alpha).unwrap();
            let f = |a: &ParamVector| {
                let s = sigmoid(a.as_slice()[0]);
                val.loss(&axpy(&theta, -0.4 * s, &g_train)?)
            };
            let fd = finite_difference_grad(f, &pv(&[alpha]), 1e-6).unwrap().as_slice()[0];
            assert!((exact - fd).abs() / exact.abs().max(1e-8) < 1e-6, "{exact} vs {fd}");
        }
    }

    #[test]
    fn gd_step_reduces_convex_validation_loss() {
        let train = Linear(vec![1.0]);
        let theta = pv(&[2.0]);
        // minimum along the step direction lies beyond σ(0)=0.5 → α should grow
        let far = Quadratic { center: vec![1.2], scale: 1.0 };
        let (_, a) = gd_meta(&train, &far, &theta, 1.0, &GdMetaConfig { k: 1, eta: 0.5 }, 0.0).unwrap();
        assert!(a > 0.0);
        let near = Quadratic { center: vec![1.9], scale: 1.0 };
        let (_, a) = gd_meta(&train, &near, &theta, 1.0, &GdMetaConfig { k: 1, eta: 0.5 }, 0.0).unwrap();
        assert!(a < 0.0);
    }

    #[test]
    fn smoothing_examples() {
        let mut st = MetaState::new(5).unwrap();
        assert_eq!(st.smooth_beta(0.8).unwrap(), 0.8);

        let mut st = MetaState::new(2).unwrap();
        st.smooth_beta(0.2).unwrap();
        st.smooth_beta(0.4).unwrap();
        assert!((st.smooth_beta(0.6).unwrap() - 0.5).abs() < 1e-15);

        let mut st = MetaState::new(1).unwrap();
        for b in [0.3, 0.9, 0.0, 1.0] {
            assert_eq!(st.smooth_beta(b).unwrap(), b);
        }
        assert!(st.smooth_beta(1.2).is_err());
        assert!(MetaState::new(0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn smoothed_beta_stays_within_window(values in prop::collection::vec(0.0f64..=1.0, 1..30), q in 1usize..10) {
                let mut st = MetaState::new(q).unwrap();
                for v in values {
                    let out = st.smooth_beta(v).unwrap();
                    let lo = st.window().fold(f64::INFINITY, f64::min);
                    let hi = st.window().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out >= lo - 1e-15 && out <= hi + 1e-15);
                }
            }

            #[test]
            fn gd_beta_is_strictly_inside_unit_interval(
                theta in prop::collection::vec(-2.0f64..2.0, 3),
                c_train in prop::collection::vec(-2.0f64..2.0, 3),
                c_val in prop::collection::vec(-2.0f64..2.0, 3),
                gamma in 0.0f64..1.0,
                alpha in -5.0f64..5.0,
            ) {
                let train = Quadratic { center: c_train, scale: 1.0 };
                let val = Quadratic { center: c_val, scale: 1.0 };
                let (beta, a) = gd_meta(&train, &val, &pv(&theta), gamma, &GdMetaConfig::default(), alpha).unwrap();
                prop_assert!(beta > 0.0 && beta < 1.0);
                prop_assert!(a.is_finite());
            }

            #[test]
            fn fs_rate_is_admissible(
                theta in prop::collection::vec(-2.0f64..2.0, 2),
                c_val in prop::collection::vec(-2.0f64..2.0, 2),
                slope in prop::collection::vec(-3.0f64..3.0, 2),
                gi in 0usize..5,
            ) {
                let gamma = [1.0, 0.1, 0.01, 0.001, 0.0001][gi];
                let set = CandidateSet::default();
                let beta = fs_select(&Linear(slope), &Quadratic { center: c_val, scale: 1.0 }, &pv(&theta), gamma, &set).unwrap();
                prop_assert!((0.0..=1.0).contains(&beta));
                prop_assert!(set.admissible(gamma).iter().any(|&c| (c - gamma * beta).abs() <= 1e-12 * gamma));
            }
        }
    }
}
