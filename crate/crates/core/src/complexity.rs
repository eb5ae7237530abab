//! Sample-complexity quantities for the variance-bonus planner.
//!
//! All logarithms are natural. The step bound is an order-of-magnitude
//! figure reported with an implied constant of 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComplexityError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("Lipschitz constants for reward and transition are required")]
    MissingLipschitz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityInputs {
    /// Upper bound of the target value range `[0, v_max]`.
    pub v_max: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub epsilon1: f64,
    pub delta1: f64,
    pub gamma: f64,
    pub noise_variance: f64,
    pub dims: usize,
    pub side_lengths: Vec<f64>,
    #[serde(default)]
    pub lipschitz_r: Option<f64>,
    #[serde(default)]
    pub lipschitz_p: Option<f64>,
    #[serde(default)]
    pub lipschitz_q: Option<f64>,
}

impl ComplexityInputs {
    pub fn validate(&self) -> Result<(), ComplexityError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(ComplexityError::InvalidInput(format!(
                    "{name} = {v} must lie in (0, 1)"
                )))
            }
        };
        unit("epsilon", self.epsilon)?;
        unit("delta", self.delta)?;
        unit("epsilon1", self.epsilon1)?;
        unit("delta1", self.delta1)?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ComplexityError::InvalidInput(format!(
                "gamma = {} must lie in (0, 1)",
                self.gamma
            )));
        }
        if !(self.v_max > 0.0) {
            return Err(ComplexityError::InvalidInput("v_max must be positive".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(ComplexityError::InvalidInput(
                "noise_variance must be positive".into(),
            ));
        }
        if self.side_lengths.len() != self.dims {
            return Err(ComplexityError::InvalidInput(format!(
                "{} side lengths for {} dimensions",
                self.side_lengths.len(),
                self.dims
            )));
        }
        Ok(())
    }
}

/// Predictive-variance level below which the model is accurate to `epsilon1`
/// with probability `1 - delta1`: `2 w2 e1^2 / (V^2 ln(2 / d1))`.
pub fn sigma_tol(inputs: &ComplexityInputs) -> Result<f64, ComplexityError> {
    if !(inputs.delta1 > 0.0 && inputs.delta1 < 1.0) {
        return Err(ComplexityError::InvalidInput(format!(
            "delta1 = {} must lie in (0, 1)",
            inputs.delta1
        )));
    }
    if !(inputs.v_max > 0.0) {
        return Err(ComplexityError::InvalidInput("v_max must be positive".into()));
    }
    Ok(2.0 * inputs.noise_variance * inputs.epsilon1.powi(2)
        / (inputs.v_max.powi(2) * (2.0 / inputs.delta1).ln()))
}

/// Number of balls of diameter `d_max` covering the box with the given side
/// lengths: `2^m prod(L) / d_max^m`.
pub fn covering_bound(side_lengths: &[f64], d_max: f64, dims: usize) -> Result<f64, ComplexityError> {
    if !(d_max > 0.0) {
        return Err(ComplexityError::InvalidInput(format!(
            "d_max = {d_max} must be positive"
        )));
    }
    if side_lengths.len() != dims || side_lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(ComplexityError::InvalidInput(format!(
            "need {dims} positive side lengths, got {side_lengths:?}"
        )));
    }
    let m = dims as i32;
    Ok(2f64.powi(m) * side_lengths.iter().product::<f64>() / d_max.powi(m))
}

/// `(4 V^2 / (e^2 (1-g)^2)) ln(2 N / d) N` for covering number `N`.
pub fn zeta_bound(inputs: &ComplexityInputs, covering_number: f64) -> Result<f64, ComplexityError> {
    check_discount(inputs.gamma)?;
    if !(covering_number >= 1.0) {
        return Err(ComplexityError::InvalidInput(format!(
            "covering number {covering_number} must be >= 1"
        )));
    }
    let (v, e, g) = (inputs.v_max, inputs.epsilon, inputs.gamma);
    Ok(4.0 * v * v / (e * e * (1.0 - g).powi(2))
        * (2.0 * covering_number / inputs.delta).ln()
        * covering_number)
}

/// `(V zeta / (e (1-g))) ln(1/d) ln(1/(e (1-g)))`, implied constant 1.
pub fn step_bound(inputs: &ComplexityInputs, zeta: f64) -> Result<f64, ComplexityError> {
    check_discount(inputs.gamma)?;
    let scale = inputs.epsilon * (1.0 - inputs.gamma);
    Ok(inputs.v_max * zeta / scale * (1.0 / inputs.delta).ln() * (1.0 / scale).ln())
}

fn check_discount(gamma: f64) -> Result<(), ComplexityError> {
    if gamma >= 1.0 || gamma.is_nan() {
        return Err(ComplexityError::InvalidInput(format!(
            "gamma = {gamma} must be < 1; the bound diverges otherwise"
        )));
    }
    Ok(())
}

/// Exploration weights `(L_r / (2 w2), L_p / (2 w2))`.
pub fn beta_from_lipschitz(inputs: &ComplexityInputs) -> Result<(f64, f64), ComplexityError> {
    let (Some(lr), Some(lp)) = (inputs.lipschitz_r, inputs.lipschitz_p) else {
        return Err(ComplexityError::MissingLipschitz);
    };
    if !(inputs.noise_variance > 0.0) {
        return Err(ComplexityError::InvalidInput(
            "noise_variance must be positive".into(),
        ));
    }
    let denom = 2.0 * inputs.noise_variance;
    Ok((lr / denom, lp / denom))
}

/// Posterior variance at a point with kernel correlation `rho` to `n`
/// coincident observations, unit signal variance: `1 - n rho^2 / (n + w2)`.
pub fn repeated_point_variance(n: usize, rho: f64, noise_variance: f64) -> f64 {
    let n = n as f64;
    1.0 - n * rho * rho / (n + noise_variance)
}

/// Every quantity above for one set of inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub sigma_tol: f64,
    pub d_max: f64,
    pub covering_number: f64,
    pub zeta: f64,
    pub step_bound: f64,
    pub beta: Option<(f64, f64)>,
}

pub fn report(inputs: &ComplexityInputs, d_max: f64) -> Result<BoundReport, ComplexityError> {
    inputs.validate()?;
    let covering_number = covering_bound(&inputs.side_lengths, d_max, inputs.dims)?.max(1.0);
    let zeta = zeta_bound(inputs, covering_number)?;
    Ok(BoundReport {
        sigma_tol: sigma_tol(inputs)?,
        d_max,
        covering_number,
        zeta,
        step_bound: step_bound(inputs, zeta)?,
        beta: beta_from_lipschitz(inputs).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{FittedGp, GpHyperParams, TrainingSet};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn inputs() -> ComplexityInputs {
        ComplexityInputs {
            v_max: 1.0,
            epsilon: 0.5,
            delta: 0.1,
            epsilon1: 0.1,
            delta1: 0.1,
            gamma: 0.5,
            noise_variance: 0.01,
            dims: 2,
            side_lengths: vec![1.0, 1.0],
            lipschitz_r: None,
            lipschitz_p: None,
            lipschitz_q: None,
        }
    }

    #[test]
    fn sigma_tol_examples() {
        let v = sigma_tol(&inputs()).unwrap();
        assert_relative_eq!(v, 6.676e-5, max_relative = 1e-3);
        let zero = ComplexityInputs {
            epsilon1: 0.0,
            ..inputs()
        };
        assert_eq!(sigma_tol(&zero).unwrap(), 0.0);
        let double = ComplexityInputs {
            epsilon1: 0.2,
            ..inputs()
        };
        assert_relative_eq!(sigma_tol(&double).unwrap(), 4.0 * v, max_relative = 1e-12);
        let bad = ComplexityInputs {
            delta1: 1.0,
            ..inputs()
        };
        assert!(sigma_tol(&bad).is_err());
    }

    #[test]
    fn covering_examples() {
        assert_eq!(covering_bound(&[1.0, 1.0], 0.5, 2).unwrap(), 16.0);
        assert_eq!(covering_bound(&[2.0], 2.0, 1).unwrap(), 2.0);
        assert_eq!(covering_bound(&[1.0, 1.0], 0.25, 2).unwrap(), 64.0);
        assert!(covering_bound(&[1.0], 0.0, 1).is_err());
        assert!(covering_bound(&[1.0], 1.0, 2).is_err());
    }

    #[test]
    fn zeta_example() {
        let z = zeta_bound(&inputs(), 16.0).unwrap();
        assert_relative_eq!(z, 5.907e3, max_relative = 1e-3);
        let g1 = ComplexityInputs {
            gamma: 1.0,
            ..inputs()
        };
        assert!(zeta_bound(&g1, 16.0).is_err());
        assert!(step_bound(&g1, z).is_err());
        assert!(step_bound(&inputs(), z).unwrap() > z);
    }

    #[test]
    fn beta_examples() {
        let with = |lr, lp, w2| ComplexityInputs {
            lipschitz_r: Some(lr),
            lipschitz_p: Some(lp),
            noise_variance: w2,
            ..inputs()
        };
        assert_eq!(beta_from_lipschitz(&with(1.0, 1.0, 0.5)).unwrap(), (1.0, 1.0));
        assert_eq!(beta_from_lipschitz(&with(0.0, 1.0, 0.5)).unwrap().0, 0.0);
        assert_eq!(beta_from_lipschitz(&with(7.0, 3.0, 1.0)).unwrap(), (3.5, 1.5));
        assert_eq!(
            beta_from_lipschitz(&inputs()),
            Err(ComplexityError::MissingLipschitz)
        );
    }

    #[test]
    fn repeated_point_examples() {
        assert_relative_eq!(repeated_point_variance(3, 1.0, 0.5), 1.0 / 7.0, epsilon = 1e-12);
        assert_eq!(repeated_point_variance(0, 0.3, 0.5), 1.0);
        assert_relative_eq!(repeated_point_variance(4, 0.5, 1.0), 0.8, epsilon = 1e-12);
    }

    /// `n` copies of the origin and a query whose kernel correlation with it
    /// is `rho` under a unit length-scale.
    fn gp_variance(n: usize, rho: f64, w2: f64) -> f64 {
        let hp = GpHyperParams {
            signal_variance: 1.0,
            length_scales: vec![1.0],
            noise_variance: w2,
        };
        let data = TrainingSet::new(vec![vec![0.0]; n], vec![0.3; n]).unwrap();
        let gp = FittedGp::fit(data, hp).unwrap();
        let x = (-2.0 * rho.ln()).sqrt();
        gp.predict(&[x]).unwrap().variance
    }

    #[test]
    fn closed_form_matches_gp_fit() {
        assert_relative_eq!(gp_variance(3, 1.0, 0.5), 1.0 / 7.0, epsilon = 1e-8);
        assert_relative_eq!(gp_variance(4, 0.5, 1.0), 0.8, epsilon = 1e-8);
        // 50-case sweep over a fixed grid
        let mut cases = 0;
        for n in [1, 2, 3, 5, 8] {
            for rho in [0.1, 0.35, 0.6, 0.85, 1.0] {
                for w2 in [0.05, 1.0] {
                    let expect = repeated_point_variance(n, rho, w2);
                    let got = gp_variance(n, rho, w2);
                    assert!((expect - got).abs() < 1e-8, "n={n} rho={rho} w2={w2}");
                    cases += 1;
                }
            }
        }
        assert_eq!(cases, 50);
    }

    #[test]
    fn report_collects_everything() {
        let r = report(
            &ComplexityInputs {
                lipschitz_r: Some(7.0),
                lipschitz_p: Some(3.0),
                ..inputs()
            },
            0.5,
        )
        .unwrap();
        assert_eq!(r.covering_number, 16.0);
        assert_eq!(r.beta, Some((350.0, 150.0)));
        assert!(r.step_bound.is_finite() && r.step_bound > 0.0);
    }

    proptest! {
        #[test]
        fn monotone_and_non_negative(
            e1 in 0.01..0.99f64, e1b in 0.01..0.99f64,
            eps in 0.1..0.9f64, epsb in 0.1..0.9f64,
            n in 1.0..1e4f64, nb in 1.0..1e4f64,
            d in 0.05..2.0f64, db in 0.05..2.0f64,
            w2 in 1e-3..10.0f64,
        ) {
            let base = ComplexityInputs { noise_variance: w2, ..inputs() };
            let s = |e1: f64| sigma_tol(&ComplexityInputs { epsilon1: e1, ..base.clone() }).unwrap();
            let z = |eps: f64, n: f64| zeta_bound(&ComplexityInputs { epsilon: eps, ..base.clone() }, n).unwrap();
            let c = |d: f64| covering_bound(&[1.0, 2.0], d, 2).unwrap();
            prop_assert!(s(e1) >= 0.0 && s(e1).is_finite());
            prop_assert!(z(eps, n) >= 0.0 && z(eps, n).is_finite());
            if e1 <= e1b { prop_assert!(s(e1) <= s(e1b)); }
            if eps <= epsb { prop_assert!(z(eps, n) >= z(epsb, n)); }
            if n <= nb { prop_assert!(z(eps, n) <= z(eps, nb)); }
            if d <= db { prop_assert!(c(d) >= c(db)); }
        }
    }
}
