//! The positivity map and the Beta distribution over step ratios.

use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smallest and largest ratio a sample can take; keeps log-densities finite.
pub const RATIO_EPS: f64 = 1e-12;

/// Positivity map for Beta parameters: `1 + e^x` below zero and the Taylor
/// continuation `2 + x + x^2/2` above, which agrees in value and first two
/// derivatives at 0 and grows only quadratically.
pub fn phi(x: f64) -> f64 {
    if x > 0.0 {
        2.0 + x + 0.5 * x * x
    } else {
        1.0 + x.exp()
    }
}

pub fn phi_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0 + x
    } else {
        x.exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::domain(format!("Beta parameters must be positive, got ({alpha}, {beta})")));
        }
        Ok(BetaParams { alpha, beta })
    }

    /// Parameters from raw network outputs.
    pub fn from_raw(a: f64, b: f64) -> Result<Self> {
        BetaParams::new(phi(a), phi(b))
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// `(alpha - 1) / (alpha + beta - 2)`. The positivity map keeps both
    /// parameters above 1, except that `1 + e^x` rounds to exactly 1 for
    /// very negative `x`; the formula is still the mode there.
    pub fn mode(&self) -> Result<f64> {
        if !(self.alpha >= 1.0 && self.beta >= 1.0 && self.alpha + self.beta > 2.0) {
            return Err(Error::domain(format!(
                "Beta mode needs alpha, beta >= 1 and a peak, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(((self.alpha - 1.0) / (self.alpha + self.beta - 2.0)).clamp(0.0, 1.0))
    }

    pub fn log_prob(&self, r: f64) -> Result<f64> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::domain(format!("ratio {r} outside (0, 1)")));
        }
        let (a, b) = (self.alpha, self.beta);
        let lp = (a - 1.0) * r.ln() + (b - 1.0) * (-r).ln_1p() - ln_beta(a, b);
        if !lp.is_finite() {
            return Err(Error::numeric(format!("log-density at {r} under Beta({a}, {b}) is {lp}")));
        }
        Ok(lp)
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<f64> {
        let d = rand_distr::Beta::new(self.alpha, self.beta)
            .map_err(|e| Error::domain(format!("Beta({}, {}): {e}", self.alpha, self.beta)))?;
        Ok(d.sample(rng).clamp(RATIO_EPS, 1.0 - RATIO_EPS))
    }
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Partial derivatives of the Beta log-density in `(alpha, beta)`.
pub fn beta_log_prob_grad(a: f64, b: f64, r: f64) -> (f64, f64) {
    let s = digamma(a + b);
    (r.ln() - digamma(a) + s, (-r).ln_1p() - digamma(b) + s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.0), 2.0);
        assert_eq!(phi(1.0), 3.5);
        assert!((phi(-1.0) - 1.367_879_441_171_442_4).abs() < 1e-15);
        assert!(phi(-1000.0) >= 1.0);
    }

    #[test]
    fn mode_examples() {
        assert_eq!(BetaParams::new(2.0, 2.0).unwrap().mode().unwrap(), 0.5);
        assert_eq!(BetaParams::new(3.0, 2.0).unwrap().mode().unwrap(), 2.0 / 3.0);
        assert!(BetaParams::new(0.5, 2.0).unwrap().mode().is_err());
        assert!(BetaParams::new(1.0, 1.0).unwrap().mode().is_err());
        assert_eq!(BetaParams::from_raw(40.0, -800.0).unwrap().mode().unwrap(), 1.0);
        assert!(BetaParams::new(0.0, 2.0).is_err());
        assert!(BetaParams::new(2.0, 2.0).unwrap().log_prob(1.0).is_err());
    }

    #[test]
    fn log_prob_matches_closed_forms() {
        // Beta(2, 2) has density 6 r (1 - r).
        let b = BetaParams::new(2.0, 2.0).unwrap();
        assert!((b.log_prob(0.3).unwrap() - (6.0f64 * 0.3 * 0.7).ln()).abs() < 1e-13);
        // Beta(1, 1) is uniform.
        assert!(BetaParams::new(1.0, 1.0).unwrap().log_prob(0.77).unwrap().abs() < 1e-14);
        // Beta(3, 1) has density 3 r^2.
        let b = BetaParams::new(3.0, 1.0).unwrap();
        assert!((b.log_prob(0.6).unwrap() - (3.0f64 * 0.36).ln()).abs() < 1e-13);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let (a, b, r) = (2.7, 4.1, 0.35);
        let h = 1e-6;
        let f = |a: f64, b: f64| BetaParams::new(a, b).unwrap().log_prob(r).unwrap();
        let (da, db) = beta_log_prob_grad(a, b, r);
        assert!((da - (f(a + h, b) - f(a - h, b)) / (2.0 * h)).abs() < 1e-7);
        assert!((db - (f(a, b + h) - f(a, b - h)) / (2.0 * h)).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn phi_is_smooth_and_above_one(x in -30.0f64..50.0) {
            prop_assert!(phi(x) > 1.0);
            let h = 1e-6;
            prop_assert!((phi_grad(x) - (phi(x + h) - phi(x - h)) / (2.0 * h)).abs() < 1e-4 * (1.0 + x.abs()));
            // Far left, 1 + softplus(x) sits within an ulp of 1 and can only stay put.
            if x >= -15.0 {
                prop_assert!(phi(x + 1e-3) > phi(x));
            } else {
                prop_assert!(phi(x + 1e-3) >= phi(x));
            }
        }

        #[test]
        fn samples_stay_in_open_interval(a in 1.0f64..200.0, b in 1.0f64..200.0, seed in any::<u64>()) {
            let mut rng = crate::rng::Streams::new(seed).stream(crate::rng::Domain::Misc, 0);
            let p = BetaParams::new(a, b).unwrap();
            for _ in 0..20 {
                let r = p.sample(&mut rng).unwrap();
                prop_assert!(r > 0.0 && r < 1.0);
                prop_assert!(p.log_prob(r).unwrap().is_finite());
            }
        }
    }
}
