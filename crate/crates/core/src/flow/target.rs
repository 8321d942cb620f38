use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class label for conditional generation; `Null` is the unconditional
/// branch used by classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Null,
    Class(usize),
}

impl Condition {
    pub fn class(self) -> Option<usize> {
        match self {
            Condition::Null => None,
            Condition::Class(c) => Some(c),
        }
    }
}

/// Mixture of axis-aligned Gaussians, one component per class. Zero
/// variances are allowed and give point masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Target {
    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        if n == 0 {
            return Err(Error::config("target needs at least one component"));
        }
        if self.variances.len() != n || self.weights.len() != n {
            return Err(Error::config("means, variances and weights must have equal length"));
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(Error::config("target dimension must be positive"));
        }
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.len() != d || v.len() != d {
                return Err(Error::config("all components must share one dimension"));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::config("component means must be finite"));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::config("variances must be finite and non-negative"));
            }
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture weights sum to {s}, not 1")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    /// Component `c` alone, or the whole mixture for `Null`.
    pub fn conditional(&self, c: Condition) -> Result<Target> {
        match c {
            Condition::Null => Ok(self.clone()),
            Condition::Class(k) if k < self.classes() => Ok(Target {
                means: vec![self.means[k].clone()],
                variances: vec![self.variances[k].clone()],
                weights: vec![1.0],
            }),
            Condition::Class(k) => Err(Error::domain(format!(
                "class {k} out of range for {} components",
                self.classes()
            ))),
        }
    }

    pub fn check_condition(&self, c: Condition) -> Result<()> {
        match c {
            Condition::Class(k) if k >= self.classes() => {
                Err(Error::domain(format!("class {k} out of range")))
            }
            _ => Ok(()),
        }
    }

    /// Two symmetric components on the first axis at `-+offset`.
    pub fn symmetric_pair(dim: usize, offset: f64, variance: f64) -> Self {
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        a[0] = -offset;
        b[0] = offset;
        Target {
            means: vec![a, b],
            variances: vec![vec![variance; dim]; 2],
            weights: vec![0.5, 0.5],
        }
    }
}
