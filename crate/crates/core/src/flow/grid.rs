use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GridKind {
    Uniform,
    /// `t = s u / (1 + (s - 1) u)` applied to a uniform `u`.
    Shifted { shift: f64 },
}

/// Strictly decreasing times from exactly 1 to exactly 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::config("a time grid needs at least two points"));
        }
        if times[0] != 1.0 || *times.last().expect("non-empty") != 0.0 {
            return Err(Error::config("time grid must run from 1 to 0"));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::config("time grid must be strictly decreasing"));
        }
        Ok(TimeGrid(times))
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    /// Number of integration steps.
    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TimeGrid::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.0
    }
}

pub fn make_time_grid(steps: usize, kind: GridKind) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(Error::config("step count must be at least 1"));
    }
    let k = steps as f64;
    let mut times: Vec<f64> = (0..=steps).map(|i| 1.0 - i as f64 / k).collect();
    if let GridKind::Shifted { shift } = kind {
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::config(format!("grid shift must be positive, got {shift}")));
        }
        for t in &mut times {
            *t = shift * *t / (1.0 + (shift - 1.0) * *t);
        }
    }
    times[0] = 1.0;
    times[steps] = 0.0;
    TimeGrid::new(times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(make_time_grid(4, GridKind::Uniform).unwrap().times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        let g = make_time_grid(2, GridKind::Shifted { shift: 3.0 }).unwrap();
        assert_eq!(g.times(), &[1.0, 0.75, 0.0]);
        assert_eq!(make_time_grid(1, GridKind::Uniform).unwrap().times(), &[1.0, 0.0]);
        assert!(make_time_grid(0, GridKind::Uniform).is_err());
        assert!(make_time_grid(3, GridKind::Shifted { shift: 0.0 }).is_err());
        assert!(TimeGrid::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn grids_are_monotone_with_exact_endpoints(k in 1usize..500, s in 0.05f64..20.0) {
            for kind in [GridKind::Uniform, GridKind::Shifted { shift: s }] {
                let g = make_time_grid(k, kind).unwrap();
                prop_assert_eq!(g.times().len(), k + 1);
                prop_assert_eq!(g.times()[0], 1.0);
                prop_assert_eq!(g.times()[k], 0.0);
            }
        }
    }
}
