//! Flow-matching primitives: the noising path, time grids, analytic
//! velocity fields and a learned MLP field.
//!
//! Convention: `x_t = t * eps + (1 - t) * x0`, so `t = 1` is pure noise and
//! the target velocity is `eps - x0`.

mod analytic;
mod field;
mod grid;
mod target;

pub use analytic::{velocity_mixture, velocity_point};
pub use field::{
    pretrain_field, AnalyticField, FieldConfig, FieldTrainConfig, FieldTrainLog, LearnedField,
    VelocityField,
};
pub use grid::{make_time_grid, GridKind, TimeGrid};
pub use target::{Condition, Target};

use crate::error::{Error, Result};

/// Point on the straight noising path between `x0` and `eps`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("data of dim {} and noise of dim {}", x0.len(), eps.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| t * e + (1.0 - t) * a).collect())
}

pub fn target_velocity(x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::shape("data and noise dimensions differ"));
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| e - a).collect())
}

/// One-step estimate of the clean sample, `x - t * v`.
pub fn clean_estimate(x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    if x.len() != v.len() {
        return Err(Error::shape("latent and velocity dimensions differ"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    Ok(x.iter().zip(v).map(|(xi, vi)| xi - t * vi).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_examples() {
        assert_eq!(interpolate(&[2.0], &[-1.0], 0.25).unwrap(), vec![1.25]);
        assert_eq!(interpolate(&[3.0, -1.0], &[0.5, 0.5], 0.0).unwrap(), vec![3.0, -1.0]);
        assert_eq!(interpolate(&[3.0, -1.0], &[0.5, 0.5], 1.0).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(interpolate(&[1.0], &[1.0], 1.5), Err(Error::Domain(_))));
        assert!(matches!(interpolate(&[1.0], &[1.0, 2.0], 0.5), Err(Error::Shape(_))));
        assert_eq!(target_velocity(&[2.0], &[-1.0]).unwrap(), vec![-3.0]);
    }

    #[test]
    fn clean_estimate_recovers_data_under_exact_velocity() {
        let (x0, eps) = ([0.7, -1.2], [0.3, 2.0]);
        for &t in &[0.1, 0.5, 0.9, 1.0] {
            let x = interpolate(&x0, &eps, t).unwrap();
            let v = target_velocity(&x0, &eps).unwrap();
            let est = clean_estimate(&x, t, &v).unwrap();
            for (a, b) in est.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert_eq!(clean_estimate(&[1.5], 0.0, &[9.0]).unwrap(), vec![1.5]);
    }
}
