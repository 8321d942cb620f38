//! Closed-form velocity fields for point-mass and Gaussian-mixture data.

use super::target::Target;
use crate::error::{Error, Result};

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else if t == 0.0 {
        Err(Error::domain("velocity is singular at t = 0"))
    } else {
        Err(Error::domain(format!("time {t} outside (0, 1]")))
    }
}

/// Exact field for data concentrated at `m`: `(x - m) / t`.
pub fn velocity_point(x: &[f64], t: f64, m: &[f64]) -> Result<Vec<f64>> {
    check_time(t)?;
    if x.len() != m.len() {
        return Err(Error::shape("latent and target dimensions differ"));
    }
    Ok(x.iter().zip(m).map(|(xi, mi)| (xi - mi) / t).collect())
}

/// Exact field `E[eps - x0 | x_t = x]` for a diagonal Gaussian mixture.
///
/// Under component `j`, `x_t ~ N((1-t) mu_j, (1-t)^2 s_j^2 + t^2)` per
/// coordinate, and both conditional expectations are linear in `x`:
/// `E[x0] = mu + (1-t) s^2 / var * r`, `E[eps] = t / var * r` with
/// `r = x - (1-t) mu`. Components are weighted by their posterior
/// responsibilities, computed in log space.
pub fn velocity_mixture(x: &[f64], t: f64, target: &Target) -> Result<Vec<f64>> {
    check_time(t)?;
    let d = target.dim();
    if x.len() != d {
        return Err(Error::shape(format!("latent of dim {} for target of dim {d}", x.len())));
    }
    let s = 1.0 - t;
    let n = target.classes();
    let mut logw = Vec::with_capacity(n);
    let mut comp = Vec::with_capacity(n);
    for j in 0..n {
        let (mu, s2) = (&target.means[j], &target.variances[j]);
        let mut lw = target.weights[j].ln();
        let mut v = vec![0.0; d];
        for i in 0..d {
            let var = s * s * s2[i] + t * t;
            let r = x[i] - s * mu[i];
            lw -= 0.5 * (r * r / var + var.ln());
            let ex0 = mu[i] + s * s2[i] / var * r;
            let eeps = t / var * r;
            v[i] = eeps - ex0;
        }
        logw.push(lw);
        comp.push(v);
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::numeric("mixture responsibilities underflowed"));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; d];
    for (wj, vj) in w.iter().zip(&comp) {
        for i in 0..d {
            out[i] += wj / z * vj[i];
        }
    }
    crate::error::ensure_finite(&out, "mixture velocity")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{interpolate, target_velocity};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn point_examples() {
        assert_eq!(velocity_point(&[1.0, 2.0], 0.5, &[0.0, 0.0]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(velocity_point(&[3.0], 1.0, &[3.0]).unwrap(), vec![0.0]);
        assert!(matches!(velocity_point(&[1.0], 0.0, &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_single_component_matches_point_field() {
        let target = Target { means: vec![vec![0.4, -1.0]], variances: vec![vec![0.0, 0.0]], weights: vec![1.0] };
        for &t in &[0.05, 0.3, 0.77, 1.0] {
            let x = [0.9, 0.2];
            let a = velocity_mixture(&x, t, &target).unwrap();
            let b = velocity_point(&x, t, &target.means[0]).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn symmetric_mixture_vanishes_at_origin() {
        let target = Target::symmetric_pair(2, 1.5, 0.3);
        for &t in &[0.1, 0.5, 0.99] {
            let v = velocity_mixture(&[0.0, 0.0], t, &target).unwrap();
            assert!(v.iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn far_from_both_components_does_not_underflow() {
        let target = Target::symmetric_pair(2, 1.0, 1e-6);
        let v = velocity_mixture(&[1e3, 0.0], 1e-3, &target).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    /// Monte-Carlo oracle: within a bin of `x_t`, the sample mean of the
    /// regression target `eps - x0` must match the mean of the closed-form
    /// field over the same samples.
    #[test]
    fn matches_monte_carlo_conditional_expectation() {
        let target = Target {
            means: vec![vec![-1.0], vec![1.5]],
            variances: vec![vec![0.2], vec![0.05]],
            weights: vec![0.3, 0.7],
        };
        let mut rng = crate::rng::Streams::new(9).stream(crate::rng::Domain::Misc, 0);
        let t = 0.4;
        let (lo, hi) = (0.2, 0.25);
        let (mut n, mut sum_target, mut sum_field, mut sum_sq) = (0usize, 0.0, 0.0, 0.0);
        for _ in 0..2_000_000 {
            let j = if rng.random::<f64>() < 0.3 { 0 } else { 1 };
            let z: f64 = rng.sample(StandardNormal);
            let x0 = target.means[j][0] + target.variances[j][0].sqrt() * z;
            let eps: f64 = rng.sample(StandardNormal);
            let xt = interpolate(&[x0], &[eps], t).unwrap()[0];
            if xt < lo || xt >= hi {
                continue;
            }
            let y = target_velocity(&[x0], &[eps]).unwrap()[0];
            n += 1;
            sum_target += y;
            sum_sq += y * y;
            sum_field += velocity_mixture(&[xt], t, &target).unwrap()[0];
        }
        let mean = sum_target / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let field = sum_field / n as f64;
        assert!(n > 10_000);
        assert!((mean - field).abs() < 4.0 * se, "mc {mean} +- {se}, field {field}");
    }
}
