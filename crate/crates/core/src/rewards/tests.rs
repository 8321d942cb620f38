use proptest::prelude::*;

use super::*;

fn unit_pair() -> Target {
    Target {
        means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
        variances: vec![vec![1.0, 1.0]; 2],
        weights: vec![0.5, 0.5],
    }
}

#[test]
fn logdensity_examples() {
    let t = unit_pair();
    let peak = metric_target_logdensity(&[1.0, 0.0], Condition::Class(1), &t).unwrap();
    assert!((peak + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    let mut prev = peak;
    for k in 1..20 {
        let y = [1.0 + 0.3 * k as f64, 0.2 * k as f64];
        let lp = metric_target_logdensity(&y, Condition::Class(1), &t).unwrap();
        assert!(lp < prev);
        prev = lp;
    }
    let degenerate = Target { variances: vec![vec![0.0, 1.0]; 2], ..t.clone() };
    assert!(matches!(metric_target_logdensity(&[0.0, 0.0], Condition::Class(0), &degenerate), Err(Error::Config(_))));
}

#[test]
fn logdensity_matches_direct_density() {
    let t = Target {
        means: vec![vec![0.5, -1.0], vec![2.0, 0.3]],
        variances: vec![vec![0.4, 2.0], vec![0.1, 0.7]],
        weights: vec![0.25, 0.75],
    };
    let pdf = |y: &[f64], m: &[f64], v: &[f64]| -> f64 {
        (0..2).map(|i| (-(y[i] - m[i]).powi(2) / (2.0 * v[i])).exp() / (2.0 * std::f64::consts::PI * v[i]).sqrt()).product()
    };
    let y = [0.9, -0.2];
    let want = (0.25 * pdf(&y, &t.means[0], &t.variances[0]) + 0.75 * pdf(&y, &t.means[1], &t.variances[1])).ln();
    assert!((metric_target_logdensity(&y, Condition::Null, &t).unwrap() - want).abs() < 1e-12);
    let want0 = pdf(&y, &t.means[0], &t.variances[0]).ln();
    assert!((metric_target_logdensity(&y, Condition::Class(0), &t).unwrap() - want0).abs() < 1e-12);
}

#[test]
fn noise_penalty_examples() {
    assert_eq!(metric_noise_penalty(&[3.0; 5]).unwrap(), 0.0);
    assert_eq!(metric_noise_penalty(&[1.0, -1.0, 1.0, -1.0]).unwrap(), -12.0);
    assert!(metric_noise_penalty(&[1.0]).is_err());
}

#[test]
fn alignment_examples_and_scan_oracle() {
    let means = vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]];
    assert_eq!(metric_condition_alignment(&[0.0, 0.0], Condition::Class(0), &means).unwrap(), 3.0);
    assert_eq!(metric_condition_alignment(&[1.5, 0.0], Condition::Class(0), &means[..2]).unwrap(), 0.0);
    assert!(matches!(metric_condition_alignment(&[0.0, 0.0], Condition::Null, &means), Err(Error::Domain(_))));
    let mut rng = crate::rng::Streams::new(1).stream(crate::rng::Domain::Misc, 0);
    use rand::Rng;
    for _ in 0..100 {
        let y = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let c = rng.random_range(0..3);
        let d: Vec<f64> = means.iter().map(|m| ((y[0] - m[0]).powi(2) + (y[1] - m[1]).powi(2)).sqrt()).collect();
        let mut best = f64::INFINITY;
        for (j, dj) in d.iter().enumerate() {
            if j != c && *dj < best {
                best = *dj;
            }
        }
        let got = metric_condition_alignment(&y, Condition::Class(c), &means).unwrap();
        assert!((got - (best - d[c])).abs() < 1e-12);
    }
}

#[test]
fn detail_band_peaks_at_radius() {
    let t = unit_pair();
    let m = Metric::DetailBand { radius: 0.1 };
    assert!(m.score(&[1.1, 0.0], Condition::Class(1), &t).unwrap().abs() < 1e-20);
    assert!(m.score(&[1.05, 0.0], Condition::Class(1), &t).unwrap() < 0.0);
    assert!(m.score(&[1.0, 0.0], Condition::Class(1), &t).unwrap().is_finite());
}

#[test]
fn zscore_examples() {
    let s = BatchScores::new(vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    let z = zscore_normalize(&s, 1e-8).unwrap().column(0);
    let want = 1.224_744_871_391_589;
    assert!((z[0] + want).abs() < 1e-7 && z[1].abs() < 1e-15 && (z[2] - want).abs() < 1e-7);
    let c = BatchScores::new(vec![vec![5.0]; 4]).unwrap();
    assert_eq!(zscore_normalize(&c, 1e-8).unwrap().column(0), vec![0.0; 4]);
    let one = BatchScores::new(vec![vec![1.0, 2.0]]).unwrap();
    assert!(matches!(zscore_normalize(&one, 1e-8), Err(Error::Domain(_))));
}

#[test]
fn composite_examples() {
    let same = BatchScores::new(vec![vec![0.5, 0.5, 0.5], vec![-0.5, -0.5, -0.5]]).unwrap();
    assert_eq!(composite_reward(&same), vec![0.5, -0.5]);
    let opposite = BatchScores::new(vec![vec![1.0, -1.0], vec![-2.0, 2.0]]).unwrap();
    assert_eq!(composite_reward(&opposite), vec![0.0, 0.0]);
    let four = BatchScores::new(vec![vec![0.1, 0.7, -0.3, 1.9]]).unwrap();
    assert!((composite_reward(&four)[0] - 0.25 * (0.1 + 0.7 - 0.3 + 1.9)).abs() < 1e-12);
}

#[test]
fn audit_csv_has_one_row_per_sample() {
    let spec = RewardSpec::default();
    let raw = BatchScores::new(vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
    let z = zscore_normalize(&raw, spec.eps_z).unwrap();
    let mut buf = Vec::new();
    write_audit_csv(&spec, &raw, &z, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("sample,raw_log_density_0"));
}

fn batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..30, 1usize..5).prop_flat_map(|(n, m)| proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, m), n))
}

proptest! {
    #[test]
    fn normalized_columns_are_standardized(rows in batch()) {
        let s = BatchScores::new(rows).unwrap();
        let z = zscore_normalize(&s, 1e-8).unwrap();
        for j in 0..s.metrics() {
            let (m, sd) = mean_std(&z.column(j));
            prop_assert!(m.abs() < 1e-12);
            let (_, raw_sd) = mean_std(&s.column(j));
            if raw_sd > 1e-3 {
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(composite_reward(&z).iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn composite_ranking_survives_affine_maps(rows in batch(), a in proptest::collection::vec(0.1f64..10.0, 5), b in proptest::collection::vec(-50.0f64..50.0, 5)) {
        let s = BatchScores::new(rows.clone()).unwrap();
        let mapped = BatchScores::new(rows.iter().map(|r| r.iter().enumerate().map(|(j, x)| a[j] * x + b[j]).collect()).collect()).unwrap();
        let c1 = composite_reward(&zscore_normalize(&s, 1e-8).unwrap());
        let c2 = composite_reward(&zscore_normalize(&mapped, 1e-8).unwrap());
        for (x, y) in c1.iter().zip(&c2) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}
