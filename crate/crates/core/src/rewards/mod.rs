//! Toy reward metrics, per-metric z-scoring and the equal-weight composite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Condition, Target};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Metric {
    /// Log-density under the conditioned target.
    LogDensity,
    /// Negative squared gaps between adjacent coordinates.
    NoisePenalty,
    /// Distance to the nearest wrong mean minus distance to the right one.
    Alignment,
    /// Negative distance to the conditioned mean.
    NegDistance,
    /// Prefers samples at distance `radius` from the conditioned mean:
    /// `-(ln dist - ln radius)^2`. A stand-in for metrics that reward extra
    /// detail over a perfectly clean sample.
    DetailBand { radius: f64 },
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::LogDensity => "log_density",
            Metric::NoisePenalty => "noise_penalty",
            Metric::Alignment => "alignment",
            Metric::NegDistance => "neg_distance",
            Metric::DetailBand { .. } => "detail_band",
        }
    }

    pub fn score(&self, y: &[f64], c: Condition, target: &Target) -> Result<f64> {
        if y.len() != target.dim() {
            return Err(Error::shape(format!("sample of dim {} for target of dim {}", y.len(), target.dim())));
        }
        match *self {
            Metric::LogDensity => metric_target_logdensity(y, c, target),
            Metric::NoisePenalty => metric_noise_penalty(y),
            Metric::Alignment => metric_condition_alignment(y, c, &target.means),
            Metric::NegDistance => Ok(-dist(y, conditioned_mean(c, target)?)),
            Metric::DetailBand { radius } => {
                if !(radius > 0.0) {
                    return Err(Error::config("detail radius must be positive"));
                }
                let d = dist(y, conditioned_mean(c, target)?).max(1e-12);
                Ok(-(d / radius).ln().powi(2))
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn conditioned_mean(c: Condition, target: &Target) -> Result<&[f64]> {
    match c {
        Condition::Null => Err(Error::domain("metric needs a class condition")),
        Condition::Class(k) => target
            .means
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::domain(format!("class {k} out of range"))),
    }
}

fn gaussian_logpdf(y: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    let mut lp = 0.0;
    for i in 0..y.len() {
        if !(var[i] > 0.0) {
            return Err(Error::config("log-density needs strictly positive variances"));
        }
        let r = y[i] - mu[i];
        lp -= 0.5 * (r * r / var[i] + (2.0 * std::f64::consts::PI * var[i]).ln());
    }
    Ok(lp)
}

/// Log-density of `y` under component `c`, or under the whole mixture for
/// `Null`.
pub fn metric_target_logdensity(y: &[f64], c: Condition, target: &Target) -> Result<f64> {
    let t = target.conditional(c)?;
    let logs = (0..t.classes())
        .map(|j| Ok(t.weights[j].ln() + gaussian_logpdf(y, &t.means[j], &t.variances[j])?))
        .collect::<Result<Vec<f64>>>()?;
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
}

pub fn metric_noise_penalty(y: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::config("noise penalty needs at least two coordinates"));
    }
    Ok(-y.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>())
}

pub fn metric_condition_alignment(y: &[f64], c: Condition, means: &[Vec<f64>]) -> Result<f64> {
    let k = c.class().ok_or_else(|| Error::domain("alignment needs a class condition"))?;
    if means.len() < 2 {
        return Err(Error::config("alignment needs at least two components"));
    }
    let own = dist(y, means.get(k).ok_or_else(|| Error::domain(format!("class {k} out of range")))?);
    let wrong = means
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, m)| dist(y, m))
        .fold(f64::INFINITY, f64::min);
    Ok(wrong - own)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub metrics: Vec<Metric>,
    #[serde(default = "default_eps")]
    pub eps_z: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            metrics: vec![Metric::LogDensity, Metric::NoisePenalty, Metric::Alignment, Metric::NegDistance],
            eps_z: 1e-8,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::config("reward needs at least one metric"));
        }
        if !(self.eps_z > 0.0) {
            return Err(Error::config("eps_z must be positive"));
        }
        for m in &self.metrics {
            if let Metric::DetailBand { radius } = m {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::config("detail radius must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Raw scores, one row per sample.
    pub fn score_batch(&self, samples: &[(&[f64], Condition)], target: &Target) -> Result<BatchScores> {
        let rows = samples
            .iter()
            .map(|(y, c)| self.metrics.iter().map(|m| m.score(y, *c, target)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        BatchScores::new(rows)
    }

    pub fn column_names(&self) -> Vec<String> {
        self.metrics.iter().enumerate().map(|(i, m)| format!("{}_{i}", m.name())).collect()
    }
}

/// Samples x metrics matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    rows: Vec<Vec<f64>>,
}

impl BatchScores {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("score rows must be non-empty and of equal length"));
        }
        for r in &rows {
            crate::error::ensure_finite(r, "reward score")?;
        }
        Ok(BatchScores { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn samples(&self) -> usize {
        self.rows.len()
    }

    pub fn metrics(&self) -> usize {
        self.rows[0].len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.metrics()).map(|j| self.column(j).iter().sum::<f64>() / self.samples() as f64).collect()
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-metric location and scale used for normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScoreStats {
    pub fn of(scores: &BatchScores) -> Result<Self> {
        if scores.samples() < 2 {
            return Err(Error::domain("z-scoring needs at least two samples"));
        }
        let (mean, std) = (0..scores.metrics()).map(|j| mean_std(&scores.column(j))).unzip();
        Ok(ScoreStats { mean, std })
    }

    pub fn normalize(&self, scores: &BatchScores, eps_z: f64) -> Result<BatchScores> {
        if self.mean.len() != scores.metrics() {
            return Err(Error::shape("statistics and scores have different metric counts"));
        }
        let rows = scores
            .rows
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, x)| (x - self.mean[j]) / (self.std[j] + eps_z)).collect())
            .collect();
        Ok(BatchScores { rows })
    }
}

/// Z-scores every column against the batch's own statistics.
pub fn zscore_normalize(scores: &BatchScores, eps_z: f64) -> Result<BatchScores> {
    ScoreStats::of(scores)?.normalize(scores, eps_z)
}

/// Per-sample equal-weight mean over metric columns.
pub fn composite_reward(normalized: &BatchScores) -> Vec<f64> {
    let m = normalized.metrics() as f64;
    normalized.rows.iter().map(|r| r.iter().sum::<f64>() / m).collect()
}

/// Writes raw scores, normalized scores and the composite, one row per
/// sample.
pub fn write_audit_csv(
    spec: &RewardSpec,
    raw: &BatchScores,
    normalized: &BatchScores,
    out: impl std::io::Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = spec.column_names();
    let mut header = vec!["sample".to_string()];
    header.extend(names.iter().map(|n| format!("raw_{n}")));
    header.extend(names.iter().map(|n| format!("z_{n}")));
    header.push("composite".into());
    w.write_record(&header)?;
    let comp = composite_reward(normalized);
    for (i, (r, z)) in raw.rows().iter().zip(normalized.rows()).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.iter().chain(z).map(|x| fmt_f64(*x)));
        rec.push(fmt_f64(comp[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed 17-significant-digit rendering used in every CSV artifact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests;
