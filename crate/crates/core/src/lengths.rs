//! Synthetic sequence-length distributions for padding experiments.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Log-space spread of the truncated lognormal unless overridden.
pub const DEFAULT_LOGNORMAL_SIGMA: f64 = 0.8;

/// Fitted sample mean must land this close (relative) to the target.
pub const MEAN_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LengthKind {
    UniformRange,
    TruncatedLognormal {
        #[serde(default)]
        sigma: Option<f64>,
    },
    /// Whitespace/comma separated integers, or a JSON array.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistributionSpec {
    #[serde(flatten)]
    pub kind: LengthKind,
    pub min_len: usize,
    pub max_len: usize,
    pub target_mean: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl LengthDistributionSpec {
    /// Lengths 57..=2048 with mean 646, lognormal shape.
    pub fn corpus_like(sample_count: usize, seed: u64) -> Self {
        Self {
            kind: LengthKind::TruncatedLognormal { sigma: None },
            min_len: 57,
            max_len: 2048,
            target_mean: 646.0,
            sample_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |msg: String| Err(Error::InfeasibleDistribution(msg));
        if self.min_len == 0 {
            return infeasible("min_len must be positive".into());
        }
        if self.min_len > self.max_len {
            return infeasible(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            ));
        }
        if !(self.target_mean >= self.min_len as f64 && self.target_mean <= self.max_len as f64) {
            return infeasible(format!(
                "target mean {} outside [{}, {}]",
                self.target_mean, self.min_len, self.max_len
            ));
        }
        if let LengthKind::TruncatedLognormal { sigma: Some(s) } = self.kind {
            if !(s > 0.0 && s.is_finite()) {
                return infeasible(format!("sigma must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

/// Draws lengths according to `spec`; identical output for identical specs.
///
/// The truncated lognormal is sampled by inverse CDF from one fixed set of
/// uniforms, and its location parameter is bisected until the sample mean
/// matches `target_mean`. The sample mean is monotone in the location, so
/// the fit converges for any feasible target.
pub fn gen_lengths(spec: &LengthDistributionSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    match &spec.kind {
        LengthKind::UniformRange => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Ok((0..spec.sample_count)
                .map(|_| rng.random_range(spec.min_len..=spec.max_len))
                .collect())
        }
        LengthKind::TruncatedLognormal { sigma } => {
            truncated_lognormal(spec, sigma.unwrap_or(DEFAULT_LOGNORMAL_SIGMA))
        }
        LengthKind::File { path } => {
            let text = std::fs::read_to_string(path)?;
            parse_lengths(&text)
        }
    }
}

pub fn parse_lengths(text: &str) -> Result<Vec<usize>> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    trimmed
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::InvalidLength(format!("`{s}`: {e}")))
        })
        .collect()
}

fn truncated_lognormal(spec: &LengthDistributionSpec, sigma: f64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let uniforms: Vec<f64> = (0..spec.sample_count)
        .map(|_| rng.random::<f64>())
        .collect();
    if uniforms.is_empty() {
        return Ok(Vec::new());
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let lo = spec.min_len as f64 - 0.5;
    let hi = spec.max_len as f64 + 0.5;

    let draw = |mu: f64| -> Vec<usize> {
        let a = std_normal.cdf((lo.ln() - mu) / sigma);
        let b = std_normal.cdf((hi.ln() - mu) / sigma);
        uniforms
            .iter()
            .map(|&u| {
                let v = (mu + sigma * std_normal.inverse_cdf(a + u * (b - a))).exp();
                (v.round() as usize).clamp(spec.min_len, spec.max_len)
            })
            .collect()
    };
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;

    let (mut left, mut right) = (lo.ln() - 8.0 * sigma, hi.ln() + 8.0 * sigma);
    let mut best = draw(0.5 * (left + right));
    for _ in 0..100 {
        let mid = 0.5 * (left + right);
        best = draw(mid);
        let m = mean(&best);
        if (m - spec.target_mean).abs() <= 1e-4 * spec.target_mean {
            break;
        }
        if m < spec.target_mean {
            left = mid;
        } else {
            right = mid;
        }
    }
    let achieved = mean(&best);
    if (achieved - spec.target_mean).abs() > MEAN_TOLERANCE * spec.target_mean {
        return Err(Error::InfeasibleDistribution(format!(
            "could not fit mean {} with {} samples (got {achieved:.2})",
            spec.target_mean, spec.sample_count
        )));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_uniform_range() {
        let spec = LengthDistributionSpec {
            kind: LengthKind::UniformRange,
            min_len: 1,
            max_len: 1,
            target_mean: 1.0,
            sample_count: 50,
            seed: 3,
        };
        assert_eq!(gen_lengths(&spec).unwrap(), vec![1; 50]);
    }

    #[test]
    fn same_seed_same_lengths() {
        let spec = LengthDistributionSpec::corpus_like(2000, 42);
        assert_eq!(gen_lengths(&spec).unwrap(), gen_lengths(&spec).unwrap());
        let other = LengthDistributionSpec {
            seed: 43,
            ..spec.clone()
        };
        assert_ne!(gen_lengths(&spec).unwrap(), gen_lengths(&other).unwrap());
    }

    #[test]
    fn lognormal_hits_target_mean_within_bounds() {
        let spec = LengthDistributionSpec::corpus_like(100_000, 7);
        let lengths = gen_lengths(&spec).unwrap();
        assert_eq!(lengths.len(), 100_000);
        let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        assert!((633.0..=659.0).contains(&mean), "mean {mean}");
        assert!(lengths.iter().all(|&l| (57..=2048).contains(&l)));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = LengthDistributionSpec::corpus_like(10, 1);
        spec.target_mean = 3000.0;
        assert!(matches!(
            gen_lengths(&spec),
            Err(Error::InfeasibleDistribution(_))
        ));
        spec.target_mean = 646.0;
        spec.min_len = 4096;
        assert!(matches!(
            gen_lengths(&spec),
            Err(Error::InfeasibleDistribution(_))
        ));
    }

    #[test]
    fn parses_plain_and_json_lists() {
        assert_eq!(parse_lengths("3 4,5\n6").unwrap(), vec![3, 4, 5, 6]);
        assert_eq!(parse_lengths("[1, 2, 3]").unwrap(), vec![1, 2, 3]);
        assert!(parse_lengths("3 x").is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec = LengthDistributionSpec::corpus_like(10, 1);
        let v: serde_json::Value = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["kind"], "truncated-lognormal");
        assert_eq!(v["min_len"], 57);
        let back: LengthDistributionSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
    }
}
