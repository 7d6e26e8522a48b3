//! Exact O(N) quantities: the posterior over atoms, its mean, the marginal
//! score and the analytic SNIS covariance.
//!
//! Per-atom log-likelihoods may be computed in parallel; every reduction over
//! atoms runs sequentially in index order so results are bit-stable across
//! worker counts.

use crate::dataset::DatasetStore;
use crate::error::{check_dim, Error, Result};
use crate::math::{logsumexp, sq_dist};
use crate::par;
use crate::schedules::{DiffusionSchedule, NoiseLevel};

/// Which quantity a covariance refers to: the posterior-mean estimate, or
/// the score, which scales it by `1 / sigma^4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Mean,
    Score,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Mean => "mean",
            Target::Score => "score",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    /// Normalized log posterior per atom.
    pub log_probs: Vec<f64>,
    /// `log sum_i p_t(z | x_i)` with constant-free likelihoods.
    pub log_p: f64,
    /// Constant-free per-atom log-likelihoods.
    pub log_liks: Vec<f64>,
    /// The point the posterior conditions on, `z / s(t)`.
    pub query: Vec<f64>,
    pub level: NoiseLevel,
}

impl ExactPosterior {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn mean(&self, data: &DatasetStore) -> Vec<f64> {
        let mut m = vec![0.0; data.dim()];
        for (lp, row) in self.log_probs.iter().zip(data.rows()) {
            let p = lp.exp();
            if p > 0.0 {
                m.iter_mut().zip(row).for_each(|(a, x)| *a += p * x);
            }
        }
        m
    }

    /// Per-dimension posterior variance `sum_i p_i (x_i - mu)^2`.
    pub fn variance_diag(&self, data: &DatasetStore, mean: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; data.dim()];
        for (lp, row) in self.log_probs.iter().zip(data.rows()) {
            let p = lp.exp();
            if p > 0.0 {
                for ((a, x), m) in v.iter_mut().zip(row).zip(mean) {
                    *a += p * (x - m) * (x - m);
                }
            }
        }
        v
    }
}

/// Constant-free log-likelihood of every atom for the scaled query `y`.
pub fn log_likelihoods(data: &DatasetStore, level: &NoiseLevel, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    par::fill_chunks(&mut out, 1024, |start, chunk| {
        for (off, slot) in chunk.iter_mut().enumerate() {
            *slot = level.log_lik_from_sq(sq_dist(y, data.row(start + off)));
        }
    });
    out
}

pub fn exact_posterior(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
) -> Result<ExactPosterior> {
    check_dim(data.dim(), z.len())?;
    let level = schedule.at(t)?;
    let query = level.scaled(z);
    let log_liks = log_likelihoods(data, &level, &query);
    let log_p = logsumexp(&log_liks);
    // normalize relative to the maximum so large |log-likelihoods| keep precision
    let m = log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ls = log_liks.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let log_probs = log_liks.iter().map(|l| l - m - ls).collect();
    Ok(ExactPosterior {
        log_probs,
        log_p,
        log_liks,
        query,
        level,
    })
}

pub fn exact_posterior_mean(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    Ok(exact_posterior(data, schedule, z, t)?.mean(data))
}

/// Marginal score `(mu - z/s) / sigma^2`.
pub fn exact_score(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let post = exact_posterior(data, schedule, z, t)?;
    let mean = post.mean(data);
    Ok(post.level.score_from_mean(&mean, &post.query))
}

/// Diagonal of the SNIS covariance for proposal `q` with `n` draws:
/// `(1/n) sum_i p_i^2 / q_i (x_i - mu)^2`, times `1/sigma^4` for the score.
pub fn snis_covariance_diag(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
    proposal_log_probs: &[f64],
    n: usize,
    target: Target,
) -> Result<Vec<f64>> {
    let post = exact_posterior(data, schedule, z, t)?;
    let mean = post.mean(data);
    covariance_diag_from(data, &post, &mean, proposal_log_probs, n, target)
}

/// [`snis_covariance_diag`] against a precomputed posterior and mean.
pub fn covariance_diag_from(
    data: &DatasetStore,
    post: &ExactPosterior,
    mean: &[f64],
    proposal_log_probs: &[f64],
    n: usize,
    target: Target,
) -> Result<Vec<f64>> {
    check_dim(data.len(), proposal_log_probs.len())?;
    if n == 0 {
        return Err(Error::Argument("sample count n must be at least 1".into()));
    }
    let lz = logsumexp(proposal_log_probs);
    if lz.is_nan() || lz.abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "proposal is not normalized: logsumexp = {lz}"
        )));
    }
    let mut acc = vec![0.0; data.dim()];
    for (i, (&lp, &lq)) in post.log_probs.iter().zip(proposal_log_probs).enumerate() {
        if lp.exp() == 0.0 {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Err(Error::UnsupportedProposal { index: i });
        }
        let ratio = (2.0 * lp - lq).exp();
        if ratio == 0.0 {
            continue;
        }
        for ((a, x), m) in acc.iter_mut().zip(data.row(i)).zip(mean) {
            *a += ratio * (x - m) * (x - m);
        }
    }
    let mut scale = 1.0 / n as f64;
    if target == Target::Score {
        let s2 = post.level.sigma * post.level.sigma;
        scale /= s2 * s2;
    }
    acc.iter_mut().for_each(|a| *a *= scale);
    Ok(acc)
}

/// Trace of the mean-target covariance of SNIS with the uniform proposal:
/// `(N/n) sum_i p_i^2 ||x_i - mu||^2`.
pub fn uniform_trace(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
    n: usize,
) -> Result<f64> {
    let post = exact_posterior(data, schedule, z, t)?;
    let mean = post.mean(data);
    uniform_trace_from(data, &post, &mean, n)
}

pub fn uniform_trace_from(
    data: &DatasetStore,
    post: &ExactPosterior,
    mean: &[f64],
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Argument("sample count n must be at least 1".into()));
    }
    let s: f64 = post
        .log_probs
        .iter()
        .zip(data.rows())
        .map(|(lp, row)| {
            let p2 = (2.0 * lp).exp();
            if p2 == 0.0 {
                0.0
            } else {
                p2 * sq_dist(row, mean)
            }
        })
        .sum();
    Ok(data.len() as f64 / n as f64 * s)
}

/// Posterior expected squared error of a candidate denoiser output,
/// `E_{x ~ p(x|z)} ||c - x||^2`. Minimized by the posterior mean.
pub fn optimal_denoiser_check(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
    candidate: &[f64],
) -> Result<f64> {
    check_dim(data.dim(), candidate.len())?;
    let post = exact_posterior(data, schedule, z, t)?;
    Ok(post
        .log_probs
        .iter()
        .zip(data.rows())
        .map(|(lp, row)| lp.exp() * sq_dist(candidate, row))
        .sum())
}

/// Uniform proposal in log domain.
pub fn uniform_log_probs(n: usize) -> Vec<f64> {
    vec![-(n as f64).ln(); n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> DatasetStore {
        DatasetStore::new(xs.to_vec(), 1).unwrap()
    }

    const EDM: DiffusionSchedule = DiffusionSchedule {
        kind: crate::schedules::ScheduleKind::Edm,
        t_min: 0.002,
        t_max: 80.0,
    };

    #[test]
    fn symmetric_pair() {
        let d = line(&[-1.0, 1.0]);
        for t in [0.1, 1.0, 30.0] {
            let p = exact_posterior(&d, &EDM, &[0.0], t).unwrap().probs();
            assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
            assert_eq!(
                exact_posterior_mean(&d, &EDM, &[0.0], t).unwrap(),
                vec![0.0]
            );
        }
    }

    #[test]
    fn asymmetric_pair_values() {
        // log-liks {0, -2}: p = 1/(1+e^-2), e^-2/(1+e^-2); mean = 2 p_1
        let d = line(&[0.0, 2.0]);
        let p = exact_posterior(&d, &EDM, &[0.0], 1.0).unwrap().probs();
        assert!((p[0] - 0.88080).abs() < 1e-5);
        assert!((p[1] - 0.11920).abs() < 1e-5);
        let m = exact_posterior_mean(&d, &EDM, &[0.0], 1.0).unwrap();
        assert!((m[0] - 0.23840).abs() < 1e-4);
    }

    #[test]
    fn single_atom() {
        let d = line(&[1.5]);
        let post = exact_posterior(&d, &EDM, &[0.2], 0.3).unwrap();
        assert_eq!(post.probs(), vec![1.0]);
        let s = exact_score(&d, &EDM, &[0.2], 0.5).unwrap();
        assert!((s[0] - (1.5 - 0.2) / 0.25).abs() < 1e-14);
    }

    #[test]
    fn score_vanishes_at_posterior_mean() {
        // z = mu is a fixed point only when z is symmetric with the data.
        let d = DatasetStore::new(vec![-1.0, 2.0, 1.0, -2.0], 2).unwrap();
        let s = exact_score(&d, &EDM, &[0.0, 0.0], 0.8).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn covariance_examples() {
        let d = line(&[-1.0, 1.0]);
        let q = uniform_log_probs(2);
        let c = snis_covariance_diag(&d, &EDM, &[0.0], 1.0, &q, 1, Target::Mean).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        let tr = uniform_trace(&d, &EDM, &[0.0], 1.0, 1).unwrap();
        assert!((tr - 1.0).abs() < 1e-15);
        let cs = snis_covariance_diag(&d, &EDM, &[0.0], 2.0, &q, 4, Target::Score).unwrap();
        let cm = snis_covariance_diag(&d, &EDM, &[0.0], 2.0, &q, 4, Target::Mean).unwrap();
        assert!((cs[0] - cm[0] / 16.0).abs() < 1e-15);
    }

    #[test]
    fn concentrated_posterior_has_zero_covariance() {
        let d = line(&[0.0, 1.0, 3.0]);
        let q = uniform_log_probs(3);
        let c = snis_covariance_diag(&d, &EDM, &[0.0], 0.01, &q, 8, Target::Mean).unwrap();
        assert_eq!(c, vec![0.0]);
        assert_eq!(uniform_trace(&d, &EDM, &[0.0], 0.01, 8).unwrap(), 0.0);
    }

    #[test]
    fn proposal_errors() {
        let d = line(&[0.0, 1.0]);
        let bad = vec![0.0, f64::NEG_INFINITY];
        assert!(matches!(
            snis_covariance_diag(&d, &EDM, &[0.5], 1.0, &bad, 1, Target::Mean),
            Err(Error::UnsupportedProposal { index: 1 })
        ));
        let unnorm = vec![0.0, 0.0];
        assert!(snis_covariance_diag(&d, &EDM, &[0.5], 1.0, &unnorm, 1, Target::Mean).is_err());
        let q = uniform_log_probs(2);
        assert!(snis_covariance_diag(&d, &EDM, &[0.5], 1.0, &q, 0, Target::Mean).is_err());
        // q = 0 where p = 0 is fine
        let d = line(&[0.0, 1e6]);
        let q = vec![0.0, f64::NEG_INFINITY];
        assert!(snis_covariance_diag(&d, &EDM, &[0.0], 1.0, &q, 1, Target::Mean).is_ok());
    }

    #[test]
    fn domain_errors() {
        let d = line(&[0.0, 1.0]);
        assert!(matches!(
            exact_posterior(&d, &EDM, &[0.0], 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            exact_posterior(&d, &EDM, &[0.0, 1.0], 1.0),
            Err(Error::Dimension { .. })
        ));
    }
}
