//! Exact checks of the nearest-neighbour covariance bounds.
//!
//! Both sides of each inequality are evaluated with the analytic SNIS
//! covariance, so a violation beyond rounding would be a real failure of the
//! bound rather than sampling noise.

use std::io::Write;

use crate::dataset::DatasetStore;
use crate::error::{Error, Result};
use crate::estimators::build_knn_proposal;
use crate::knn::KnnIndex;
use crate::oracle::{covariance_diag_from, exact_posterior, uniform_trace_from, Target};
use crate::par;
use crate::rng;
use crate::schedules::DiffusionSchedule;

use super::fmt_f64;

pub const CSV_HEADER: &str = "trial,t,k,lhs,rhs,rho,satisfied,margin";

/// Relative slack allowed for rounding when comparing the two sides.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    /// `Tr Cov(knn) <= rho * Tr Cov(posterior)`.
    Ratio,
    /// `Tr Cov(knn) <= c * Tr Cov(posterior) + ((N - k) / N) * Tr Cov(uniform)`.
    Mixture,
}

impl Bound {
    pub fn as_str(self) -> &'static str {
        match self {
            Bound::Ratio => "ratio",
            Bound::Mixture => "mixture",
        }
    }
}

impl std::str::FromStr for Bound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ratio" => Ok(Bound::Ratio),
            "mixture" => Ok(Bound::Mixture),
            other => Err(Error::Argument(format!(
                "unknown bound '{other}', expected ratio or mixture"
            ))),
        }
    }
}

/// All terms of both bounds at one `(z, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub trace_knn: f64,
    pub trace_posterior: f64,
    pub trace_uniform: f64,
    /// `Z_q / P(z)` with constant-free likelihood sums.
    pub rho: f64,
    /// Posterior mass on the neighbour set.
    pub neighbor_mass: f64,
    pub k: usize,
    pub n_data: usize,
}

impl BoundTerms {
    pub fn rhs(&self, bound: Bound) -> f64 {
        match bound {
            Bound::Ratio => self.rho * self.trace_posterior,
            Bound::Mixture => {
                let tail = (self.n_data - self.k) as f64 / self.n_data as f64;
                self.neighbor_mass * self.trace_posterior + tail * self.trace_uniform
            }
        }
    }
}

/// Evaluates every bound term at `(z, t)` for a batch of `n` draws.
pub fn bound_terms(
    index: &KnnIndex<'_>,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
    k: usize,
    n: usize,
) -> Result<BoundTerms> {
    let data = index.data();
    let post = exact_posterior(data, schedule, z, t)?;
    let mean = post.mean(data);
    let q = build_knn_proposal(index, schedule, z, t, k)?;

    let trace = |log_q: &[f64]| -> Result<f64> {
        Ok(
            covariance_diag_from(data, &post, &mean, log_q, n, Target::Mean)?
                .iter()
                .sum(),
        )
    };
    let trace_knn = trace(&q.full_log_probs())?;
    let trace_posterior = trace(&post.log_probs)?;
    let trace_uniform = uniform_trace_from(data, &post, &mean, n)?;
    let neighbor_mass = q
        .neighbor_indices
        .iter()
        .map(|&i| post.log_probs[i].exp())
        .sum::<f64>()
        .min(1.0);
    Ok(BoundTerms {
        trace_knn,
        trace_posterior,
        trace_uniform,
        rho: q.ratio_to(&post.log_liks),
        neighbor_mass,
        k,
        n_data: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub trial: usize,
    pub t: f64,
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub rho: f64,
    pub satisfied: bool,
    /// `rhs - lhs`.
    pub margin: f64,
}

impl BoundRow {
    fn new(trial: usize, t: f64, terms: &BoundTerms, bound: Bound) -> Self {
        let lhs = terms.trace_knn;
        let rhs = terms.rhs(bound);
        Self {
            trial,
            t,
            k: terms.k,
            lhs,
            rhs,
            rho: terms.rho,
            satisfied: lhs <= rhs * (1.0 + TOLERANCE),
            margin: rhs - lhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.satisfied).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.trial,
                fmt_f64(r.t),
                r.k,
                fmt_f64(r.lhs),
                fmt_f64(r.rhs),
                fmt_f64(r.rho),
                r.satisfied,
                fmt_f64(r.margin),
            )?;
        }
        Ok(())
    }
}

/// Runs `trials` random checks of `bound`. Each trial draws an atom, a
/// log-uniform `t` in the schedule's range and a noisy `z`, all from streams
/// derived from `seed` and the trial number.
pub fn verify(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    bound: Bound,
    trials: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<BoundReport> {
    if k == 0 || k > data.len() {
        return Err(Error::Argument(format!(
            "k must be in 1..={}, got {k}",
            data.len()
        )));
    }
    if n == 0 {
        return Err(Error::Argument("sample count n must be at least 1".into()));
    }
    schedule.validate()?;
    let index = KnnIndex::build(data);
    let (lo, hi) = (schedule.t_min.ln(), schedule.t_max.ln());
    let rows = par::try_map(trials, |trial| {
        let mut r = rng::stream(seed, &[trial as u64]);
        let x = data.row(rng::index(&mut r, data.len()));
        let t = (lo + (hi - lo) * rng::uniform(&mut r)).exp();
        let eps: Vec<f64> = (0..data.dim()).map(|_| rng::normal(&mut r)).collect();
        let z = schedule.noise_point(x, t, &eps)?;
        let terms = bound_terms(&index, schedule, &z, t, k, n)
            .map_err(|e| e.context(format!("trial {trial}")))?;
        Ok(BoundRow::new(trial, t, &terms, bound))
    })?;
    Ok(BoundReport { rows })
}

pub fn verify_theorem1(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    trials: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<BoundReport> {
    verify(data, schedule, Bound::Ratio, trials, k, n, seed)
}

pub fn verify_theorem2(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    trials: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<BoundReport> {
    verify(data, schedule, Bound::Mixture, trials, k, n, seed)
}
