//! Bias / variance / MSE sweeps over a time grid.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::dataset::DatasetStore;
use crate::error::{Error, Result};
use crate::estimators::{
    build_knn_proposal, mc_posterior, mc_single, snis_estimate, stf_estimate, PosteriorSampler,
    Proposal, ScoreEstimate,
};
use crate::knn::KnnIndex;
use crate::math::{sq_dist, Welford};
use crate::oracle::{exact_posterior, Target};
use crate::par;
use crate::rng::{self, Stream};
use crate::schedules::DiffusionSchedule;

use super::fmt_f64;

pub const CSV_HEADER: &str = "t,estimator,target,n,k,bias_sq,variance,mse,ess_mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// The exact posterior mean, as a zero-error reference.
    Exact,
    McSingle,
    McPosterior,
    Uniform,
    Stf,
    Knn,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::McSingle => "mc_single",
            EstimatorKind::McPosterior => "mc_posterior",
            EstimatorKind::Uniform => "uniform",
            EstimatorKind::Stf => "stf",
            EstimatorKind::Knn => "knn",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "exact" => EstimatorKind::Exact,
            "mc_single" | "mc-single" | "single" => EstimatorKind::McSingle,
            "mc_posterior" | "mc-posterior" | "posterior" => EstimatorKind::McPosterior,
            "uniform" => EstimatorKind::Uniform,
            "stf" => EstimatorKind::Stf,
            "knn" => EstimatorKind::Knn,
            other => return Err(Error::Argument(format!("unknown estimator '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    /// Batch size. Ignored by `Exact` and `McSingle`.
    pub n: usize,
    /// Neighbour count, used only by `Knn`.
    pub k: usize,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, n: usize, k: usize) -> Self {
        Self { kind, n, k }
    }

    /// Batch size actually used by one evaluation.
    pub fn n_used(&self) -> usize {
        match self.kind {
            EstimatorKind::Exact => 0,
            EstimatorKind::McSingle => 1,
            _ => self.n,
        }
    }

    pub fn uses_k(&self) -> bool {
        self.kind == EstimatorKind::Knn
    }

    pub fn validate(&self, n_data: usize) -> Result<()> {
        match self.kind {
            EstimatorKind::Exact | EstimatorKind::McSingle => Ok(()),
            EstimatorKind::Stf if self.n < 2 => {
                Err(Error::Argument(format!("stf needs n >= 2, got {}", self.n)))
            }
            _ if self.n == 0 => Err(Error::Argument("estimator n must be at least 1".into())),
            EstimatorKind::Knn if self.k == 0 || self.k > n_data => Err(Error::Argument(format!(
                "knn k must be in 1..={n_data}, got {}",
                self.k
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub t_grid: Vec<f64>,
    /// Number of `(x, z)` pairs drawn per time.
    pub m_points: usize,
    /// Estimator evaluations per `z`.
    pub reps: usize,
    pub estimators: Vec<EstimatorSpec>,
    pub master_seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            t_grid: log_grid(1e-2, 80.0, 24),
            m_points: 500,
            reps: 50,
            estimators: vec![
                EstimatorSpec::new(EstimatorKind::Knn, 256, 64),
                EstimatorSpec::new(EstimatorKind::Uniform, 256, 0),
                EstimatorSpec::new(EstimatorKind::Stf, 256, 0),
            ],
            master_seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self, n_data: usize) -> Result<()> {
        if self.m_points == 0 {
            return Err(Error::Config("m_points must be at least 1".into()));
        }
        if self.reps < 2 {
            return Err(Error::Config("reps must be at least 2".into()));
        }
        if self.t_grid.is_empty() {
            return Err(Error::Config("t grid is empty".into()));
        }
        if let Some(t) = self.t_grid.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Config(format!(
                "t grid values must be positive, got {t}"
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        for e in &self.estimators {
            e.validate(n_data)
                .map_err(|err| Error::Config(err.to_string()))?;
        }
        Ok(())
    }
}

/// `count` log-spaced values from `lo` to `hi` with exact endpoints.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let mut g: Vec<f64> = (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect();
            g[0] = lo;
            g[count - 1] = hi;
            g
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub t: f64,
    pub estimator: EstimatorSpec,
    pub target: Target,
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    pub ess_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EstimatorReport {
    pub rows: Vec<ReportRow>,
}

impl EstimatorReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            let k = if r.estimator.uses_k() {
                r.estimator.k.to_string()
            } else {
                String::new()
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                fmt_f64(r.t),
                r.estimator.kind,
                r.target.as_str(),
                r.estimator.n_used(),
                k,
                fmt_f64(r.bias_sq),
                fmt_f64(r.variance),
                fmt_f64(r.mse),
                fmt_f64(r.ess_mean),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// First row matching `(t, estimator kind, target)`.
    pub fn find(&self, t: f64, kind: EstimatorKind, target: Target) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.t == t && r.estimator.kind == kind && r.target == target)
    }
}

/// Per-point sums, before averaging over points and dimensions.
#[derive(Debug, Clone, Copy, Default)]
struct PointStats {
    bias_sq: [f64; 2],
    variance: [f64; 2],
    ess: f64,
}

/// Runs every estimator of `protocol` over its time grid.
///
/// Random streams are derived from the master seed by (time index, point)
/// for the noisy observations and by (time index, point, estimator, rep) for
/// estimator draws, so the report does not depend on the worker count.
pub fn run_eval(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    protocol: &EvalProtocol,
) -> Result<EstimatorReport> {
    protocol.validate(data.len())?;
    let index = KnnIndex::build(data);
    let d = data.dim() as f64;
    let n_est = protocol.estimators.len();
    let mut rows = Vec::with_capacity(protocol.t_grid.len() * n_est * 2);

    for (ti, &t) in protocol.t_grid.iter().enumerate() {
        let per_point = par::try_map(protocol.m_points, |p| {
            eval_point(data, &index, schedule, protocol, ti as u64, p as u64, t)
                .map_err(|e| e.context(format!("t = {t}, point {p}")))
        })?;
        for (ei, spec) in protocol.estimators.iter().enumerate() {
            let mut acc = PointStats::default();
            for stats in &per_point {
                let s = &stats[ei];
                for j in 0..2 {
                    acc.bias_sq[j] += s.bias_sq[j];
                    acc.variance[j] += s.variance[j];
                }
                acc.ess += s.ess;
            }
            let m = protocol.m_points as f64;
            for (j, target) in [Target::Mean, Target::Score].into_iter().enumerate() {
                let bias_sq = acc.bias_sq[j] / (m * d);
                let variance = acc.variance[j] / (m * d);
                rows.push(ReportRow {
                    t,
                    estimator: *spec,
                    target,
                    bias_sq,
                    variance,
                    mse: bias_sq + variance,
                    ess_mean: acc.ess / m,
                });
            }
        }
    }
    Ok(EstimatorReport { rows })
}

fn eval_point(
    data: &DatasetStore,
    index: &KnnIndex<'_>,
    schedule: &DiffusionSchedule,
    protocol: &EvalProtocol,
    ti: u64,
    p: u64,
    t: f64,
) -> Result<Vec<PointStats>> {
    let seed = protocol.master_seed;
    let mut prng = rng::stream(seed, &[ti, p]);
    let x_idx = rng::index(&mut prng, data.len());
    let eps: Vec<f64> = (0..data.dim()).map(|_| rng::normal(&mut prng)).collect();
    let z = schedule.noise_point(data.row(x_idx), t, &eps)?;

    let post = exact_posterior(data, schedule, &z, t)?;
    let mu = post.mean(data);
    let s2 = post.level.sigma * post.level.sigma;
    let sampler = PosteriorSampler::new(&post.log_probs)?;

    let mut out = Vec::with_capacity(protocol.estimators.len());
    for (ei, spec) in protocol.estimators.iter().enumerate() {
        let knn = match spec.kind {
            EstimatorKind::Knn => Some(build_knn_proposal(index, schedule, &z, t, spec.k)?),
            _ => None,
        };
        let mut mean_acc = Welford::new(data.dim());
        let mut ess = 0.0;
        for r in 0..protocol.reps {
            let mut rs: Stream = rng::stream(seed, &[ti, p, ei as u64, r as u64]);
            let est: ScoreEstimate = match spec.kind {
                EstimatorKind::Exact => ScoreEstimate {
                    mean_hat: mu.clone(),
                    score_hat: post.level.score_from_mean(&mu, &post.query),
                    ess: 1.0,
                    n_used: 0,
                },
                EstimatorKind::McSingle => {
                    // each repetition is a fresh joint draw of x given z
                    let x = data.row(sampler.draw(&mut rs));
                    mc_single(schedule, x, &z, t)?
                }
                EstimatorKind::McPosterior => mc_posterior(data, schedule, &z, t, spec.n, &mut rs)?,
                EstimatorKind::Uniform => {
                    snis_estimate(data, schedule, &z, t, Proposal::Uniform, spec.n, &mut rs)?
                }
                EstimatorKind::Stf => stf_estimate(data, schedule, x_idx, &z, t, spec.n, &mut rs)?,
                EstimatorKind::Knn => snis_estimate(
                    data,
                    schedule,
                    &z,
                    t,
                    Proposal::Knn(knn.as_ref().expect("built above")),
                    spec.n,
                    &mut rs,
                )?,
            };
            mean_acc.push(&est.mean_hat);
            ess += est.ess;
        }
        // score errors are mean errors scaled by 1 / sigma^2 at fixed z
        let bias_mean = sq_dist(mean_acc.mean(), &mu);
        let var_mean: f64 = mean_acc.variance().iter().sum();
        out.push(PointStats {
            bias_sq: [bias_mean, bias_mean / (s2 * s2)],
            variance: [var_mean, var_mean / (s2 * s2)],
            ess: ess / protocol.reps as f64,
        });
    }
    Ok(out)
}
