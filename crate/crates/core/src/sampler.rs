//! Probability-flow ODE integration with exact or estimated scores.
//!
//! The drift is `dz/dt = (s'/s) z - s sigma' sigma score(z, t)`, which for EDM
//! reduces to `-t score`. Integration runs from `t_max` down a [`TimeGrid`].

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetStore;
use crate::error::{check_dim, Error, Result};
use crate::estimators::{build_knn_proposal, snis_estimate, Proposal};
use crate::knn::KnnIndex;
use crate::oracle::exact_score;
use crate::par;
use crate::rng::{self, Stream};
use crate::schedules::DiffusionSchedule;

pub const CSV_PREFIX: &str = "sample_id,t";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    #[default]
    Heun,
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            other => Err(Error::Argument(format!("unknown solver '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridKind {
    /// `t_i = (t_max^(1/rho) + i/steps (t_min^(1/rho) - t_max^(1/rho)))^rho`.
    Edm {
        rho: f64,
    },
    Linear,
    Log,
}

impl Default for GridKind {
    fn default() -> Self {
        GridKind::Edm { rho: 7.0 }
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edm" => Ok(GridKind::default()),
            "linear" => Ok(GridKind::Linear),
            "log" => Ok(GridKind::Log),
            other => Err(Error::Argument(format!("unknown time grid '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreSource {
    Exact,
    Knn { n: usize, k: usize },
    Uniform { n: usize },
}

/// What happens once integration reaches `t_switch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handoff {
    /// Return the states at `t_switch`.
    #[default]
    Stop,
    /// Continue to `t_min` with the exact score.
    Exact,
}

impl FromStr for Handoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stop" => Ok(Handoff::Stop),
            "exact" => Ok(Handoff::Exact),
            other => Err(Error::Argument(format!("unknown handoff '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub solver: Solver,
    pub score_source: ScoreSource,
    pub t_switch: Option<f64>,
    pub handoff: Handoff,
    pub grid: GridKind,
    pub n_samples: usize,
    pub seed: u64,
    /// Reuse one estimator stream for both Heun stages of a step.
    pub shared_batch: bool,
    /// Record every intermediate state.
    pub trace: bool,
}

impl SamplerConfig {
    /// Defaults for `schedule`'s time range.
    pub fn for_schedule(schedule: &DiffusionSchedule) -> Self {
        Self {
            steps: 40,
            t_min: schedule.t_min,
            t_max: schedule.t_max,
            solver: Solver::Heun,
            score_source: ScoreSource::Exact,
            t_switch: None,
            handoff: Handoff::Stop,
            grid: GridKind::default(),
            n_samples: 1000,
            seed: 0,
            shared_batch: false,
            trace: false,
        }
    }

    pub fn validate(&self, n_data: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return bad(format!(
                "need 0 < t_min < t_max, got {} and {}",
                self.t_min, self.t_max
            ));
        }
        if let Some(ts) = self.t_switch {
            if !(ts > self.t_min && ts <= self.t_max) {
                return bad(format!(
                    "t_switch must lie in ({}, {}], got {ts}",
                    self.t_min, self.t_max
                ));
            }
        }
        match self.score_source {
            ScoreSource::Knn { n, k } if n == 0 || k == 0 || k > n_data => {
                return bad(format!("knn score needs n >= 1 and 1 <= k <= {n_data}"));
            }
            ScoreSource::Uniform { n: 0 } => return bad("uniform score needs n >= 1".into()),
            _ => {}
        }
        if let GridKind::Edm { rho } = self.grid {
            if !(rho > 0.0 && rho.is_finite()) {
                return bad(format!("grid rho must be positive, got {rho}"));
            }
        }
        Ok(())
    }
}

/// Strictly decreasing integration times with exact endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub ts: Vec<f64>,
}

impl TimeGrid {
    pub fn new(kind: GridKind, t_max: f64, t_min: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(t_min > 0.0 && t_min < t_max && t_max.is_finite()) {
            return Err(Error::Config(format!(
                "invalid grid: t_max {t_max}, t_min {t_min}, steps {steps}"
            )));
        }
        let f = |i: usize| i as f64 / steps as f64;
        let mut ts: Vec<f64> = match kind {
            GridKind::Edm { rho } => {
                let (a, b) = (t_max.powf(1.0 / rho), t_min.powf(1.0 / rho));
                (0..=steps)
                    .map(|i| (a + f(i) * (b - a)).powf(rho))
                    .collect()
            }
            GridKind::Linear => (0..=steps)
                .map(|i| t_max + f(i) * (t_min - t_max))
                .collect(),
            GridKind::Log => {
                let (a, b) = (t_max.ln(), t_min.ln());
                (0..=steps).map(|i| (a + f(i) * (b - a)).exp()).collect()
            }
        };
        ts[0] = t_max;
        ts[steps] = t_min;
        if !ts.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Config(
                "time grid is not strictly decreasing; use fewer steps".into(),
            ));
        }
        Ok(Self { ts })
    }

    pub fn steps(&self) -> usize {
        self.ts.len() - 1
    }
}

/// A score function of `(z, t)`, possibly stochastic.
pub trait ScoreField: Sync {
    fn schedule(&self) -> &DiffusionSchedule;
    fn score(&self, z: &[f64], t: f64, rng: &mut Stream) -> Result<Vec<f64>>;
}

/// Score of the whole dataset from the exact oracle or an SNIS estimate.
pub struct DatasetScore<'a> {
    index: KnnIndex<'a>,
    schedule: DiffusionSchedule,
    source: ScoreSource,
}

impl<'a> DatasetScore<'a> {
    pub fn new(data: &'a DatasetStore, schedule: DiffusionSchedule, source: ScoreSource) -> Self {
        Self {
            index: KnnIndex::build(data),
            schedule,
            source,
        }
    }
}

impl ScoreField for DatasetScore<'_> {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn score(&self, z: &[f64], t: f64, rng: &mut Stream) -> Result<Vec<f64>> {
        let data = self.index.data();
        let s = &self.schedule;
        Ok(match self.source {
            ScoreSource::Exact => exact_score(data, s, z, t)?,
            ScoreSource::Knn { n, k } => {
                let q = build_knn_proposal(&self.index, s, z, t, k)?;
                snis_estimate(data, s, z, t, Proposal::Knn(&q), n, rng)?.score_hat
            }
            ScoreSource::Uniform { n } => {
                snis_estimate(data, s, z, t, Proposal::Uniform, n, rng)?.score_hat
            }
        })
    }
}

/// The conditional score `(x - z/s) / sigma^2` of one fixed clean point.
pub struct ConditionalScore {
    pub schedule: DiffusionSchedule,
    pub x: Vec<f64>,
}

impl ScoreField for ConditionalScore {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn score(&self, z: &[f64], t: f64, _rng: &mut Stream) -> Result<Vec<f64>> {
        self.schedule.conditional_score(&self.x, z, t)
    }
}

fn drift<F: ScoreField + ?Sized>(
    field: &F,
    z: &[f64],
    t: f64,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    let level = field.schedule().at(t)?;
    let score = field.score(z, t, rng)?;
    check_dim(z.len(), score.len())?;
    Ok(level.drift(z, &score))
}

fn axpy(z: &[f64], h: f64, d: &[f64]) -> Vec<f64> {
    z.iter().zip(d).map(|(a, b)| a + h * b).collect()
}

pub fn euler_step<F: ScoreField + ?Sized>(
    field: &F,
    z: &[f64],
    t_from: f64,
    t_to: f64,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    let d = drift(field, z, t_from, rng)?;
    Ok(axpy(z, t_to - t_from, &d))
}

/// Second-order Heun step. The corrector's score is drawn from `rng_corr`.
pub fn heun_step<F: ScoreField + ?Sized>(
    field: &F,
    z: &[f64],
    t_from: f64,
    t_to: f64,
    rng_pred: &mut Stream,
    rng_corr: &mut Stream,
) -> Result<Vec<f64>> {
    let h = t_to - t_from;
    let d1 = drift(field, z, t_from, rng_pred)?;
    let z_pred = axpy(z, h, &d1);
    let d2 = drift(field, &z_pred, t_to, rng_corr)?;
    Ok(z.iter()
        .zip(d1.iter().zip(&d2))
        .map(|(zi, (a, b))| zi + 0.5 * h * (a + b))
        .collect())
}

/// Integrates one state along `grid`. `stage_stream(step, stage)` supplies
/// the estimator stream for each score evaluation.
pub fn integrate<F: ScoreField + ?Sized>(
    field: &F,
    solver: Solver,
    grid: &TimeGrid,
    z0: Vec<f64>,
    mut stage_stream: impl FnMut(usize, usize) -> Stream,
    mut on_step: impl FnMut(f64, &[f64]),
) -> Result<Vec<f64>> {
    let mut z = z0;
    for (i, w) in grid.ts.windows(2).enumerate() {
        z = match solver {
            Solver::Euler => euler_step(field, &z, w[0], w[1], &mut stage_stream(i, 0))?,
            Solver::Heun => heun_step(
                field,
                &z,
                w[0],
                w[1],
                &mut stage_stream(i, 0),
                &mut stage_stream(i, 1),
            )?,
        };
        on_step(w[1], &z);
    }
    Ok(z)
}

/// Output of [`sample`]: terminal states plus an optional trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    /// Time of the returned states: `t_min`, or `t_switch` when stopping there.
    pub t_final: f64,
    pub states: Vec<Vec<f64>>,
    /// `(sample_id, t, state)` for the prior and every step, if requested.
    pub trace: Vec<(usize, f64, Vec<f64>)>,
}

impl Samples {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.states.first().map_or(0, |s| s.len());
        write_header(&mut w, dim)?;
        if self.trace.is_empty() {
            for (i, s) in self.states.iter().enumerate() {
                write_row(&mut w, i, self.t_final, s)?;
            }
        } else {
            for (i, t, s) in &self.trace {
                write_row(&mut w, *i, *t, s)?;
            }
        }
        Ok(())
    }
}

fn write_header<W: Write>(w: &mut W, dim: usize) -> Result<()> {
    write!(w, "{CSV_PREFIX}")?;
    for j in 0..dim {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    Ok(())
}

fn write_row<W: Write>(w: &mut W, id: usize, t: f64, x: &[f64]) -> Result<()> {
    write!(w, "{id},{t:?}")?;
    for v in x {
        write!(w, ",{v:?}")?;
    }
    writeln!(w)?;
    Ok(())
}

/// Writes forward samples (or any states at a single time) in sampler CSV form.
pub fn write_states_csv<W: Write>(w: W, t: f64, states: &[Vec<f64>]) -> Result<()> {
    Samples {
        t_final: t,
        states: states.to_vec(),
        trace: vec![],
    }
    .write_csv(w)
}

/// Draws `n_samples` prior states and integrates each down the time grid.
///
/// The prior is `z_T ~ N(0, (s(T) sigma(T))^2 I)`, the large-`T` marginal of
/// the forward process. Sample `i` uses stream `(seed, i, 0)` for the prior and
/// `(seed, i, 1 + step, stage)` for score estimates.
pub fn sample(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    config: &SamplerConfig,
) -> Result<Samples> {
    config.validate(data.len())?;
    let field = DatasetScore::new(data, *schedule, config.score_source);
    let exact = DatasetScore::new(data, *schedule, ScoreSource::Exact);

    let t_stop = config.t_switch.unwrap_or(config.t_min);
    let grid = TimeGrid::new(config.grid, config.t_max, t_stop, config.steps)?;
    let tail = match (config.t_switch, config.handoff) {
        (Some(ts), Handoff::Exact) => {
            Some(TimeGrid::new(config.grid, ts, config.t_min, config.steps)?)
        }
        _ => None,
    };
    let t_final = if tail.is_some() { config.t_min } else { t_stop };
    let level = schedule.at(config.t_max)?;
    let prior_std = level.scale * level.sigma;

    let seed = config.seed;
    let shared = config.shared_batch;
    let per_sample = par::try_map(config.n_samples, |i| {
        let id = i as u64;
        let mut r = rng::stream(seed, &[id, 0]);
        let z0: Vec<f64> = (0..data.dim())
            .map(|_| prior_std * rng::normal(&mut r))
            .collect();
        let mut trace = Vec::new();
        if config.trace {
            trace.push((i, config.t_max, z0.clone()));
        }
        let streams = |offset: usize| {
            move |step: usize, stage: usize| {
                let stage = if shared { 0 } else { stage as u64 };
                rng::stream(seed, &[id, 1 + (offset + step) as u64, stage])
            }
        };
        let mut record = |t: f64, z: &[f64]| {
            if config.trace {
                trace.push((i, t, z.to_vec()));
            }
        };
        let mut z = integrate(&field, config.solver, &grid, z0, streams(0), &mut record)?;
        if let Some(g) = &tail {
            z = integrate(
                &exact,
                config.solver,
                g,
                z,
                streams(grid.steps()),
                &mut record,
            )?;
        }
        Ok((z, trace))
    })
    .map_err(|e| e.context("sampling"))?;

    let mut states = Vec::with_capacity(per_sample.len());
    let mut trace = Vec::new();
    for (z, tr) in per_sample {
        states.push(z);
        trace.extend(tr);
    }
    Ok(Samples {
        t_final,
        states,
        trace,
    })
}

/// Draws `count` points from the forward marginal at `t`: a uniform dataset
/// atom `x`, then `s(t) (x + sigma(t) eps)`. Draw `i` uses stream `(seed, i)`.
pub fn forward_sample(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    t: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    schedule.at(t)?;
    par::try_map(count, |i| {
        let mut r = rng::stream(seed, &[i as u64]);
        let x = data.row(rng::index(&mut r, data.len()));
        let eps: Vec<f64> = (0..data.dim()).map(|_| rng::normal(&mut r)).collect();
        schedule.noise_point(x, t, &eps)
    })
}
