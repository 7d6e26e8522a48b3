use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use crate::analysis::{self, Bound, EstimatorKind, EstimatorSpec, EvalProtocol};
use crate::dataset::{generate, DatasetStore, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::estimators::{build_knn_proposal, mc_posterior, snis_estimate, Proposal, ScoreEstimate};
use crate::knn::{brute_force_search, KnnIndex};
use crate::oracle::exact_posterior;
use crate::rng;
use crate::sampler::{self, GridKind, Handoff, SamplerConfig, ScoreSource, Solver};
use crate::schedules::{DiffusionSchedule, ScheduleKind, DEFAULT_BETA_D, DEFAULT_BETA_MIN};

use super::config::{parse_grid, RunConfig};
use super::{
    BenchArgs, BoundsArgs, Command, EstimateArgs, GenArgs, GlobalArgs, IndexArgs, SampleArgs,
};

/// Dataset used by `bounds` when none is given: `gen --kind gmm --n 256
/// --dim 8 --components 4 --std 0.05 --seed 0`.
pub const FIXTURE: &[u8] = include_bytes!("../../fixtures/gmm_256x8.nnse");

pub struct Ctx {
    global: GlobalArgs,
    cfg: RunConfig,
}

fn pick<T>(flag: Option<T>, cfg: Option<T>, default: T) -> T {
    flag.or(cfg).unwrap_or(default)
}

impl Ctx {
    pub fn new(global: GlobalArgs, cfg: RunConfig) -> Self {
        Self { global, cfg }
    }

    fn seed(&self) -> u64 {
        pick(self.global.seed, self.cfg.seed, 0)
    }

    fn out_path(&self) -> Option<PathBuf> {
        self.global
            .out
            .clone()
            .or_else(|| self.cfg.output.path.clone())
    }

    fn schedule(&self) -> Result<DiffusionSchedule> {
        let sec = &self.cfg.schedule;
        let name = self
            .global
            .schedule
            .clone()
            .or_else(|| sec.kind.clone())
            .unwrap_or_else(|| "edm".into());
        let base = match name.to_ascii_lowercase().as_str() {
            "edm" => DiffusionSchedule::edm(),
            "vp" => DiffusionSchedule {
                kind: ScheduleKind::Vp {
                    beta_d: sec.beta_d.unwrap_or(DEFAULT_BETA_D),
                    beta_min: sec.beta_min.unwrap_or(DEFAULT_BETA_MIN),
                },
                ..DiffusionSchedule::vp()
            },
            other => return Err(Error::Argument(format!("unknown schedule '{other}'"))),
        };
        let t_min = pick(self.global.t_min, sec.t_min, base.t_min);
        let t_max = pick(self.global.t_max, sec.t_max, base.t_max);
        DiffusionSchedule::new(base.kind, t_min, t_max).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads `--data`, else the config's path or synthetic spec, else the
    /// bundled fixture when `fixture` is set.
    fn dataset(&self, fixture: bool) -> Result<DatasetStore> {
        if let Some(p) = self.global.data.as_ref().or(self.cfg.data.path.as_ref()) {
            return DatasetStore::load(p).map_err(|e| e.context(p.display().to_string()));
        }
        if let Some(spec) = &self.cfg.data.synthetic {
            return generate(spec);
        }
        if fixture {
            return DatasetStore::from_bytes(FIXTURE);
        }
        Err(Error::Argument(
            "no dataset: pass --data or set [data] in the config".into(),
        ))
    }
}

/// CSV goes to `--out` when given, else stdout. The summary goes to stdout,
/// or to stderr when stdout carries the CSV.
struct Output {
    csv: Box<dyn Write>,
    summary: Box<dyn Write>,
}

impl Output {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(match path {
            Some(p) => Self {
                csv: Box::new(BufWriter::new(File::create(p).map_err(|e| {
                    Error::from(e).context(format!("cannot create {}", p.display()))
                })?)),
                summary: Box::new(io::stdout()),
            },
            None => Self {
                csv: Box::new(BufWriter::new(io::stdout())),
                summary: Box::new(io::stderr()),
            },
        })
    }
}

pub fn dispatch(ctx: &Ctx, cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen(a) => cmd_gen(ctx, a),
        Command::Index(a) => cmd_index(ctx, a),
        Command::Estimate(a) => cmd_estimate(ctx, a),
        Command::Bench(a) => cmd_bench(ctx, a),
        Command::Bounds(a) => cmd_bounds(ctx, a),
        Command::Sample(a) => cmd_sample(ctx, a),
    }
}

fn cmd_gen(ctx: &Ctx, a: GenArgs) -> Result<ExitCode> {
    let out = ctx
        .out_path()
        .ok_or_else(|| Error::Argument("gen requires --out".into()))?;
    let base = ctx.cfg.data.synthetic.clone();
    let kind = match a.kind {
        Some(k) => k.parse::<SyntheticKind>()?,
        None => base
            .as_ref()
            .map_or(SyntheticKind::GaussianMixture, |b| b.kind),
    };
    let spec = SyntheticSpec {
        kind,
        n: pick(a.n, base.as_ref().map(|b| b.n), 1000),
        dim: pick(a.dim, base.as_ref().map(|b| b.dim), 2),
        components: pick(a.components, base.as_ref().map(|b| b.components), 4),
        component_std: pick(a.std, base.as_ref().map(|b| b.component_std), 0.05),
        seed: ctx.seed(),
    };
    let data = generate(&spec)?;
    let is_csv = out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut w = BufWriter::new(File::create(&out)?);
        data.write_csv(&mut w)?;
        w.flush()?;
    } else {
        data.save(&out)?;
    }
    println!(
        "N={} d={} checksum={}",
        data.len(),
        data.dim(),
        data.checksum()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_index(ctx: &Ctx, a: IndexArgs) -> Result<ExitCode> {
    let data = ctx.dataset(false)?;
    let k = a.k.unwrap_or(10).min(data.len());
    let queries = a.points.unwrap_or(100);
    if k == 0 {
        return Err(Error::Argument("--k must be at least 1".into()));
    }
    let index = KnnIndex::build(&data);
    let scale = data.diameter().max(1e-12);
    let mismatches = crate::par::try_map(queries, |q| {
        let mut r = rng::stream(ctx.seed(), &[q as u64]);
        let x = data.row(rng::index(&mut r, data.len()));
        let spread = scale * (1e-3f64.ln() * rng::uniform(&mut r)).exp();
        let y: Vec<f64> = x.iter().map(|v| v + spread * rng::normal(&mut r)).collect();
        let fast = index.search(&y, k)?;
        let slow = brute_force_search(&data, &y, k)?;
        Ok(usize::from(fast != slow))
    })?
    .into_iter()
    .sum::<usize>();
    println!(
        "N={} d={} k={k} queries={queries} mismatches={mismatches}",
        data.len(),
        data.dim()
    );
    Ok(if mismatches == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_estimate(ctx: &Ctx, a: EstimateArgs) -> Result<ExitCode> {
    let data = ctx.dataset(false)?;
    let schedule = ctx.schedule()?;
    let zs = DatasetStore::load(&a.input).map_err(|e| e.context(a.input.display().to_string()))?;
    if zs.dim() != data.dim() {
        return Err(Error::Dimension {
            expected: data.dim(),
            got: zs.dim(),
        });
    }
    let kind: EstimatorKind = a.estimators.as_deref().unwrap_or("knn").parse()?;
    let n = pick(a.n, ctx.cfg.eval.n, 256);
    let k = pick(a.k, ctx.cfg.eval.k, 64).min(data.len());
    if matches!(kind, EstimatorKind::Stf | EstimatorKind::McSingle) {
        return Err(Error::Argument(format!(
            "{kind} needs the generating point and cannot score arbitrary z"
        )));
    }
    EstimatorSpec::new(kind, n, k).validate(data.len())?;
    let index = KnnIndex::build(&data);
    let t = a.t;
    let seed = ctx.seed();
    let rows = crate::par::try_map(zs.len(), |i| -> Result<ScoreEstimate> {
        let z = zs.row(i);
        let mut r = rng::stream(seed, &[i as u64]);
        let est = match kind {
            EstimatorKind::Exact => {
                let post = exact_posterior(&data, &schedule, z, t)?;
                let mean = post.mean(&data);
                ScoreEstimate {
                    score_hat: post.level.score_from_mean(&mean, &post.query),
                    mean_hat: mean,
                    ess: 1.0,
                    n_used: 0,
                }
            }
            EstimatorKind::McPosterior => mc_posterior(&data, &schedule, z, t, n, &mut r)?,
            EstimatorKind::Uniform => {
                snis_estimate(&data, &schedule, z, t, Proposal::Uniform, n, &mut r)?
            }
            _ => {
                let q = build_knn_proposal(&index, &schedule, z, t, k)?;
                snis_estimate(&data, &schedule, z, t, Proposal::Knn(&q), n, &mut r)?
            }
        };
        Ok(est)
    })?;

    let mut out = Output::open(ctx.out_path().as_deref())?;
    let d = data.dim();
    let mut header = vec!["row".to_string(), "ess".to_string()];
    header.extend((0..d).map(|j| format!("mean_{j}")));
    header.extend((0..d).map(|j| format!("score_{j}")));
    writeln!(out.csv, "{}", header.join(","))?;
    for (i, e) in rows.iter().enumerate() {
        write!(out.csv, "{i},{:?}", e.ess)?;
        for v in e.mean_hat.iter().chain(&e.score_hat) {
            write!(out.csv, ",{v:?}")?;
        }
        writeln!(out.csv)?;
    }
    out.csv.flush()?;
    writeln!(
        out.summary,
        "scored {} rows with {kind} at t={t}",
        rows.len()
    )?;
    Ok(ExitCode::SUCCESS)
}

fn parse_estimators(list: &str, n: usize, k: usize) -> Result<Vec<EstimatorSpec>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| Ok(EstimatorSpec::new(s.parse()?, n, k)))
        .collect()
}

fn cmd_bench(ctx: &Ctx, a: BenchArgs) -> Result<ExitCode> {
    let data = ctx.dataset(false)?;
    let schedule = ctx.schedule()?;
    let ev = &ctx.cfg.eval;
    let defaults = EvalProtocol::default();
    let t_grid = match (&a.t_grid, &ev.t_grid) {
        (Some(s), _) => parse_grid(s)?,
        (None, Some(g)) => g.resolve()?,
        (None, None) => defaults.t_grid.clone(),
    };
    let n = pick(a.n, ev.n, 256);
    let k = pick(a.k, ev.k, 64);
    let names = match (a.estimators, &ev.estimators) {
        (Some(s), _) => s,
        (None, Some(v)) => v.join(","),
        (None, None) => "knn,uniform,stf".into(),
    };
    let protocol = EvalProtocol {
        t_grid,
        m_points: pick(a.points, ev.points, defaults.m_points),
        reps: pick(a.reps, ev.reps, defaults.reps),
        estimators: parse_estimators(&names, n, k)?,
        master_seed: ctx.seed(),
    };
    let report = analysis::run_eval(&data, &schedule, &protocol)?;

    let mut out = Output::open(ctx.out_path().as_deref())?;
    report.write_csv(&mut out.csv)?;
    out.csv.flush()?;
    let s = &mut out.summary;
    write!(s, "{:>12}", "t")?;
    for e in &protocol.estimators {
        write!(s, " {:>14}", format!("mse[{}]", e.kind))?;
    }
    writeln!(s)?;
    for &t in &protocol.t_grid {
        write!(s, "{t:>12.5}")?;
        for e in &protocol.estimators {
            let row = report
                .rows
                .iter()
                .find(|r| r.t == t && r.estimator == *e && r.target == crate::oracle::Target::Mean)
                .expect("one row per (t, estimator, target)");
            write!(s, " {:>14.6e}", row.mse)?;
        }
        writeln!(s)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bounds(ctx: &Ctx, a: BoundsArgs) -> Result<ExitCode> {
    let data = ctx.dataset(true)?;
    let schedule = ctx.schedule()?;
    let b = &ctx.cfg.bounds;
    let bound = match a.bound.or_else(|| b.bound.clone()) {
        Some(v) => v.parse::<Bound>()?,
        None => Bound::Ratio,
    };
    let trials = pick(a.trials, b.trials, 1000);
    let k = pick(a.k, b.k, 16);
    let n = pick(a.n, b.n, 256);
    let report = analysis::bounds::verify(&data, &schedule, bound, trials, k, n, ctx.seed())?;
    if let Some(p) = ctx.out_path() {
        let mut w = BufWriter::new(File::create(&p)?);
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    let max_rho = report.rows.iter().map(|r| r.rho).fold(f64::NAN, f64::max);
    println!(
        "{} bound: {} violations / {trials} trials (N={}, k={k}, n={n}, max rho={max_rho:.6})",
        bound.as_str(),
        report.violations(),
        data.len()
    );
    Ok(if report.violations() == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_sample(ctx: &Ctx, a: SampleArgs) -> Result<ExitCode> {
    let data = ctx.dataset(false)?;
    let schedule = ctx.schedule()?;
    let s = &ctx.cfg.sampler;
    let mut cfg = SamplerConfig::for_schedule(&schedule);
    cfg.seed = ctx.seed();
    cfg.steps = pick(a.steps, s.steps, cfg.steps);
    cfg.n_samples = pick(a.samples, s.samples, cfg.n_samples);
    if let Some(v) = a.solver.or_else(|| s.solver.clone()) {
        cfg.solver = v.parse::<Solver>()?;
    }
    if let Some(v) = a.grid.or_else(|| s.grid.clone()) {
        cfg.grid = v.parse::<GridKind>()?;
    }
    if let Some(v) = a.handoff.or_else(|| s.handoff.clone()) {
        cfg.handoff = v.parse::<Handoff>()?;
    }
    cfg.t_switch = a.t_switch.or(s.t_switch);
    cfg.trace = a.trace || s.trace.unwrap_or(false);
    cfg.shared_batch = a.shared_batch || s.shared_batch.unwrap_or(false);
    let n = pick(a.n, s.n, 256);
    let k = pick(a.k, s.k, 64).min(data.len());
    let score = a
        .score
        .or_else(|| s.score.clone())
        .unwrap_or_else(|| "exact".into());
    cfg.score_source = match score.to_ascii_lowercase().as_str() {
        "exact" => ScoreSource::Exact,
        "knn" => ScoreSource::Knn { n, k },
        "uniform" => ScoreSource::Uniform { n },
        other => return Err(Error::Argument(format!("unknown score source '{other}'"))),
    };
    let samples = sampler::sample(&data, &schedule, &cfg)?;
    let mut out = Output::open(ctx.out_path().as_deref())?;
    samples.write_csv(&mut out.csv)?;
    out.csv.flush()?;
    writeln!(
        out.summary,
        "{} samples at t={} ({:?}, {} steps)",
        samples.states.len(),
        samples.t_final,
        cfg.solver,
        cfg.steps
    )?;
    Ok(ExitCode::SUCCESS)
}
