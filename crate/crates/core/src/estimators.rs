//! Posterior-mean (and hence score) estimators.
//!
//! All estimators return the posterior-mean estimate `mean_hat` together with
//! `score_hat = (mean_hat - z/s) / sigma^2`. The importance-sampling variants
//! weight draws by `p_t(z | x) / q(x)` in log domain and self-normalize with
//! max subtraction.

use std::collections::HashMap;

use crate::dataset::DatasetStore;
use crate::error::{check_dim, Error, Result};
use crate::knn::KnnIndex;
use crate::math::{logsumexp, sq_dist};
use crate::oracle::exact_posterior;
use crate::rng::{self, Stream};
use crate::schedules::{DiffusionSchedule, NoiseLevel};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimate {
    pub mean_hat: Vec<f64>,
    pub score_hat: Vec<f64>,
    /// Effective sample size `1 / sum w_bar^2` over the drawn batch.
    pub ess: f64,
    pub n_used: usize,
}

impl ScoreEstimate {
    fn new(level: &NoiseLevel, y: &[f64], mean_hat: Vec<f64>, ess: f64, n_used: usize) -> Self {
        let score_hat = level.score_from_mean(&mean_hat, y);
        Self {
            mean_hat,
            score_hat,
            ess,
            n_used,
        }
    }
}

/// Truncated nearest-neighbour proposal.
///
/// Each of the k nearest atoms gets mass proportional to its own likelihood;
/// every other atom gets the likelihood of the k-th neighbour. The N - k tail
/// atoms are kept as one lumped atom of mass `(N - k) p(z | x_k) / Z_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnProposal {
    /// `-d_j^2 / (2 sigma^2)`, nearest first.
    pub neighbor_log_lik: Vec<f64>,
    pub neighbor_indices: Vec<usize>,
    /// Log-likelihood of the k-th neighbour, shared by all tail atoms.
    pub tail_log_lik: f64,
    /// `log(sum_j p(z | x_j) + (N - k) p(z | x_k))`.
    pub log_zq: f64,
    pub k: usize,
    pub n_total: usize,
    /// The search query `z / s(t)`.
    pub query: Vec<f64>,
    pub level: NoiseLevel,
}

impl KnnProposal {
    /// `(m, log Z_q - m)` with `m` the largest neighbour log-likelihood.
    /// Normalizing relative to `m` keeps the probabilities accurate when the
    /// log-likelihoods themselves are large.
    fn frame(&self) -> (f64, f64) {
        let m = self.neighbor_log_lik[0];
        let tail = (self.n_total - self.k) as f64 * (self.tail_log_lik - m).exp();
        let s: f64 = self
            .neighbor_log_lik
            .iter()
            .map(|l| (l - m).exp())
            .sum::<f64>()
            + tail;
        (m, s.ln())
    }

    /// Normalized probabilities of the k neighbours followed by the lumped
    /// tail atom.
    pub fn atom_probs(&self) -> Vec<f64> {
        let (m, ls) = self.frame();
        let mut p: Vec<f64> = self
            .neighbor_log_lik
            .iter()
            .map(|l| (l - m - ls).exp())
            .collect();
        p.push(self.tail_mass());
        p
    }

    /// Total proposal mass outside the neighbour set.
    pub fn tail_mass(&self) -> f64 {
        let rest = self.n_total - self.k;
        if rest == 0 {
            return 0.0;
        }
        let (m, ls) = self.frame();
        ((self.tail_log_lik - m) + (rest as f64).ln() - ls).exp()
    }

    /// Normalized log proposal for every dataset atom.
    pub fn full_log_probs(&self) -> Vec<f64> {
        let (m, ls) = self.frame();
        let mut out = vec![self.tail_log_lik - m - ls; self.n_total];
        for (&i, &l) in self.neighbor_indices.iter().zip(&self.neighbor_log_lik) {
            out[i] = l - m - ls;
        }
        out
    }

    /// `Z_q / P` for a posterior's constant-free log-likelihoods, computed in
    /// a shared frame so that it is exactly representable as 1 when `k = N`.
    pub fn ratio_to(&self, log_liks: &[f64]) -> f64 {
        let (m, ls) = self.frame();
        let p: f64 = log_liks.iter().map(|l| (l - m).exp()).sum();
        ls.exp() / p
    }
}

/// Proposal for [`snis_estimate`].
#[derive(Debug, Clone, Copy)]
pub enum Proposal<'p> {
    Knn(&'p KnnProposal),
    Uniform,
}

/// Inverse-CDF sampler over a fixed list of atoms.
#[derive(Debug, Clone)]
pub struct Categorical {
    cdf: Vec<f64>,
}

impl Categorical {
    /// From non-negative masses (need not sum to one).
    pub fn new(masses: &[f64]) -> Result<Self> {
        let mut acc = 0.0;
        let cdf: Vec<f64> = masses
            .iter()
            .map(|&m| {
                acc += m;
                acc
            })
            .collect();
        if !(acc > 0.0 && acc.is_finite()) {
            return Err(Error::Argument(
                "categorical masses must have a positive finite sum".into(),
            ));
        }
        Ok(Self { cdf })
    }

    pub fn draw(&self, rng: &mut Stream) -> usize {
        let total = *self.cdf.last().unwrap();
        let u = rng::uniform(rng) * total;
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }
}

/// Normalized weights from log weights via max subtraction.
pub fn self_normalize(log_w: &[f64]) -> Vec<f64> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Weighted mean of drawn atoms. Weights of repeated atoms are summed before
/// normalizing, so a batch that hits a single atom returns it exactly.
fn weighted_mean(data: &DatasetStore, draws: &[usize], log_w: &[f64]) -> (Vec<f64>, f64) {
    let w_bar = self_normalize(log_w);
    let ess = 1.0 / w_bar.iter().map(|w| w * w).sum::<f64>();

    let mut order: Vec<usize> = Vec::new();
    let mut mass: HashMap<usize, f64> = HashMap::new();
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (&i, &l) in draws.iter().zip(log_w) {
        let w = (l - m).exp();
        mass.entry(i).and_modify(|v| *v += w).or_insert_with(|| {
            order.push(i);
            w
        });
    }
    let total: f64 = order.iter().map(|i| mass[i]).sum();
    let mut mean = vec![0.0; data.dim()];
    for i in &order {
        let c = mass[i] / total;
        mean.iter_mut()
            .zip(data.row(*i))
            .for_each(|(a, x)| *a += c * x);
    }
    (mean, ess)
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Argument("sample count n must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Single-sample Monte Carlo: the generating point itself.
pub fn mc_single(
    schedule: &DiffusionSchedule,
    x_ref: &[f64],
    z: &[f64],
    t: f64,
) -> Result<ScoreEstimate> {
    check_dim(x_ref.len(), z.len())?;
    let level = schedule.at(t)?;
    let y = level.scaled(z);
    Ok(ScoreEstimate::new(&level, &y, x_ref.to_vec(), 1.0, 1))
}

/// Averages `n` draws from the exact posterior. O(N) per call.
pub fn mc_posterior(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
    n: usize,
    rng: &mut Stream,
) -> Result<ScoreEstimate> {
    check_n(n)?;
    let post = exact_posterior(data, schedule, z, t)?;
    let sampler = PosteriorSampler::new(&post.log_probs)?;
    let draws: Vec<usize> = (0..n).map(|_| sampler.draw(rng)).collect();
    let (mean, ess) = weighted_mean(data, &draws, &vec![0.0; n]);
    Ok(ScoreEstimate::new(&post.level, &post.query, mean, ess, n))
}

/// Draws atom indices from a normalized log posterior by inverse CDF over
/// atoms sorted by decreasing probability (ties by index).
#[derive(Debug, Clone)]
pub struct PosteriorSampler {
    order: Vec<usize>,
    cat: Categorical,
}

impl PosteriorSampler {
    pub fn new(log_probs: &[f64]) -> Result<Self> {
        let mut order: Vec<usize> = (0..log_probs.len()).collect();
        order.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
        let masses: Vec<f64> = order.iter().map(|&i| log_probs[i].exp()).collect();
        Ok(Self {
            cat: Categorical::new(&masses)?,
            order,
        })
    }

    pub fn draw(&self, rng: &mut Stream) -> usize {
        self.order[self.cat.draw(rng)]
    }
}

/// Builds the truncated nearest-neighbour proposal for `(z, t)`.
pub fn build_knn_proposal(
    index: &KnnIndex<'_>,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
    k: usize,
) -> Result<KnnProposal> {
    let data = index.data();
    check_dim(data.dim(), z.len())?;
    let level = schedule.at(t)?;
    let query = level.scaled(z);
    let nb = index.search(&query, k)?;
    let neighbor_log_lik: Vec<f64> = nb
        .sq_dists
        .iter()
        .map(|&sq| level.log_lik_from_sq(sq))
        .collect();
    let tail_log_lik = *neighbor_log_lik.last().unwrap();
    let n_total = data.len();
    let mut terms = neighbor_log_lik.clone();
    if n_total > k {
        terms.push(((n_total - k) as f64).ln() + tail_log_lik);
    }
    let log_zq = logsumexp(&terms);
    Ok(KnnProposal {
        neighbor_log_lik,
        neighbor_indices: nb.indices,
        tail_log_lik,
        log_zq,
        k,
        n_total,
        query,
        level,
    })
}

/// Draws uniformly from the atoms not in `members` (sorted ascending).
struct TailSampler {
    n: usize,
    members: Vec<usize>,
    complement: Option<Vec<usize>>,
}

impl TailSampler {
    fn new(n: usize, neighbors: &[usize]) -> Self {
        let mut members = neighbors.to_vec();
        members.sort_unstable();
        // rejection needs N / (N - k) tries on average; enumerate when that exceeds 2
        let complement = (2 * (n - members.len()) < n).then(|| {
            (0..n)
                .filter(|i| members.binary_search(i).is_err())
                .collect()
        });
        Self {
            n,
            members,
            complement,
        }
    }

    fn draw(&self, rng: &mut Stream) -> usize {
        match &self.complement {
            Some(c) => c[rng::index(rng, c.len())],
            None => loop {
                let i = rng::index(rng, self.n);
                if self.members.binary_search(&i).is_err() {
                    return i;
                }
            },
        }
    }
}

/// Self-normalized importance sampling with `n` i.i.d. draws (with
/// replacement) from `proposal`.
///
/// For the nearest-neighbour proposal, neighbour weights use the distances
/// returned by the search; a tail draw picks a uniform non-neighbour and
/// evaluates its likelihood from the point itself.
pub fn snis_estimate(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: f64,
    proposal: Proposal<'_>,
    n: usize,
    rng: &mut Stream,
) -> Result<ScoreEstimate> {
    check_n(n)?;
    check_dim(data.dim(), z.len())?;
    let level = schedule.at(t)?;
    let mut draws = Vec::with_capacity(n);
    let mut log_w = Vec::with_capacity(n);
    let y = match proposal {
        Proposal::Uniform => {
            let y = level.scaled(z);
            for _ in 0..n {
                let i = rng::index(rng, data.len());
                draws.push(i);
                // q = 1/N is constant and drops out after normalization
                log_w.push(level.log_lik_from_sq(sq_dist(&y, data.row(i))));
            }
            y
        }
        Proposal::Knn(q) => {
            if q.n_total != data.len() || q.query.len() != data.dim() {
                return Err(Error::Argument(
                    "proposal was built for a different dataset".into(),
                ));
            }
            let atoms = Categorical::new(&q.atom_probs())?;
            let tail = (q.k < q.n_total).then(|| TailSampler::new(q.n_total, &q.neighbor_indices));
            // p / q is Z_q on every neighbour and Z_q p(z|x_i) / p(z|x_k) in the
            // tail; the common Z_q drops out after normalization
            for _ in 0..n {
                let a = atoms.draw(rng);
                if a < q.k {
                    draws.push(q.neighbor_indices[a]);
                    log_w.push(0.0);
                } else {
                    let i = tail
                        .as_ref()
                        .expect("tail atom has positive mass")
                        .draw(rng);
                    draws.push(i);
                    let ll = q.level.log_lik_from_sq(sq_dist(&q.query, data.row(i)));
                    log_w.push(ll - q.tail_log_lik);
                }
            }
            q.query.clone()
        }
    };
    let (mean, ess) = weighted_mean(data, &draws, &log_w);
    Ok(ScoreEstimate::new(&level, &y, mean, ess, n))
}

/// Uniform-proposal SNIS whose batch always contains the generating atom
/// `x_ref`, weighted as if it had been drawn from the uniform proposal.
pub fn stf_estimate(
    data: &DatasetStore,
    schedule: &DiffusionSchedule,
    x_ref: usize,
    z: &[f64],
    t: f64,
    n: usize,
    rng: &mut Stream,
) -> Result<ScoreEstimate> {
    if n < 2 {
        return Err(Error::Argument(format!("stf needs n >= 2, got {n}")));
    }
    if x_ref >= data.len() {
        return Err(Error::Argument(format!("x_ref {x_ref} out of range")));
    }
    check_dim(data.dim(), z.len())?;
    let level = schedule.at(t)?;
    let y = level.scaled(z);
    let mut draws = Vec::with_capacity(n);
    draws.push(x_ref);
    draws.extend((1..n).map(|_| rng::index(rng, data.len())));
    let log_w: Vec<f64> = draws
        .iter()
        .map(|&i| level.log_lik_from_sq(sq_dist(&y, data.row(i))))
        .collect();
    let (mean, ess) = weighted_mean(data, &draws, &log_w);
    Ok(ScoreEstimate::new(&level, &y, mean, ess, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact_posterior_mean;

    fn line(xs: &[f64]) -> DatasetStore {
        DatasetStore::new(xs.to_vec(), 1).unwrap()
    }

    fn edm() -> DiffusionSchedule {
        DiffusionSchedule::edm()
    }

    #[test]
    fn mc_single_examples() {
        let s = edm();
        let e = mc_single(&s, &[0.7, -1.0], &[0.7, -1.0], 0.4).unwrap();
        assert_eq!(e.score_hat, vec![0.0, 0.0]);
        let e = mc_single(&s, &[2.0], &[0.0], 1.0).unwrap();
        assert_eq!(e.score_hat, vec![2.0]);
        assert_eq!((e.ess, e.n_used), (1.0, 1));
    }

    #[test]
    fn knn_proposal_hand_values() {
        // masses {1, e^-0.5} on the neighbours plus (3-2) e^-0.5 in the tail
        let d = line(&[0.0, 1.0, 5.0]);
        let idx = KnnIndex::build(&d);
        let q = build_knn_proposal(&idx, &edm(), &[0.0], 1.0, 2).unwrap();
        assert!((q.log_zq.exp() - 2.213061).abs() < 1e-5);
        assert_eq!(q.neighbor_indices, vec![0, 1]);
        assert_eq!(q.tail_log_lik, -0.5);
        let p = q.atom_probs();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(
            q.tail_log_lik
                <= q.neighbor_log_lik
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn full_knn_proposal_has_no_tail() {
        let d = line(&[0.0, 1.0, 5.0]);
        let q = build_knn_proposal(&KnnIndex::build(&d), &edm(), &[0.3], 1.0, 3).unwrap();
        assert_eq!(q.tail_mass(), 0.0);
        let post = exact_posterior(&d, &edm(), &[0.3], 1.0).unwrap();
        for (a, b) in q.full_log_probs().iter().zip(&post.log_probs) {
            assert!((a.exp() - b.exp()).abs() < 1e-12);
        }
        assert!(build_knn_proposal(&KnnIndex::build(&d), &edm(), &[0.3], 1.0, 4).is_err());
    }

    #[test]
    fn n_equals_one_returns_the_drawn_atom() {
        let d = line(&[-3.0, 0.5, 2.25, 9.0]);
        let idx = KnnIndex::build(&d);
        let q = build_knn_proposal(&idx, &edm(), &[1.0], 2.0, 2).unwrap();
        for seed in 0..50 {
            for prop in [Proposal::Knn(&q), Proposal::Uniform] {
                let mut r = rng::stream(seed, &[]);
                let e = snis_estimate(&d, &edm(), &[1.0], 2.0, prop, 1, &mut r).unwrap();
                assert!(d.points().contains(&e.mean_hat[0]));
                assert_eq!(e.ess, 1.0);
            }
        }
    }

    #[test]
    fn concentrated_posterior_returns_atom_exactly() {
        let d = line(&[0.1, 1.0, 3.0]);
        let idx = KnnIndex::build(&d);
        let q = build_knn_proposal(&idx, &edm(), &[0.1], 0.01, 3).unwrap();
        for seed in 0..20 {
            let mut r = rng::stream(seed, &[]);
            let e = snis_estimate(&d, &edm(), &[0.1], 0.01, Proposal::Knn(&q), 16, &mut r).unwrap();
            assert_eq!(e.mean_hat, vec![0.1]);
            let mut r = rng::stream(seed, &[1]);
            let e = stf_estimate(&d, &edm(), 0, &[0.1], 0.01, 16, &mut r).unwrap();
            assert_eq!(e.mean_hat, vec![0.1]);
            let mut r = rng::stream(seed, &[2]);
            let e = mc_posterior(&d, &edm(), &[0.1], 0.01, 16, &mut r).unwrap();
            assert_eq!(e.mean_hat, vec![0.1]);
        }
    }

    #[test]
    fn argument_errors() {
        let d = line(&[0.0, 1.0]);
        let mut r = rng::stream(0, &[]);
        assert!(snis_estimate(&d, &edm(), &[0.0], 1.0, Proposal::Uniform, 0, &mut r).is_err());
        assert!(stf_estimate(&d, &edm(), 0, &[0.0], 1.0, 1, &mut r).is_err());
        assert!(stf_estimate(&d, &edm(), 2, &[0.0], 1.0, 4, &mut r).is_err());
        assert!(mc_posterior(&d, &edm(), &[0.0], 0.0, 4, &mut r).is_err());
        assert!(mc_posterior(&d, &edm(), &[0.0], 1.0, 0, &mut r).is_err());
    }

    #[test]
    fn tail_sampler_avoids_members() {
        for (n, members) in [(10, vec![3, 1]), (10, vec![0, 1, 2, 3, 4, 5, 6, 8, 9])] {
            let s = TailSampler::new(n, &members);
            let mut r = rng::stream(1, &[]);
            for _ in 0..500 {
                assert!(!members.contains(&s.draw(&mut r)));
            }
        }
    }

    #[test]
    fn mc_posterior_large_n_near_mean() {
        let d = line(&[-1.0, 0.0, 2.0, 3.0]);
        let mu = exact_posterior_mean(&d, &edm(), &[0.8], 1.0).unwrap()[0];
        let post = exact_posterior(&d, &edm(), &[0.8], 1.0).unwrap();
        let var = post.variance_diag(&d, &[mu])[0];
        let mut r = rng::stream(5, &[]);
        let n = 10_000;
        let e = mc_posterior(&d, &edm(), &[0.8], 1.0, n, &mut r).unwrap();
        assert!((e.mean_hat[0] - mu).abs() < 3.0 * (var / n as f64).sqrt());
        assert_eq!(e.ess.round() as usize, n);
    }
}
