//! Energy distance and a permutation two-sample test.

use crate::error::{check_dim, Error, Result};
use crate::math::sq_dist;
use crate::par;
use crate::rng;

/// V-statistic energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|`.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let pooled = Pooled::new(a, b)?;
    let labels: Vec<bool> = (0..pooled.n).map(|i| i < a.len()).collect();
    Ok(pooled.statistic(&labels, a.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PermutationResult {
    pub statistic: f64,
    /// `(1 + #{permuted >= observed}) / (1 + permutations)`.
    pub p_value: f64,
    pub permutations: usize,
}

/// Permutation test of equal distributions using the energy distance.
/// Permutation `i` shuffles labels with a stream derived from `(seed, i)`.
pub fn permutation_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    permutations: usize,
    seed: u64,
) -> Result<PermutationResult> {
    let pooled = Pooled::new(a, b)?;
    let na = a.len();
    let labels: Vec<bool> = (0..pooled.n).map(|i| i < na).collect();
    let observed = pooled.statistic(&labels, na);
    let exceed: usize = par::map(permutations, |i| {
        let mut r = rng::stream(seed, &[i as u64]);
        let mut perm: Vec<usize> = (0..pooled.n).collect();
        // Fisher-Yates; only the first na positions matter
        for j in 0..na {
            let pick = j + rng::index(&mut r, pooled.n - j);
            perm.swap(j, pick);
        }
        let mut lab = vec![false; pooled.n];
        perm[..na].iter().for_each(|&i| lab[i] = true);
        usize::from(pooled.statistic(&lab, na) >= observed)
    })
    .into_iter()
    .sum();
    Ok(PermutationResult {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

/// Pairwise distances of the pooled sample, upper triangle row-major.
struct Pooled {
    n: usize,
    dist: Vec<f64>,
}

impl Pooled {
    fn new(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Argument("both samples must be non-empty".into()));
        }
        let dim = a[0].len();
        for row in a.iter().chain(b) {
            check_dim(dim, row.len())?;
        }
        let all: Vec<&[f64]> = a.iter().chain(b).map(|r| r.as_slice()).collect();
        let n = all.len();
        let rows = par::map(n, |i| {
            (i + 1..n)
                .map(|j| sq_dist(all[i], all[j]).sqrt())
                .collect::<Vec<f64>>()
        });
        Ok(Self {
            n,
            dist: rows.concat(),
        })
    }

    fn statistic(&self, in_a: &[bool], na: usize) -> f64 {
        let nb = self.n - na;
        let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
        let mut off = 0;
        for i in 0..self.n {
            let row = &self.dist[off..off + self.n - i - 1];
            off += row.len();
            for (d, &lj) in row.iter().zip(&in_a[i + 1..]) {
                match (in_a[i], lj) {
                    (true, true) => aa += d,
                    (false, false) => bb += d,
                    _ => ab += d,
                }
            }
        }
        let (na, nb) = (na as f64, nb as f64);
        2.0 * ab / (na * nb) - 2.0 * aa / (na * na) - 2.0 * bb / (nb * nb)
    }
}
