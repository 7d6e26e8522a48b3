//! Exact k-nearest-neighbour search in L2.
//!
//! Search runs in two passes. The screening pass computes
//! `||q||^2 - 2 q.x + ||x||^2` blockwise from the precomputed row norms and
//! keeps every row whose screened value lies within a rounding-error margin of
//! the k-th smallest. The refinement pass recomputes those candidates by
//! direct differences and sorts by `(distance, index)`. The result is
//! therefore identical to a full scan with the direct formula, ties included,
//! while the O(Nd) work stays in the dot-product form.

use std::cmp::Ordering;

use crate::dataset::DatasetStore;
use crate::error::{check_dim, Error, Result};
use crate::math::{dot, sq_dist, sq_norm};
use crate::par;

pub const DEFAULT_BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy)]
pub struct KnnIndex<'a> {
    data: &'a DatasetStore,
    block_size: usize,
}

/// The k nearest atoms of a query, nearest first.
///
/// `sq_dists` are the exact direct squared distances; `dists` are their
/// square roots.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    pub dists: Vec<f64>,
    pub sq_dists: Vec<f64>,
}

impl NeighborSet {
    fn from_sorted(pairs: &[(f64, usize)]) -> Self {
        Self {
            indices: pairs.iter().map(|c| c.1).collect(),
            dists: pairs.iter().map(|c| c.0.sqrt()).collect(),
            sq_dists: pairs.iter().map(|c| c.0).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Distance of the k-th (farthest retained) neighbour.
    pub fn kth_dist(&self) -> f64 {
        *self.dists.last().expect("neighbour sets are non-empty")
    }
}

#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl<'a> KnnIndex<'a> {
    pub fn build(data: &'a DatasetStore) -> Self {
        Self {
            data,
            block_size: DEFAULT_BLOCK,
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size.max(1);
        self
    }

    pub fn data(&self) -> &'a DatasetStore {
        self.data
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn validate(&self, query: &[f64], k: usize) -> Result<()> {
        check_dim(self.data.dim(), query.len())?;
        let n = self.data.len();
        if k == 0 || k > n {
            return Err(Error::Argument(format!("k must lie in 1..={n}, got {k}")));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("query has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn search(&self, query: &[f64], k: usize) -> Result<NeighborSet> {
        self.validate(query, k)?;
        let data = self.data;
        let n = data.len();
        let qn = sq_norm(query);

        let mut screened = vec![0.0; n];
        par::fill_chunks(&mut screened, self.block_size, |start, out| {
            for (off, slot) in out.iter_mut().enumerate() {
                let i = start + off;
                let v = qn - 2.0 * dot(query, data.row(i)) + data.sq_norms()[i];
                *slot = v.max(0.0);
            }
        });

        let mut kth = screened.clone();
        let (_, kth_val, _) = kth.select_nth_unstable_by(k - 1, f64::total_cmp);
        let kth_val = *kth_val;

        // Both the expansion and the direct sum are within (d + 2) eps (|q|^2 + |x|^2)
        // of the true value up to a factor 2; doubling covers the screening comparison.
        let max_xn = data.sq_norms().iter().copied().fold(0.0, f64::max);
        let slack = 4.0 * (data.dim() as f64 + 2.0) * f64::EPSILON * (qn + max_xn);
        let cutoff = kth_val + 2.0 * slack;

        let mut cand: Vec<(f64, usize)> = screened
            .iter()
            .enumerate()
            .filter(|(_, &v)| v <= cutoff)
            .map(|(i, _)| (sq_dist(query, data.row(i)), i))
            .collect();
        cand.sort_unstable_by(by_dist_then_index);
        cand.truncate(k);

        Ok(NeighborSet::from_sorted(&cand))
    }
}

/// Full scan with direct distances and a complete sort. O(N d + N log N).
pub fn brute_force_search(data: &DatasetStore, query: &[f64], k: usize) -> Result<NeighborSet> {
    KnnIndex::build(data).validate(query, k)?;
    let mut all: Vec<(f64, usize)> = data
        .rows()
        .enumerate()
        .map(|(i, r)| (sq_dist(query, r), i))
        .collect();
    all.sort_by(by_dist_then_index);
    all.truncate(k);
    Ok(NeighborSet::from_sorted(&all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SyntheticSpec};
    use crate::rng;

    fn line(xs: &[f64]) -> DatasetStore {
        DatasetStore::new(xs.to_vec(), 1).unwrap()
    }

    #[test]
    fn hand_checked_1d() {
        let d = line(&[0.0, 1.0, 5.0]);
        let nb = KnnIndex::build(&d).search(&[0.4], 2).unwrap();
        assert_eq!(nb.indices, vec![0, 1]);
        assert!((nb.dists[0] - 0.4).abs() < 1e-15);
        assert!((nb.dists[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn singleton() {
        let d = line(&[3.0]);
        let nb = KnnIndex::build(&d).search(&[-1.0], 1).unwrap();
        assert_eq!(nb.indices, vec![0]);
        assert_eq!(nb.dists, vec![4.0]);
    }

    #[test]
    fn exact_hit_is_zero_distance() {
        let d = generate(&SyntheticSpec::gmm(200, 16, 3, 0.2, 5)).unwrap();
        let idx = KnnIndex::build(&d);
        for i in [0, 17, 199] {
            let nb = idx.search(d.row(i), 3).unwrap();
            assert_eq!(nb.dists[0], 0.0);
            assert!(d.row(nb.indices[0]) == d.row(i));
        }
    }

    #[test]
    fn ties_break_by_index_and_duplicates_stay_finite() {
        let d = line(&[2.0, -2.0, 2.0, 0.0, -2.0, 2.0]);
        let nb = KnnIndex::build(&d).search(&[0.0], 5).unwrap();
        assert_eq!(nb.indices, vec![3, 0, 1, 2, 4]);
        let nb = KnnIndex::build(&d).search(&[2.0], 3).unwrap();
        assert_eq!(nb.indices, vec![0, 2, 5]);
        assert!(nb.dists.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn argument_errors() {
        let d = line(&[0.0, 1.0]);
        let idx = KnnIndex::build(&d);
        assert!(matches!(idx.search(&[0.0], 3), Err(Error::Argument(_))));
        assert!(matches!(idx.search(&[0.0], 0), Err(Error::Argument(_))));
        assert!(matches!(
            idx.search(&[0.0, 1.0], 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn small_blocks_match_oracle() {
        let d = generate(&SyntheticSpec::gmm(333, 7, 4, 0.1, 2)).unwrap();
        let idx = KnnIndex::build(&d).with_block_size(10);
        let mut r = rng::stream(3, &[]);
        for _ in 0..20 {
            let q: Vec<f64> = (0..7).map(|_| rng::normal(&mut r)).collect();
            for k in [1, 5, 333] {
                assert_eq!(
                    idx.search(&q, k).unwrap(),
                    brute_force_search(&d, &q, k).unwrap()
                );
            }
        }
    }

    #[test]
    fn far_offset_data_still_exact() {
        // large common offset stresses cancellation in the norm expansion
        let base = generate(&SyntheticSpec::uniform(400, 4, 8)).unwrap();
        let shifted: Vec<f64> = base.points().iter().map(|v| v * 1e-3 + 1e4).collect();
        let d = DatasetStore::new(shifted, 4).unwrap();
        let q = d.row(10).iter().map(|v| v + 1e-5).collect::<Vec<_>>();
        let idx = KnnIndex::build(&d);
        assert_eq!(
            idx.search(&q, 8).unwrap(),
            brute_force_search(&d, &q, 8).unwrap()
        );
    }
}
