//! Exact L2 retrieval over gallery features and candidate selection.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::gallery::Gallery;

pub const DEFAULT_K: usize = 10;

/// Borrowed row-major `N × F` feature block.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMatrix<'a> {
    pub rows: usize,
    pub dim: usize,
    pub data: &'a [f32],
}

impl<'a> FeatureMatrix<'a> {
    pub fn new(dim: usize, data: &'a [f32]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                context: "feature matrix",
                expected: data.len() / dim * dim,
                actual: data.len(),
            });
        }
        Ok(Self {
            rows: data.len() / dim,
            dim,
            data,
        })
    }

    pub fn of(g: &'a Gallery) -> Self {
        Self {
            rows: g.len(),
            dim: g.feat_dim(),
            data: g.feature_matrix(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Euclidean distance between a 64-bit query and a 32-bit stored row,
/// accumulated sequentially in 64-bit.
#[inline]
pub fn l2_distance(query: &[f64], row: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (q, &x) in query.iter().zip(row) {
        let d = q - f64::from(x);
        acc += d * d;
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl Neighbor {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

/// Nearest records, ascending by distance with ties broken by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanResult {
    pub neighbors: Vec<Neighbor>,
}

impl ScanResult {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.neighbors.iter().map(|n| n.index).collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.neighbors.iter().map(|n| n.distance).collect()
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Neighbor>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, n: Neighbor) {
        if self.heap.len() < self.k {
            self.heap.push(n);
        } else if let Some(worst) = self.heap.peek() {
            if n < *worst {
                self.heap.pop();
                self.heap.push(n);
            }
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec()
    }
}

fn check_scan(features: &FeatureMatrix<'_>, query: &[f64], k: usize) -> Result<()> {
    check_len("query", features.dim, query.len())?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

fn scan_range(
    features: &FeatureMatrix<'_>,
    query: &[f64],
    k: usize,
    excluded: &[usize],
    rows: std::ops::Range<usize>,
) -> Vec<Neighbor> {
    let mut top = TopK::new(k);
    for i in rows {
        if excluded.contains(&i) {
            continue;
        }
        top.push(Neighbor {
            index: i,
            distance: l2_distance(query, features.row(i)),
        });
    }
    top.into_sorted()
}

/// Exact top-`k` over every row not listed in `excluded`.
pub fn scan_top_k(
    features: FeatureMatrix<'_>,
    query: &[f64],
    k: usize,
    excluded: &[usize],
) -> Result<ScanResult> {
    check_scan(&features, query, k)?;
    let neighbors = scan_range(&features, query, k, excluded, 0..features.rows);
    if neighbors.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(ScanResult { neighbors })
}

/// Same result as [`scan_top_k`], with the rows split into `partitions`
/// contiguous blocks scanned in parallel and merged in block order.
pub fn par_scan_top_k(
    features: FeatureMatrix<'_>,
    query: &[f64],
    k: usize,
    excluded: &[usize],
    partitions: usize,
) -> Result<ScanResult> {
    check_scan(&features, query, k)?;
    let parts = partitions.clamp(1, features.rows.max(1));
    let chunk = features.rows.div_ceil(parts).max(1);
    let partial: Vec<Vec<Neighbor>> = (0..parts)
        .into_par_iter()
        .map(|p| {
            let start = (p * chunk).min(features.rows);
            let end = ((p + 1) * chunk).min(features.rows);
            scan_range(&features, query, k, excluded, start..end)
        })
        .collect();
    let mut top = TopK::new(k);
    for n in partial.into_iter().flatten() {
        top.push(n);
    }
    let neighbors = top.into_sorted();
    if neighbors.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(ScanResult { neighbors })
}

/// Softmax of negative distances over the scan result.
pub fn selection_probabilities(result: &ScanResult) -> Vec<f64> {
    let Some(min) = result.neighbors.iter().map(|n| n.distance).min_by(f64::total_cmp) else {
        return Vec::new();
    };
    let weights: Vec<f64> = result
        .neighbors
        .iter()
        .map(|n| (-(n.distance - min)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Draw a record index with probability proportional to `exp(-distance)`.
pub fn sample_candidate(result: &ScanResult, rng: &mut impl rand::Rng) -> Result<usize> {
    if result.is_empty() {
        return Err(Error::EmptyResult);
    }
    let probs = selection_probabilities(result);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (n, p) in result.neighbors.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return Ok(n.index);
        }
    }
    Ok(result.neighbors[result.len() - 1].index)
}

/// The most probable (nearest) record.
pub fn greedy_candidate(result: &ScanResult) -> Result<usize> {
    result
        .neighbors
        .first()
        .map(|n| n.index)
        .ok_or(Error::EmptyResult)
}

/// Uniformly random starting candidate.
pub fn initial_candidate(n: usize, rng: &mut impl rand::Rng) -> Result<usize> {
    if n == 0 {
        return Err(Error::EmptyResult);
    }
    Ok(rng.random_range(0..n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng as _;

    fn result(dists: &[f64]) -> ScanResult {
        ScanResult {
            neighbors: dists
                .iter()
                .enumerate()
                .map(|(i, &d)| Neighbor { index: i, distance: d })
                .collect(),
        }
    }

    fn matrix(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = SeedStream::new(seed).rng();
        (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn full_scan_orders_everything() {
        let data = matrix(30, 4, 1);
        let fm = FeatureMatrix::new(4, &data).unwrap();
        let q = vec![0.1, 0.2, -0.3, 0.0];
        let res = scan_top_k(fm, &q, 30, &[]).unwrap();
        assert_eq!(res.len(), 30);
        assert!(res.neighbors.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn exact_match_comes_first() {
        let data = matrix(50, 8, 2);
        let fm = FeatureMatrix::new(8, &data).unwrap();
        let q: Vec<f64> = fm.row(17).iter().map(|&x| f64::from(x)).collect();
        let res = scan_top_k(fm, &q, 5, &[]).unwrap();
        assert_eq!(res.neighbors[0], Neighbor { index: 17, distance: 0.0 });
    }

    #[test]
    fn ties_break_by_index_and_exclusion_holds() {
        let data = vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 0.0, 0.5, 0.5];
        let fm = FeatureMatrix::new(2, &data).unwrap();
        let res = scan_top_k(fm, &[1.0, 0.0], 2, &[]).unwrap();
        assert_eq!(res.indices(), vec![0, 2]);
        let res = scan_top_k(fm, &[1.0, 0.0], 2, &[0]).unwrap();
        assert_eq!(res.indices(), vec![2, 3]);
        assert!(matches!(
            scan_top_k(fm, &[1.0, 0.0], 2, &[0, 1, 2, 3]),
            Err(Error::EmptyResult)
        ));
        assert!(scan_top_k(fm, &[1.0], 2, &[]).is_err());
        assert!(scan_top_k(fm, &[1.0, 0.0], 0, &[]).is_err());
    }

    #[test]
    fn parallel_scan_is_identical() {
        let data = matrix(5000, 16, 3);
        let fm = FeatureMatrix::new(16, &data).unwrap();
        let q = vec![0.05; 16];
        let serial = scan_top_k(fm, &q, 25, &[3, 9]).unwrap();
        for parts in [1, 2, 7, 64] {
            assert_eq!(par_scan_top_k(fm, &q, 25, &[3, 9], parts).unwrap(), serial);
        }
    }

    #[test]
    fn probability_closed_forms() {
        let p = selection_probabilities(&result(&[0.7; 4]));
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let p = selection_probabilities(&result(&[0.0, std::f64::consts::LN_2]));
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = selection_probabilities(&result(&[0.1, 0.4, 0.4, 2.0]));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn greedy_picks_first() {
        let r = ScanResult {
            neighbors: vec![
                Neighbor { index: 4, distance: 0.0 },
                Neighbor { index: 9, distance: 0.0 },
            ],
        };
        assert_eq!(greedy_candidate(&r).unwrap(), 4);
        assert!(greedy_candidate(&ScanResult::default()).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let r = result(&[0.1, 0.2, 0.3]);
        let draw = |s| {
            let mut rng = SeedStream::new(s).rng();
            (0..20).map(|_| sample_candidate(&r, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn initial_candidate_cases() {
        let mut rng = SeedStream::new(1).rng();
        assert_eq!(initial_candidate(1, &mut rng).unwrap(), 0);
        assert!(initial_candidate(0, &mut rng).is_err());
        let a = initial_candidate(1000, &mut SeedStream::new(8).rng()).unwrap();
        let b = initial_candidate(1000, &mut SeedStream::new(8).rng()).unwrap();
        assert_eq!(a, b);
    }
}
