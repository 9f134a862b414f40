//! Ranking and recall metrics for ground-to-satellite retrieval.
//!
//! Query `i` (a ground descriptor) has its true match at gallery position
//! `i`. Ranks are 1-based and optimistic: gallery items at exactly the same
//! distance as the true match do not push it down.

use crate::error::{Error, Result};
use crate::objective::BatchDistances;
use crate::tensor::{Real, Tensor};

/// Worker threads used for distance matrices, from `GEOCAPS_THREADS`
/// (default 1).
pub fn thread_count() -> usize {
    std::env::var("GEOCAPS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Squared Euclidean distance `2 − 2·a·b` between unit vectors, accumulated
/// in `f64` in index order.
pub fn sq_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.to_f64().unwrap_or(f64::NAN) * y.to_f64().unwrap_or(f64::NAN))
        .sum();
    2.0 - 2.0 * dot
}

fn rows<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::dim(format!("{what} descriptors must be [N, d], got {s:?}"))),
    }
}

/// Full `queries × gallery` distance matrix, row-major. Each entry is
/// computed independently, so the thread count never changes a value.
pub fn distance_matrix<T: Real>(queries: &Tensor<T>, gallery: &Tensor<T>, threads: usize) -> Result<Vec<f64>> {
    let (nq, d) = rows(queries, "query")?;
    let (ng, dg) = rows(gallery, "gallery")?;
    if d != dg {
        return Err(Error::dim(format!("query dimension {d} differs from gallery dimension {dg}")));
    }
    let (q, g) = (queries.data(), gallery.data());
    let mut out = vec![0.0; nq * ng];
    let fill = |first: usize, chunk: &mut [f64]| {
        for (r, row) in chunk.chunks_mut(ng).enumerate() {
            let qi = &q[(first + r) * d..(first + r + 1) * d];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = sq_distance(qi, &g[j * d..(j + 1) * d]);
            }
        }
    };
    let threads = threads.clamp(1, nq);
    if threads == 1 {
        fill(0, &mut out);
    } else {
        let per = nq.div_ceil(threads);
        std::thread::scope(|s| {
            for (t, chunk) in out.chunks_mut(per * ng).enumerate() {
                let fill = &fill;
                s.spawn(move || fill(t * per, chunk));
            }
        });
    }
    Ok(out)
}

/// 1 + number of entries strictly closer than `row[true_index]`.
pub fn rank_in_row(row: &[f64], true_index: usize) -> Result<usize> {
    let target = *row.get(true_index).ok_or_else(|| {
        Error::dim(format!("true index {true_index} out of range for gallery of {}", row.len()))
    })?;
    Ok(1 + row.iter().filter(|&&d| d < target).count())
}

/// Rank of `gallery[true_index]` among all gallery rows for `query`.
pub fn rank_of_true_match<T: Real>(query: &[T], gallery: &Tensor<T>, true_index: usize) -> Result<usize> {
    let (n, d) = rows(gallery, "gallery")?;
    if query.len() != d {
        return Err(Error::dim(format!("query has {} components, gallery rows {d}", query.len())));
    }
    if true_index >= n {
        return Err(Error::dim(format!("true index {true_index} out of range for gallery of {n}")));
    }
    let row: Vec<f64> = gallery.data().chunks_exact(d).map(|g| sq_distance(query, g)).collect();
    rank_in_row(&row, true_index)
}

/// Fraction of ranks `≤ k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// `ceil(p · N / 100)`, at least 1 and at most `N`.
pub fn top_percent_k(gallery_size: usize, percent: f64) -> usize {
    let k = (percent * gallery_size as f64 / 100.0).ceil();
    (k as usize).clamp(1, gallery_size.max(1))
}

pub fn recall_at_top_percent(ranks: &[usize], gallery_size: usize, percent: f64) -> Result<f64> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("percent must be in (0, 100], got {percent}")));
    }
    Ok(recall_at_k(ranks, top_percent_k(gallery_size, percent)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub n_queries: usize,
    pub gallery_size: usize,
    pub ranks: Vec<usize>,
    /// `(K, recall)` in the order requested.
    pub recall_at_k: Vec<(usize, f64)>,
    /// `(p, recall)` in the order requested.
    pub recall_at_top_percent: Vec<(f64, f64)>,
}

impl RecallReport {
    pub fn from_ranks(ranks: Vec<usize>, gallery_size: usize, k_list: &[usize], percent_list: &[f64]) -> Result<Self> {
        if let Some(&k) = k_list.iter().find(|&&k| k == 0) {
            return Err(Error::Config(format!("K must be >= 1, got {k}")));
        }
        let recall_at_k = k_list.iter().map(|&k| (k, recall_at_k(&ranks, k))).collect();
        let recall_at_top_percent = percent_list
            .iter()
            .map(|&p| recall_at_top_percent(&ranks, gallery_size, p).map(|r| (p, r)))
            .collect::<Result<_>>()?;
        Ok(RecallReport {
            n_queries: ranks.len(),
            gallery_size,
            ranks,
            recall_at_k,
            recall_at_top_percent,
        })
    }

    pub fn recall(&self, k: usize) -> f64 {
        recall_at_k(&self.ranks, k)
    }

    pub fn recall_top_percent(&self, percent: f64) -> f64 {
        recall_at_k(&self.ranks, top_percent_k(self.gallery_size, percent))
    }
}

/// Percentages always reported alongside the requested list.
pub const STANDARD_PERCENTS: [f64; 2] = [1.0, 10.0];

fn with_standard_percents(percent_list: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = STANDARD_PERCENTS.to_vec();
    for &p in percent_list {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Ranks from a distance matrix whose diagonal holds the true matches.
pub fn ranks_from_distances<T: Real>(d: &BatchDistances<T>) -> Result<Vec<usize>> {
    (0..d.size())
        .map(|a| {
            let row: Vec<f64> = d.row(a).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            rank_in_row(&row, a)
        })
        .collect()
}

/// Rank every ground query against the satellite gallery and report recall
/// at each K, at top 1% and 10%, and at any extra percentages.
pub fn recall_curve<T: Real>(
    ground: &Tensor<T>,
    satellite: &Tensor<T>,
    k_list: &[usize],
    percent_list: &[f64],
) -> Result<RecallReport> {
    let (nq, _) = rows(ground, "ground")?;
    let (ng, _) = rows(satellite, "satellite")?;
    if nq != ng {
        return Err(Error::dim(format!("{nq} ground descriptors but {ng} satellite descriptors")));
    }
    let dist = distance_matrix(ground, satellite, thread_count())?;
    let ranks = dist
        .chunks_exact(ng)
        .enumerate()
        .map(|(i, row)| rank_in_row(row, i))
        .collect::<Result<Vec<_>>>()?;
    RecallReport::from_ranks(ranks, ng, k_list, &with_standard_percents(percent_list))
}
