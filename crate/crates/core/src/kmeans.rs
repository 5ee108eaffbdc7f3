//! Exact Lloyd k-means.
//!
//! Distances are squared Euclidean. Row-level work (assignment, seeding
//! distance updates) is split into fixed-size row shards and the centroid
//! update is split over clusters, with every cluster summed in row order.
//! Neither depends on the worker count, so results are bitwise stable
//! across [`Exec`] policies and thread pools.

use rand::seq::index;
use rand::Rng;

use crate::exec::{self, Exec};
use crate::rng;

const ROW_SHARD: usize = 1024;
const CLUSTER_SHARD: usize = 64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KMeansError {
    #[error("k = {k} exceeds the number of rows ({n})")]
    TooFewRows { k: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid k-means config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Seeding {
    /// `k` distinct rows chosen uniformly.
    RandomRows,
    /// D² sampling.
    #[default]
    PlusPlus,
    /// Deterministic farthest-first traversal. Starts from the
    /// lexicographically smallest row and breaks ties by row value, never by
    /// position, so the chosen centroids do not depend on row order.
    MaxMin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the mean centroid displacement drops below
    /// `tol * mean row norm`.
    pub tol: f64,
    pub seed: u64,
    pub seeding: Seeding,
    pub exec: Exec,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        KMeansConfig {
            k,
            max_iters: 50,
            tol: 1e-4,
            seed: 0,
            seeding: Seeding::PlusPlus,
            exec: Exec::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_seeding(mut self, seeding: Seeding) -> Self {
        self.seeding = seeding;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn validate(&self, n: usize) -> Result<(), KMeansError> {
        if self.k == 0 {
            return Err(KMeansError::InvalidConfig("k must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(KMeansError::InvalidConfig("max_iters must be positive".into()));
        }
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return Err(KMeansError::InvalidConfig(format!("tol must be >= 0, got {}", self.tol)));
        }
        if self.k > n {
            return Err(KMeansError::TooFewRows { k: self.k, n });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub dim: usize,
    /// `k * dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignment: Vec<u32>,
    /// Sum of squared distances from each row to its assigned centroid.
    pub inertia: f64,
    /// Inertia after the assignment step of each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<u64> {
        let mut s = vec![0u64; self.k()];
        for &a in &self.assignment {
            s[a as usize] += 1;
        }
        s
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn sq_dist_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[inline]
fn nearest(row: &[f32], centroids: &[f32], dim: usize) -> (u32, f32) {
    let mut best = 0u32;
    let mut best_d = f32::INFINITY;
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(row, cent);
        if d < best_d {
            best_d = d;
            best = c as u32;
        }
    }
    (best, best_d)
}

fn assign_with_dist(data: &[f32], centroids: &[f32], dim: usize, exec: Exec) -> Vec<(u32, f32)> {
    let n = data.len() / dim;
    let mut out = vec![(0u32, 0f32); n];
    exec::for_each_chunk_mut(exec, &mut out, ROW_SHARD, |shard, chunk| {
        let base = shard * ROW_SHARD;
        for (j, slot) in chunk.iter_mut().enumerate() {
            let i = base + j;
            *slot = nearest(&data[i * dim..(i + 1) * dim], centroids, dim);
        }
    });
    out
}

/// Index of the nearest centroid for every row; ties go to the lowest
/// centroid index.
pub fn assign_to_centroids(
    rows: &[f32],
    centroids: &[f32],
    dim: usize,
    exec: Exec,
) -> Result<Vec<u32>, KMeansError> {
    if dim == 0 || !rows.len().is_multiple_of(dim) || !centroids.len().is_multiple_of(dim) {
        return Err(KMeansError::DimensionMismatch(format!(
            "rows len {} and centroids len {} are not multiples of dim {}",
            rows.len(),
            centroids.len(),
            dim
        )));
    }
    if centroids.is_empty() && !rows.is_empty() {
        return Err(KMeansError::InvalidConfig("no centroids".into()));
    }
    Ok(assign_with_dist(rows, centroids, dim, exec)
        .into_iter()
        .map(|(a, _)| a)
        .collect())
}

/// Sequential assignment, kept separate for benchmarking against the
/// sharded path.
pub fn assign_sequential(rows: &[f32], centroids: &[f32], dim: usize) -> Vec<u32> {
    rows.chunks_exact(dim)
        .map(|r| nearest(r, centroids, dim).0)
        .collect()
}

fn lex_cmp(a: &[f32], b: &[f32]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => {}
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn update_min_dist(data: &[f32], dim: usize, center: &[f32], min_d: &mut [f64], exec: Exec) {
    exec::for_each_chunk_mut(exec, min_d, ROW_SHARD, |shard, chunk| {
        let base = shard * ROW_SHARD;
        for (j, m) in chunk.iter_mut().enumerate() {
            let i = base + j;
            let d = sq_dist(&data[i * dim..(i + 1) * dim], center) as f64;
            if d < *m {
                *m = d;
            }
        }
    });
}

fn seed_centroids(data: &[f32], dim: usize, cfg: &KMeansConfig) -> Vec<f32> {
    let n = data.len() / dim;
    let k = cfg.k;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    match cfg.seeding {
        Seeding::RandomRows => {
            let mut r = rng::stream(cfg.seed);
            let mut picks = index::sample(&mut r, n, k).into_vec();
            picks.sort_unstable();
            for i in picks {
                centroids.extend_from_slice(row(i));
            }
        }
        Seeding::PlusPlus => {
            let mut r = rng::stream(cfg.seed);
            let first = r.random_range(0..n);
            centroids.extend_from_slice(row(first));
            let mut min_d = vec![f64::INFINITY; n];
            update_min_dist(data, dim, row(first), &mut min_d, cfg.exec);
            for _ in 1..k {
                let total: f64 = min_d.iter().sum();
                let pick = if total > 0.0 {
                    let target = r.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = n - 1;
                    for (i, &d) in min_d.iter().enumerate() {
                        acc += d;
                        if acc > target && d > 0.0 {
                            pick = i;
                            break;
                        }
                    }
                    // float slop at the top end can leave pick on a zero-weight row
                    while min_d[pick] == 0.0 && pick > 0 {
                        pick -= 1;
                    }
                    pick
                } else {
                    r.random_range(0..n)
                };
                centroids.extend_from_slice(row(pick));
                update_min_dist(data, dim, row(pick), &mut min_d, cfg.exec);
            }
        }
        Seeding::MaxMin => {
            let first = (0..n).min_by(|&a, &b| lex_cmp(row(a), row(b))).unwrap();
            centroids.extend_from_slice(row(first));
            let mut min_d = vec![f64::INFINITY; n];
            update_min_dist(data, dim, row(first), &mut min_d, cfg.exec);
            for _ in 1..k {
                let mut pick = 0;
                for i in 1..n {
                    let better = min_d[i] > min_d[pick]
                        || (min_d[i] == min_d[pick]
                            && lex_cmp(row(i), row(pick)) == std::cmp::Ordering::Less);
                    if better {
                        pick = i;
                    }
                }
                centroids.extend_from_slice(row(pick));
                update_min_dist(data, dim, row(pick), &mut min_d, cfg.exec);
            }
        }
    }
    centroids
}

/// Reseed every empty cluster with the row farthest from its centroid in
/// the currently largest cluster (ties: lowest cluster id, then lowest row).
/// The moved row's distance drops to zero, so inertia never increases.
/// Returns the number of repaired clusters.
pub(crate) fn repair_empty_clusters(
    data: &[f32],
    dim: usize,
    assign: &mut [(u32, f32)],
    centroids: &mut [f32],
) -> usize {
    let k = centroids.len() / dim;
    let mut counts = vec![0usize; k];
    for &(a, _) in assign.iter() {
        counts[a as usize] += 1;
    }
    let mut repaired = 0;
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut largest = 0;
        for c in 1..k {
            if counts[c] > counts[largest] {
                largest = c;
            }
        }
        debug_assert!(counts[largest] >= 2);
        let mut far = usize::MAX;
        let mut far_d = f32::NEG_INFINITY;
        for (i, &(a, d)) in assign.iter().enumerate() {
            if a as usize == largest && d > far_d {
                far = i;
                far_d = d;
            }
        }
        assign[far] = (j as u32, 0.0);
        counts[largest] -= 1;
        counts[j] += 1;
        centroids[j * dim..(j + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
        repaired += 1;
    }
    repaired
}

/// Mean of the rows assigned to each cluster, accumulated in f64 in row
/// order. Every cluster must be non-empty.
fn cluster_means(data: &[f32], dim: usize, assign: &[u32], k: usize, exec: Exec) -> Vec<f32> {
    let mut offsets = vec![0usize; k + 1];
    for &a in assign {
        offsets[a as usize + 1] += 1;
    }
    for c in 0..k {
        offsets[c + 1] += offsets[c];
    }
    let mut fill = offsets.clone();
    let mut order = vec![0usize; assign.len()];
    for (i, &a) in assign.iter().enumerate() {
        order[fill[a as usize]] = i;
        fill[a as usize] += 1;
    }

    let mut out = vec![0f32; k * dim];
    exec::for_each_chunk_mut(exec, &mut out, CLUSTER_SHARD * dim, |shard, chunk| {
        let mut acc = vec![0f64; dim];
        for (j, cent) in chunk.chunks_exact_mut(dim).enumerate() {
            let c = shard * CLUSTER_SHARD + j;
            acc.iter_mut().for_each(|a| *a = 0.0);
            let members = &order[offsets[c]..offsets[c + 1]];
            for &i in members {
                for (a, &v) in acc.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                    *a += v as f64;
                }
            }
            let cnt = members.len().max(1) as f64;
            for (o, a) in cent.iter_mut().zip(&acc) {
                *o = (a / cnt) as f32;
            }
        }
    });
    out
}

fn mean_row_norm(data: &[f32], dim: usize) -> f64 {
    let n = data.len() / dim;
    if n == 0 {
        return 0.0;
    }
    data.chunks_exact(dim)
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

fn total_inertia(data: &[f32], centroids: &[f32], dim: usize, assign: &[u32]) -> f64 {
    data.chunks_exact(dim)
        .zip(assign)
        .map(|(r, &a)| sq_dist_f64(r, &centroids[a as usize * dim..(a as usize + 1) * dim]))
        .sum()
}

/// Fit k-means to `data` (`n * dim`, row-major).
///
/// Returned centroids are the means of the returned assignment and every
/// cluster is non-empty.
pub fn kmeans_fit(data: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeansResult, KMeansError> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(KMeansError::DimensionMismatch(format!(
            "data len {} is not a multiple of dim {}",
            data.len(),
            dim
        )));
    }
    let n = data.len() / dim;
    cfg.validate(n)?;
    let k = cfg.k;
    let tol_abs = cfg.tol * mean_row_norm(data, dim);

    let mut centroids = seed_centroids(data, dim, cfg);
    let mut history: Vec<f64> = Vec::new();
    let mut prev: Option<Vec<u32>> = None;
    let mut converged = false;
    let mut iterations = 0;

    let assignment = loop {
        iterations += 1;
        let mut ad = assign_with_dist(data, &centroids, dim, cfg.exec);
        repair_empty_clusters(data, dim, &mut ad, &mut centroids);
        let inertia: f64 = ad.iter().map(|&(_, d)| d as f64).sum();
        let assign: Vec<u32> = ad.into_iter().map(|(a, _)| a).collect();

        if let (Some(&last), Some(p)) = (history.last(), prev.as_ref()) {
            if inertia > last {
                // Rounding noise once the partition has settled; keep the
                // previous partition.
                iterations -= 1;
                converged = true;
                centroids = cluster_means(data, dim, p, k, cfg.exec);
                break prev.take().unwrap();
            }
        }
        history.push(inertia);

        let stable = prev.as_deref() == Some(&assign[..]);
        let next = cluster_means(data, dim, &assign, k, cfg.exec);
        let displacement = next
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist_f64(a, b).sqrt())
            .sum::<f64>()
            / k as f64;
        centroids = next;
        log::trace!("lloyd iter {iterations}: inertia {inertia:.6e}, displacement {displacement:.3e}");

        if stable || displacement < tol_abs {
            converged = true;
            break assign;
        }
        if iterations >= cfg.max_iters {
            break assign;
        }
        prev = Some(assign);
    };

    let inertia = total_inertia(data, &centroids, dim, &assignment);
    Ok(KMeansResult {
        dim,
        centroids,
        assignment,
        inertia,
        inertia_history: history,
        iterations_run: iterations,
        converged,
    })
}
