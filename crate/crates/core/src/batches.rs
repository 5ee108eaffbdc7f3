//! Training-batch planning over a curated subset.
//!
//! Stratified batches give every top-level cluster `floor(B / k)` slots; the
//! `B mod k` leftover slots go to `k` consecutive clusters starting at
//! `batch_index mod k`, so each cluster gets exactly `B` slots every `k`
//! batches. Inside a cluster, tiles are drawn uniformly from those with the
//! lowest observation count, spilling into the next count only when that
//! stratum runs out, and never twice in one batch. Hence within a cluster
//! observation counts never differ by more than one.
//!
//! A cluster with fewer tiles than its quota contributes all of them and the
//! missing slots are spread over the remaining clusters with the same
//! rotation rule.
//!
//! Random batches draw `B` distinct tiles uniformly per batch.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::rng;
use crate::sampler::{CuratedSubset, SampleError};
use crate::tree::ClusterTree;

pub const LEDGER_MAGIC: &[u8; 4] = b"LGR1";

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("curated subset is empty")]
    EmptySubset,
    #[error("batch size must be >= 1")]
    BatchTooSmall,
    #[error("batch size {batch_size} exceeds the {tiles} curated tiles")]
    BatchExceedsSubset { batch_size: usize, tiles: usize },
    #[error("subset does not match tree: {0}")]
    Mismatch(#[from] SampleError),
    #[error("invalid ledger: {0}")]
    InvalidLedger(String),
    #[error("bad magic: expected \"LGR1\"")]
    BadMagic,
    #[error("malformed batch record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("file not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Stratified,
    Random,
}

/// Curated tiles in subset order, each with the cluster that stratifies it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CuratedTiles {
    rows: Vec<u64>,
    cluster: Vec<u32>,
}

impl CuratedTiles {
    pub fn new(rows: Vec<u64>, cluster: Vec<u32>) -> Self {
        assert_eq!(rows.len(), cluster.len());
        CuratedTiles { rows, cluster }
    }

    /// Stratify by top-level cluster.
    pub fn top_level(subset: &CuratedSubset, tree: &ClusterTree) -> Result<Self, BatchError> {
        Self::at_level(subset, tree, tree.depth())
    }

    pub fn at_level(subset: &CuratedSubset, tree: &ClusterTree, level: usize) -> Result<Self, BatchError> {
        subset.validate_against(tree)?;
        let up = tree.ancestor_map(level).map_err(SampleError::from)?;
        Ok(CuratedTiles {
            rows: subset.row_indices.clone(),
            cluster: subset.bottom_cluster.iter().map(|&c| up[c as usize]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[u64] {
        &self.rows
    }

    pub fn clusters(&self) -> &[u32] {
        &self.cluster
    }

    /// Tile positions per cluster id, ascending ids, only non-empty clusters.
    fn grouped(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut g: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, &c) in self.cluster.iter().enumerate() {
            g.entry(c).or_default().push(i as u32);
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub index: usize,
    /// Data row indices.
    pub indices: Vec<u64>,
    /// Tiles per cluster id.
    pub composition: BTreeMap<u32, u32>,
}

/// A cluster that could not fill its quota in some batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeficitEvent {
    pub batch: usize,
    pub cluster: u32,
    pub quota: usize,
    pub available: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub mode: BatchMode,
    pub batches: Vec<Batch>,
    pub deficits: Vec<DeficitEvent>,
}

/// Tiles of one cluster, partitioned so that `tiles[..low_len]` have count
/// `min_count` and the rest `min_count + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Stratum {
    id: u32,
    tiles: Vec<u32>,
    low_len: usize,
    min_count: u64,
}

impl Stratum {
    fn take(&mut self, q: usize, counts: &mut [u64], rng: &mut ChaCha8Rng) -> Vec<u32> {
        let len = self.tiles.len();
        debug_assert!(q <= len && self.low_len > 0);
        let l0 = self.low_len;
        let from_low = q.min(l0);
        let mut picked = Vec::with_capacity(q);
        for _ in 0..from_low {
            let i = rng.random_range(0..self.low_len);
            self.tiles.swap(i, self.low_len - 1);
            self.low_len -= 1;
            picked.push(self.tiles[self.low_len]);
        }
        let rest = q - from_low;
        if rest > 0 {
            // tiles[..l0] were all just taken; draw the rest from the old
            // upper stratum tiles[l0..].
            for j in 0..rest {
                let i = rng.random_range(l0 + j..len);
                self.tiles.swap(i, l0 + j);
                picked.push(self.tiles[l0 + j]);
            }
            let mut t = Vec::with_capacity(len);
            t.extend_from_slice(&self.tiles[..l0]);
            t.extend_from_slice(&self.tiles[l0 + rest..]);
            t.extend_from_slice(&self.tiles[l0..l0 + rest]);
            self.tiles = t;
            self.min_count += 1;
            self.low_len = len - rest;
        } else if self.low_len == 0 {
            self.min_count += 1;
            self.low_len = len;
        }
        for &p in &picked {
            counts[p as usize] += 1;
        }
        picked
    }
}

/// Per-tile observation counts plus the per-cluster strata that drive
/// least-observed-first drawing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationLedger {
    counts: Vec<u64>,
    strata: Vec<Stratum>,
}

impl ObservationLedger {
    pub fn new(tiles: &CuratedTiles) -> Self {
        Self::from_counts(tiles, vec![0; tiles.len()]).expect("zero counts are balanced")
    }

    /// Rebuild from saved counts. Fails if any cluster's counts spread by
    /// more than one.
    pub fn from_counts(tiles: &CuratedTiles, counts: Vec<u64>) -> Result<Self, BatchError> {
        if counts.len() != tiles.len() {
            return Err(BatchError::InvalidLedger(format!(
                "{} counts for {} tiles",
                counts.len(),
                tiles.len()
            )));
        }
        let mut strata = Vec::new();
        for (id, members) in tiles.grouped() {
            let min = members.iter().map(|&p| counts[p as usize]).min().unwrap();
            let (mut low, mut high) = (Vec::new(), Vec::new());
            for p in members {
                match counts[p as usize] - min {
                    0 => low.push(p),
                    1 => high.push(p),
                    d => {
                        return Err(BatchError::InvalidLedger(format!(
                            "cluster {id}: count spread {d} > 1"
                        )))
                    }
                }
            }
            let low_len = low.len();
            low.extend(high);
            strata.push(Stratum {
                id,
                tiles: low,
                low_len,
                min_count: min,
            });
        }
        Ok(ObservationLedger { counts, strata })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Cluster ids in ascending order with their tile positions.
    pub fn cluster_index(&self) -> Vec<(u32, Vec<u32>)> {
        self.strata
            .iter()
            .map(|s| {
                let mut t = s.tiles.clone();
                t.sort_unstable();
                (s.id, t)
            })
            .collect()
    }

    /// Largest within-cluster count spread.
    pub fn max_spread(&self) -> u64 {
        self.strata
            .iter()
            .map(|s| {
                let it = s.tiles.iter().map(|&p| self.counts[p as usize]);
                it.clone().max().unwrap() - it.min().unwrap()
            })
            .max()
            .unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<(), BatchError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(LEDGER_MAGIC)?;
        binio::write_u64(&mut w, self.counts.len() as u64)?;
        for &c in &self.counts {
            binio::write_u64(&mut w, c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, tiles: &CuratedTiles) -> Result<Self, BatchError> {
        Self::from_counts(tiles, load_ledger_counts(path)?)
    }
}

/// Read the raw counts of a ledger checkpoint (`"LGR1" | u64 n | n x u64`).
pub fn load_ledger_counts(path: &Path) -> Result<Vec<u64>, BatchError> {
    let f = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => BatchError::NotFound(path.display().to_string()),
        _ => BatchError::Io(e),
    })?;
    let mut buf = Vec::new();
    BufReader::new(f).read_to_end(&mut buf)?;
    if buf.len() < 4 || &buf[..4] != LEDGER_MAGIC {
        return Err(BatchError::BadMagic);
    }
    let mut r = &buf[4..];
    let n = binio::read_u64(&mut r).map_err(|_| BatchError::InvalidLedger("truncated header".into()))?;
    if (r.len() as u64) != n.saturating_mul(8) {
        return Err(BatchError::InvalidLedger(format!(
            "{n} counts need {} bytes, found {}",
            n.saturating_mul(8),
            r.len()
        )));
    }
    Ok(r.chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Per-cluster slot counts for batch `batch` given each cluster's tile
/// count. Returns the quotas and the positions of deficient clusters.
pub fn batch_quotas(cluster_sizes: &[usize], batch: usize, batch_size: usize) -> (Vec<usize>, Vec<usize>) {
    let k = cluster_sizes.len();
    let mut quota = vec![0usize; k];
    let mut open: Vec<usize> = (0..k).collect();
    let mut deficient = Vec::new();
    let mut budget = batch_size;
    while !open.is_empty() {
        let m = open.len();
        let (base, rem, off) = (budget / m, budget % m, batch % m);
        let want = |p: usize| base + usize::from((p + m - off) % m < rem);
        let short: Vec<usize> = open
            .iter()
            .enumerate()
            .filter(|&(p, &j)| cluster_sizes[j] < want(p))
            .map(|(_, &j)| j)
            .collect();
        if short.is_empty() {
            for (p, &j) in open.iter().enumerate() {
                quota[j] = want(p);
            }
            break;
        }
        for &j in &short {
            quota[j] = cluster_sizes[j];
            budget -= cluster_sizes[j];
        }
        open.retain(|j| !short.contains(j));
        deficient.extend(short);
    }
    deficient.sort_unstable();
    (quota, deficient)
}

fn check_inputs(tiles: &CuratedTiles, batch_size: usize) -> Result<(), BatchError> {
    if tiles.is_empty() {
        return Err(BatchError::EmptySubset);
    }
    if batch_size < 1 {
        return Err(BatchError::BatchTooSmall);
    }
    if batch_size > tiles.len() {
        return Err(BatchError::BatchExceedsSubset {
            batch_size,
            tiles: tiles.len(),
        });
    }
    Ok(())
}

/// Streaming stratified planner; yields one batch per `next()`.
pub struct StratifiedBatcher<'a> {
    tiles: &'a CuratedTiles,
    ledger: ObservationLedger,
    rng: ChaCha8Rng,
    batch_size: usize,
    next_index: usize,
    deficits: Vec<DeficitEvent>,
}

impl<'a> StratifiedBatcher<'a> {
    pub fn new(tiles: &'a CuratedTiles, batch_size: usize, seed: u64) -> Result<Self, BatchError> {
        Self::resume(tiles, ObservationLedger::new(tiles), batch_size, seed, 0)
    }

    /// Continue from a ledger checkpoint at batch `next_index`.
    pub fn resume(
        tiles: &'a CuratedTiles,
        ledger: ObservationLedger,
        batch_size: usize,
        seed: u64,
        next_index: usize,
    ) -> Result<Self, BatchError> {
        check_inputs(tiles, batch_size)?;
        Ok(StratifiedBatcher {
            tiles,
            ledger,
            rng: rng::substream(seed, next_index as u64, 0),
            batch_size,
            next_index,
            deficits: Vec::new(),
        })
    }

    pub fn ledger(&self) -> &ObservationLedger {
        &self.ledger
    }

    pub fn deficits(&self) -> &[DeficitEvent] {
        &self.deficits
    }

    pub fn into_parts(self) -> (ObservationLedger, Vec<DeficitEvent>) {
        (self.ledger, self.deficits)
    }
}

impl Iterator for StratifiedBatcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.next_index;
        let sizes: Vec<usize> = self.ledger.strata.iter().map(|s| s.tiles.len()).collect();
        let (quotas, short) = batch_quotas(&sizes, b, self.batch_size);
        for &j in &short {
            let s = &self.ledger.strata[j];
            let quota = batch_quotas(&vec![usize::MAX; sizes.len()], b, self.batch_size).0[j];
            log::warn!(
                "batch {b}: cluster {} has {} tiles for a quota of {quota}; redistributing",
                s.id,
                s.tiles.len()
            );
            self.deficits.push(DeficitEvent {
                batch: b,
                cluster: s.id,
                quota,
                available: s.tiles.len(),
            });
        }
        let mut indices = Vec::with_capacity(self.batch_size);
        let mut composition = BTreeMap::new();
        let ObservationLedger { counts, strata } = &mut self.ledger;
        for (s, &q) in strata.iter_mut().zip(&quotas) {
            if q == 0 {
                continue;
            }
            for p in s.take(q, counts, &mut self.rng) {
                indices.push(self.tiles.rows[p as usize]);
            }
            composition.insert(s.id, q as u32);
        }
        self.next_index += 1;
        Some(Batch {
            index: b,
            indices,
            composition,
        })
    }
}

/// Plan `num_batches` stratified batches from a fresh ledger.
pub fn plan_stratified(
    tiles: &CuratedTiles,
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Result<(BatchPlan, ObservationLedger), BatchError> {
    let mut it = StratifiedBatcher::new(tiles, batch_size, seed)?;
    let batches: Vec<Batch> = it.by_ref().take(num_batches).collect();
    let (ledger, deficits) = it.into_parts();
    Ok((
        BatchPlan {
            batch_size,
            mode: BatchMode::Stratified,
            batches,
            deficits,
        },
        ledger,
    ))
}

/// Plan `num_batches` batches of `batch_size` distinct tiles drawn uniformly.
/// The returned ledger counts observations the same way as the stratified
/// planner, for comparison.
pub fn plan_random(
    tiles: &CuratedTiles,
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Result<(BatchPlan, ObservationLedger), BatchError> {
    check_inputs(tiles, batch_size)?;
    let mut rng = rng::stream(seed);
    let mut counts = vec![0u64; tiles.len()];
    let mut batches = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let mut indices = Vec::with_capacity(batch_size);
        let mut composition = BTreeMap::new();
        for p in index::sample(&mut rng, tiles.len(), batch_size) {
            counts[p] += 1;
            indices.push(tiles.rows[p]);
            *composition.entry(tiles.cluster[p]).or_insert(0u32) += 1;
        }
        batches.push(Batch {
            index: b,
            indices,
            composition,
        });
    }
    let strata = ObservationLedger::new(tiles).strata;
    Ok((
        BatchPlan {
            batch_size,
            mode: BatchMode::Random,
            batches,
            deficits: Vec::new(),
        },
        // random plans can leave spreads above one, so skip from_counts
        ObservationLedger { counts, strata },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterObservation {
    pub cluster: u32,
    pub tiles: usize,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerReport {
    pub clusters: Vec<ClusterObservation>,
    /// Share of tiles observed at least once.
    pub coverage: f64,
    /// Smallest count over all tiles.
    pub multiplicity: u64,
    pub total: u64,
}

pub fn ledger_report(ledger: &ObservationLedger) -> LedgerReport {
    let c = &ledger.counts;
    let clusters = ledger
        .strata
        .iter()
        .map(|s| {
            let v: Vec<u64> = s.tiles.iter().map(|&p| c[p as usize]).collect();
            ClusterObservation {
                cluster: s.id,
                tiles: v.len(),
                min: *v.iter().min().unwrap(),
                max: *v.iter().max().unwrap(),
                mean: v.iter().sum::<u64>() as f64 / v.len() as f64,
            }
        })
        .collect();
    LedgerReport {
        clusters,
        coverage: if c.is_empty() {
            0.0
        } else {
            c.iter().filter(|&&x| x > 0).count() as f64 / c.len() as f64
        },
        multiplicity: c.iter().copied().min().unwrap_or(0),
        total: c.iter().sum(),
    }
}

#[derive(Serialize, Deserialize)]
struct BatchRecord {
    batch: usize,
    indices: Vec<u64>,
    composition: BTreeMap<u32, u32>,
}

/// One JSON object per batch.
pub fn write_batches(batches: &[Batch], w: &mut impl Write) -> io::Result<()> {
    for b in batches {
        let rec = BatchRecord {
            batch: b.index,
            indices: b.indices.clone(),
            composition: b.composition.clone(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_batches(batches: &[Batch], path: &Path) -> Result<(), BatchError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_batches(batches, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_batches(r: impl BufRead) -> Result<Vec<Batch>, BatchError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BatchRecord = serde_json::from_str(&line).map_err(|e| BatchError::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(Batch {
            index: rec.batch,
            indices: rec.indices,
            composition: rec.composition,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashMap, HashSet};

    fn tiles(sizes: &[usize]) -> CuratedTiles {
        let mut rows = Vec::new();
        let mut cl = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                rows.push(rows.len() as u64 * 3);
                cl.push(c as u32 * 10);
            }
        }
        CuratedTiles::new(rows, cl)
    }

    #[test]
    fn quota_arithmetic_2048_over_62() {
        let sizes = vec![10_000; 62];
        let mut totals = vec![0usize; 62];
        for b in 0..62 {
            let (q, short) = batch_quotas(&sizes, b, 2048);
            assert!(short.is_empty());
            assert_eq!(q.iter().sum::<usize>(), 2048);
            assert_eq!(q.iter().filter(|&&x| x == 34).count(), 2);
            assert_eq!(q.iter().filter(|&&x| x == 33).count(), 60);
            assert_eq!(q[b], 34);
            for (t, x) in totals.iter_mut().zip(&q) {
                *t += x;
            }
        }
        assert!(totals.iter().all(|&t| t == 33 * 62 + 2));
    }

    #[test]
    fn deficit_redistributes() {
        let (q, short) = batch_quotas(&[1, 10, 10], 0, 9);
        assert_eq!(short, vec![0]);
        assert_eq!(q.iter().sum::<usize>(), 9);
        assert_eq!(q[0], 1);
        assert_eq!(q[1], 4);
        assert_eq!(q[2], 4);
    }

    #[test]
    fn two_clusters_six_batches() {
        let t = tiles(&[3, 3]);
        let mut it = StratifiedBatcher::new(&t, 2, 42).unwrap();
        for _ in 0..6 {
            let b = it.next().unwrap();
            assert_eq!(b.indices.len(), 2);
            assert_eq!(b.composition.values().copied().collect::<Vec<_>>(), vec![1, 1]);
            assert!(it.ledger().max_spread() <= 1);
        }
        assert!(it.ledger().counts().iter().all(|&c| c == 2));
        let rep = ledger_report(it.ledger());
        assert_eq!(rep.multiplicity, 2);
        assert_eq!(rep.coverage, 1.0);
    }

    #[test]
    fn single_cluster_round_robin() {
        let t = tiles(&[5]);
        let (plan, ledger) = plan_stratified(&t, 2, 5, 1).unwrap();
        assert!(ledger.counts().iter().all(|&c| c == 2));
        for b in &plan.batches {
            let s: HashSet<_> = b.indices.iter().collect();
            assert_eq!(s.len(), 2);
        }
    }

    #[test]
    fn fresh_ledger_and_one_batch_coverage() {
        let t = tiles(&[10, 10, 10]);
        let fresh = ObservationLedger::new(&t);
        assert_eq!(ledger_report(&fresh).coverage, 0.0);
        let (_, ledger) = plan_stratified(&t, 6, 1, 0).unwrap();
        assert_eq!(ledger_report(&ledger).coverage, 6.0 / 30.0);
    }

    #[test]
    fn input_errors() {
        let t = tiles(&[3]);
        assert!(matches!(plan_stratified(&t, 0, 1, 0), Err(BatchError::BatchTooSmall)));
        assert!(matches!(
            plan_stratified(&t, 4, 1, 0),
            Err(BatchError::BatchExceedsSubset { .. })
        ));
        let e = tiles(&[]);
        assert!(matches!(plan_random(&e, 1, 1, 0), Err(BatchError::EmptySubset)));
        assert!(matches!(plan_stratified(&e, 1, 1, 0), Err(BatchError::EmptySubset)));
    }

    #[test]
    fn random_full_batch_is_permutation() {
        let t = tiles(&[4, 3]);
        let (plan, _) = plan_random(&t, 7, 3, 9).unwrap();
        for b in &plan.batches {
            let mut v = b.indices.clone();
            v.sort_unstable();
            assert_eq!(v, t.rows());
        }
        let (single, _) = plan_random(&t, 1, 4, 9).unwrap();
        assert!(single.batches.iter().all(|b| b.indices.len() == 1));
    }

    #[test]
    fn random_composition_follows_cluster_sizes() {
        // chi-square with 2 degrees of freedom; 13.816 is the 0.999 quantile
        let t = tiles(&[30, 20, 10]);
        for seed in 0..5 {
            let (plan, _) = plan_random(&t, 10, 1000, seed).unwrap();
            let mut observed = [0f64; 3];
            for b in &plan.batches {
                for (&c, &n) in &b.composition {
                    observed[c as usize / 10] += n as f64;
                }
            }
            let expected = [5000.0, 10_000.0 / 3.0, 5000.0 / 3.0];
            let chi2: f64 = observed
                .iter()
                .zip(&expected)
                .map(|(o, e)| (o - e) * (o - e) / e)
                .sum();
            assert!(chi2 < 13.816, "seed {seed}: chi2 = {chi2}");
            assert_eq!(plan_random(&t, 10, 1000, seed).unwrap().0, plan);
        }
    }

    #[test]
    fn ledger_checkpoint_resume() {
        let t = tiles(&[4, 5, 2]);
        let (_, ledger) = plan_stratified(&t, 3, 7, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.lgr");
        ledger.save(&p).unwrap();
        let back = ObservationLedger::load(&p, &t).unwrap();
        assert_eq!(back.counts(), ledger.counts());
        let mut it = StratifiedBatcher::resume(&t, back, 3, 5, 7).unwrap();
        it.next().unwrap();
        assert!(it.ledger().max_spread() <= 1);

        let bad = CuratedTiles::new(vec![0, 1], vec![0, 0]);
        assert!(matches!(
            ObservationLedger::from_counts(&bad, vec![0, 2]),
            Err(BatchError::InvalidLedger(_))
        ));
    }

    #[test]
    fn batch_file_round_trip() {
        let t = tiles(&[4, 5, 2]);
        let (plan, _) = plan_stratified(&t, 3, 4, 5).unwrap();
        let mut buf = Vec::new();
        write_batches(&plan.batches, &mut buf).unwrap();
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        assert!(first.starts_with(r#"{"batch":0,"indices":["#), "{first}");
        assert!(first.contains(r#""composition":{"0":1,"#), "{first}");
        assert_eq!(read_batches(&buf[..]).unwrap(), plan.batches);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn least_observed_invariants(
            sizes in proptest::collection::vec(1usize..=50, 1..=8),
            b in 1usize..=40,
            n in 1usize..=60,
            seed in any::<u64>(),
        ) {
            let t = tiles(&sizes);
            prop_assume!(b <= t.len());
            let mut it = StratifiedBatcher::new(&t, b, seed).unwrap();
            for _ in 0..n {
                let batch = it.next().unwrap();
                prop_assert_eq!(batch.indices.len(), b);
                let uniq: HashSet<_> = batch.indices.iter().collect();
                prop_assert_eq!(uniq.len(), b);
                prop_assert!(it.ledger().max_spread() <= 1);
                // nothing reaches a third pass while a cluster-mate is unseen
                let mut range: HashMap<u32, (u64, u64)> = HashMap::new();
                for (&c, &k) in t.clusters().iter().zip(it.ledger().counts()) {
                    let e = range.entry(c).or_insert((u64::MAX, 0));
                    *e = (e.0.min(k), e.1.max(k));
                }
                prop_assert!(range.values().all(|&(lo, hi)| hi < 3 || lo >= 1));
            }
            prop_assert_eq!(it.ledger().total(), (n * b) as u64);
            let (again, _) = plan_stratified(&t, b, n, seed).unwrap();
            prop_assert_eq!(again.batches.len(), n);
        }
    }
}
