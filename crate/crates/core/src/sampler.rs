//! Top-down balanced sampling through a [`ClusterTree`].
//!
//! At a node with child sizes `s_i` and budget `N`, the per-child cap `n`
//! minimising `|N - sum_i min(n, s_i)|` is found by binary search and each
//! child receives `min(n, s_i)`. Each child then re-allocates its own quota
//! over its children, independently of its siblings, down to level 1 where
//! rows are drawn uniformly without replacement.
//!
//! Subset file layout (little-endian):
//!
//! ```text
//! "CSS1" | u32 version = 1 | u64 achieved | u32 sampling_level | u64 seed
//! | u64 target | u8 flags | 3 x 0u8
//! achieved x { row_index (u32, or u64 if flags & 1) | u32 bottom_cluster }
//! ```
//! `flags & 2` records whether the subset was trimmed to the exact target.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;

use crate::binio::{self, Cursor};
use crate::exec::{self, Exec};
use crate::rng;
use crate::tree::{ClusterTree, TreeError};

pub const SUBSET_MAGIC: &[u8; 4] = b"CSS1";
pub const SUBSET_VERSION: u32 = 1;
const FLAG_WIDE: u8 = 1;
const FLAG_EXACT: u8 = 2;
const HEADER_LEN: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid sampling level {level}: must be in 2..={depth}")]
    InvalidLevel { level: usize, depth: usize },
    #[error("target {target} exceeds the {count} available rows")]
    TargetExceedsData { target: u64, count: u64 },
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("row index {index} out of range for {count} rows")]
    IndexOutOfRange { index: u64, count: u64 },
    #[error("bad magic: expected \"CSS1\"")]
    BadMagic,
    #[error("unsupported subset file version {0}")]
    VersionMismatch(u32),
    #[error("corrupt section {section}: {reason}")]
    CorruptSection { section: String, reason: String },
    #[error("file not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Requested subset size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Size(u64),
    /// Fraction of all rows, rounded half-up to a count.
    Fraction(f64),
}

impl Target {
    pub fn resolve(self, count: u64) -> Result<u64, SampleError> {
        let n = match self {
            Target::Size(n) => n,
            Target::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(SampleError::InvalidTarget(format!(
                        "fraction {f} not in [0, 1]"
                    )));
                }
                (f * count as f64 + 0.5).floor() as u64
            }
        };
        if n > count {
            return Err(SampleError::TargetExceedsData { target: n, count });
        }
        Ok(n)
    }
}

/// Quotas for the children of one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationPlan {
    /// Tree position of the node, when it has one.
    pub level: Option<usize>,
    pub cluster: Option<usize>,
    pub target: u64,
    pub sizes: Vec<u64>,
    /// Per-child cap.
    pub n: u64,
    pub quotas: Vec<u64>,
    pub achieved: u64,
}

fn capped_sum(m: u64, sizes: &[u64]) -> u64 {
    sizes.iter().map(|&s| s.min(m)).sum()
}

/// Find the cap `n` in `0..=target` minimising `|target - sum min(n, s_i)|`.
/// Of two minimisers the smaller is returned.
pub fn allocate(target: u64, sizes: &[u64]) -> Result<AllocationPlan, SampleError> {
    if sizes.is_empty() && target > 0 {
        return Err(SampleError::InvalidInput("no clusters to allocate over".into()));
    }
    if sizes.contains(&0) {
        return Err(SampleError::InvalidInput("cluster sizes must be >= 1".into()));
    }
    // f is non-decreasing, so the smallest m with f(m) >= goal brackets the
    // optimum between m - 1 and m.
    let goal = target.min(capped_sum(target, sizes));
    let (mut lo, mut hi) = (0u64, target);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if capped_sum(mid, sizes) >= goal {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let gap = |m: u64| target.abs_diff(capped_sum(m, sizes));
    let n = if lo > 0 && gap(lo - 1) <= gap(lo) { lo - 1 } else { lo };
    let quotas: Vec<u64> = sizes.iter().map(|&s| s.min(n)).collect();
    Ok(AllocationPlan {
        level: None,
        cluster: None,
        target,
        sizes: sizes.to_vec(),
        n,
        achieved: quotas.iter().sum(),
        quotas,
    })
}

/// Allocation over all clusters of `level`.
pub fn level_plan(tree: &ClusterTree, level: usize, target: u64) -> Result<AllocationPlan, SampleError> {
    check_level(tree, level)?;
    let mut plan = allocate(target, tree.sizes(level)?)?;
    plan.level = Some(level);
    Ok(plan)
}

fn check_level(tree: &ClusterTree, level: usize) -> Result<(), SampleError> {
    if level < 2 || level > tree.depth() {
        return Err(SampleError::InvalidLevel {
            level,
            depth: tree.depth(),
        });
    }
    Ok(())
}

/// Selected rows, sorted ascending, each with the bottom cluster it was
/// drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CuratedSubset {
    pub row_indices: Vec<u64>,
    pub bottom_cluster: Vec<u32>,
    pub sampling_level: u32,
    pub target: u64,
    pub seed: u64,
    pub exact: bool,
}

impl CuratedSubset {
    pub fn achieved(&self) -> u64 {
        self.row_indices.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.row_indices.is_empty()
    }

    pub fn validate_against(&self, tree: &ClusterTree) -> Result<(), SampleError> {
        let count = tree.count() as u64;
        let base = tree.base_assignment();
        for (&r, &c) in self.row_indices.iter().zip(&self.bottom_cluster) {
            if r >= count {
                return Err(SampleError::IndexOutOfRange { index: r, count });
            }
            if base[r as usize] != c {
                return Err(SampleError::InvalidInput(format!(
                    "row {r} is recorded in bottom cluster {c} but the tree puts it in {}",
                    base[r as usize]
                )));
            }
        }
        Ok(())
    }
}

/// Per-bottom-cluster quotas produced by the top-down recursion.
pub fn bottom_quotas(tree: &ClusterTree, level: usize, target: u64) -> Result<Vec<u64>, SampleError> {
    let mut quotas = level_plan(tree, level, target)?.quotas;
    for l in (2..=level).rev() {
        let children = tree.children(l)?;
        let child_sizes = tree.sizes(l - 1)?;
        let mut next = vec![0u64; child_sizes.len()];
        for (c, &q) in quotas.iter().enumerate() {
            if q == 0 {
                continue;
            }
            let ch = &children[c];
            let sizes: Vec<u64> = ch.iter().map(|&x| child_sizes[x as usize]).collect();
            let plan = allocate(q, &sizes)?;
            for (&x, &cq) in ch.iter().zip(&plan.quotas) {
                next[x as usize] = cq;
            }
        }
        quotas = next;
    }
    Ok(quotas)
}

/// Draw a curated subset at `level`.
///
/// With `exact`, an overshoot is trimmed one row at a time from the
/// sampling-level cluster with the most realized rows (lowest id on ties),
/// taking the row from its fullest bottom cluster (lowest id on ties) and
/// dropping that cluster's most recent draw. A shortfall is never refilled.
pub fn sample_subset(
    tree: &ClusterTree,
    level: usize,
    target: Target,
    seed: u64,
    exact: bool,
) -> Result<CuratedSubset, SampleError> {
    check_level(tree, level)?;
    let n_target = target.resolve(tree.count() as u64)?;
    let quotas = bottom_quotas(tree, level, n_target)?;
    let members = tree.bottom_members();

    let mut draws: Vec<Vec<u64>> = exec::map_indices(Exec::default(), quotas.len(), |c| {
        let q = quotas[c] as usize;
        let m = &members[c];
        if q == 0 {
            Vec::new()
        } else if q >= m.len() {
            m.clone()
        } else {
            let mut r = rng::substream(seed, 1, c as u64);
            index::sample(&mut r, m.len(), q)
                .into_iter()
                .map(|i| m[i])
                .collect()
        }
    });

    let achieved: u64 = draws.iter().map(|d| d.len() as u64).sum();
    if exact && achieved > n_target {
        let up = tree.ancestor_map(level)?;
        let mut realized = vec![0u64; tree.sizes(level)?.len()];
        for (c, d) in draws.iter().enumerate() {
            realized[up[c] as usize] += d.len() as u64;
        }
        for _ in 0..achieved - n_target {
            let top = argmax_lowest(&realized);
            let leaf = (0..draws.len())
                .filter(|&c| up[c] as usize == top)
                .max_by(|&a, &b| draws[a].len().cmp(&draws[b].len()).then(b.cmp(&a)))
                .unwrap();
            draws[leaf].pop();
            realized[top] -= 1;
        }
    }

    let mut pairs: Vec<(u64, u32)> = draws
        .into_iter()
        .enumerate()
        .flat_map(|(c, d)| d.into_iter().map(move |r| (r, c as u32)))
        .collect();
    pairs.sort_unstable();
    Ok(CuratedSubset {
        row_indices: pairs.iter().map(|p| p.0).collect(),
        bottom_cluster: pairs.iter().map(|p| p.1).collect(),
        sampling_level: level as u32,
        target: n_target,
        seed,
        exact,
    })
}

fn argmax_lowest(v: &[u64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Uniform random subset of `0..count` without replacement, sorted. The
/// uncurated baseline.
pub fn uniform_random_subset(count: u64, size: u64, seed: u64) -> Result<Vec<u64>, SampleError> {
    if size > count {
        return Err(SampleError::TargetExceedsData { target: size, count });
    }
    let mut r = rng::stream(seed);
    let mut v: Vec<u64> = index::sample(&mut r, count as usize, size as usize)
        .into_iter()
        .map(|i| i as u64)
        .collect();
    v.sort_unstable();
    Ok(v)
}

pub fn subset_save(subset: &CuratedSubset, path: &Path) -> Result<(), SampleError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_subset(subset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_subset(s: &CuratedSubset, w: &mut impl Write) -> io::Result<()> {
    let wide = s.row_indices.iter().any(|&r| r > u32::MAX as u64);
    w.write_all(SUBSET_MAGIC)?;
    binio::write_u32(w, SUBSET_VERSION)?;
    binio::write_u64(w, s.achieved())?;
    binio::write_u32(w, s.sampling_level)?;
    binio::write_u64(w, s.seed)?;
    binio::write_u64(w, s.target)?;
    let flags = if wide { FLAG_WIDE } else { 0 } | if s.exact { FLAG_EXACT } else { 0 };
    binio::write_u8(w, flags)?;
    w.write_all(&[0u8; 3])?;
    let mut buf = Vec::with_capacity(s.row_indices.len() * if wide { 12 } else { 8 });
    for (&r, &c) in s.row_indices.iter().zip(&s.bottom_cluster) {
        if wide {
            buf.extend_from_slice(&r.to_le_bytes());
        } else {
            buf.extend_from_slice(&(r as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Load a subset file. With `count`, every row index is also checked to be
/// below it.
pub fn subset_load(path: &Path, count: Option<u64>) -> Result<CuratedSubset, SampleError> {
    let f = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => SampleError::NotFound(path.display().to_string()),
        _ => SampleError::Io(e),
    })?;
    let mut buf = Vec::new();
    BufReader::new(f).read_to_end(&mut buf)?;
    parse_subset(&buf, count)
}

fn corrupt(section: &str, reason: impl Into<String>) -> SampleError {
    SampleError::CorruptSection {
        section: section.into(),
        reason: reason.into(),
    }
}

pub fn parse_subset(buf: &[u8], count: Option<u64>) -> Result<CuratedSubset, SampleError> {
    if buf.len() < 4 || &buf[..4] != SUBSET_MAGIC {
        return Err(SampleError::BadMagic);
    }
    let mut c = Cursor::new(&buf[4..]);
    let hdr = || corrupt("header", "truncated");
    let version = c.u32().ok_or_else(hdr)?;
    if version != SUBSET_VERSION {
        return Err(SampleError::VersionMismatch(version));
    }
    let achieved = c.u64().ok_or_else(hdr)?;
    let sampling_level = c.u32().ok_or_else(hdr)?;
    let seed = c.u64().ok_or_else(hdr)?;
    let target = c.u64().ok_or_else(hdr)?;
    let flags = c.u8().ok_or_else(hdr)?;
    c.take(3).ok_or_else(hdr)?;
    let wide = flags & FLAG_WIDE != 0;

    let rec = if wide { 12u64 } else { 8 };
    let payload = (buf.len() - HEADER_LEN) as u64;
    if achieved.checked_mul(rec) != Some(payload) {
        return Err(corrupt(
            "pairs",
            format!("{achieved} records need {} bytes, found {payload}", achieved.saturating_mul(rec)),
        ));
    }
    let mut rows = Vec::with_capacity(achieved as usize);
    let mut clusters = Vec::with_capacity(achieved as usize);
    for _ in 0..achieved {
        let r = if wide {
            c.u64()
        } else {
            c.u32().map(u64::from)
        }
        .ok_or_else(|| corrupt("pairs", "truncated"))?;
        let cl = c.u32().ok_or_else(|| corrupt("pairs", "truncated"))?;
        if let Some(n) = count {
            if r >= n {
                return Err(SampleError::IndexOutOfRange { index: r, count: n });
            }
        }
        if rows.last().is_some_and(|&p| p >= r) {
            return Err(corrupt("pairs", "row indices not strictly increasing"));
        }
        rows.push(r);
        clusters.push(cl);
    }
    Ok(CuratedSubset {
        row_indices: rows,
        bottom_cluster: clusters,
        sampling_level,
        target,
        seed,
        exact: flags & FLAG_EXACT != 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeLevel;
    use proptest::prelude::*;

    /// Exhaustive minimum of |N - f(m)| over m in 0..=N.
    fn scan_min_gap(target: u64, sizes: &[u64]) -> u64 {
        (0..=target)
            .map(|m| target.abs_diff(capped_sum(m, sizes)))
            .min()
            .unwrap()
    }

    #[test]
    fn allocate_examples() {
        let p = allocate(12, &[10, 5, 2]).unwrap();
        assert_eq!((p.n, p.achieved), (5, 12));
        assert_eq!(p.quotas, vec![5, 5, 2]);
        assert_eq!(scan_min_gap(12, &[10, 5, 2]), 0);

        let z = allocate(0, &[4, 7]).unwrap();
        assert_eq!((z.n, z.quotas.clone(), z.achieved), (0, vec![0, 0], 0));

        let sat = allocate(100, &[3, 3, 3]).unwrap();
        assert_eq!((sat.quotas.clone(), sat.achieved), (vec![3, 3, 3], 9));

        // f(2) = 6, f(3) = 9: the overshoot is closer
        assert_eq!(allocate(8, &[5, 5, 5]).unwrap().achieved, 9);
        // a true tie prefers the smaller cap
        let tie = allocate(7, &[5, 5]).unwrap();
        assert_eq!((tie.n, tie.achieved), (3, 6));

        assert!(allocate(0, &[]).is_ok());
        assert!(matches!(allocate(3, &[]), Err(SampleError::InvalidInput(_))));
        assert!(matches!(allocate(3, &[2, 0]), Err(SampleError::InvalidInput(_))));
    }

    /// Two-level tree over 17 rows with top clusters of sizes 10, 5, 2.
    fn fixture_17() -> ClusterTree {
        let base: Vec<u32> = (0..17u32)
            .map(|r| match r {
                0..=7 => 0,
                8..=9 => 1,
                10..=14 => 2,
                _ => 3,
            })
            .collect();
        let levels = vec![
            TreeLevel {
                centroids: vec![],
                parent: Some(vec![0, 0, 1, 2]),
                sizes: vec![8, 2, 5, 2],
            },
            TreeLevel {
                centroids: vec![],
                parent: None,
                sizes: vec![10, 5, 2],
            },
        ];
        ClusterTree::from_parts(2, levels, base).unwrap()
    }

    #[test]
    fn fixture_draw_counts() {
        let t = fixture_17();
        let s = sample_subset(&t, 2, Target::Size(12), 5, false).unwrap();
        assert_eq!(s.achieved(), 12);
        let top = t.row_labels(2).unwrap();
        let mut per = [0; 3];
        for &r in &s.row_indices {
            per[top[r as usize] as usize] += 1;
        }
        assert_eq!(per, [5, 5, 2]);
        s.validate_against(&t).unwrap();
    }

    #[test]
    fn siblings_do_not_absorb_stranded_quota() {
        // top sizes 4 and 4; with N = 4 the first gets 2 to split over four
        // singletons, where caps 0 and 1 both miss by two and 0 wins
        let base: Vec<u32> = vec![0, 1, 2, 3, 4, 4, 4, 4];
        let levels = vec![
            TreeLevel { centroids: vec![], parent: Some(vec![0, 0, 0, 0, 1]), sizes: vec![1, 1, 1, 1, 4] },
            TreeLevel { centroids: vec![], parent: None, sizes: vec![4, 4] },
        ];
        let t = ClusterTree::from_parts(1, levels, base).unwrap();
        assert_eq!(bottom_quotas(&t, 2, 4).unwrap(), vec![0, 0, 0, 0, 2]);
        let s = sample_subset(&t, 2, Target::Size(4), 0, false).unwrap();
        assert_eq!(s.achieved(), 2);
        assert_eq!(bottom_quotas(&t, 2, 8).unwrap(), vec![1, 1, 1, 1, 4]);
    }

    #[test]
    fn full_fraction_takes_everything() {
        let t = fixture_17();
        let s = sample_subset(&t, 2, Target::Fraction(1.0), 1, false).unwrap();
        assert_eq!(s.row_indices, (0..17).collect::<Vec<u64>>());
    }

    #[test]
    fn target_errors() {
        let t = fixture_17();
        assert!(matches!(
            sample_subset(&t, 3, Target::Size(1), 0, false),
            Err(SampleError::InvalidLevel { level: 3, depth: 2 })
        ));
        assert!(matches!(
            sample_subset(&t, 1, Target::Size(1), 0, false),
            Err(SampleError::InvalidLevel { .. })
        ));
        assert!(matches!(
            sample_subset(&t, 2, Target::Size(18), 0, false),
            Err(SampleError::TargetExceedsData { target: 18, count: 17 })
        ));
        assert!(matches!(
            sample_subset(&t, 2, Target::Fraction(1.5), 0, false),
            Err(SampleError::InvalidTarget(_))
        ));
    }

    #[test]
    fn fraction_rounds_half_up() {
        assert_eq!(Target::Fraction(0.5).resolve(17).unwrap(), 9);
        assert_eq!(Target::Fraction(0.1).resolve(25).unwrap(), 3);
        assert_eq!(Target::Fraction(0.1).resolve(24).unwrap(), 2);
    }

    #[test]
    fn exact_trims_overshoot() {
        // top sizes 5, 5, 5 with N = 8 allocates 3 each
        let base: Vec<u32> = (0..15).map(|r| r / 5).collect();
        let levels = vec![
            TreeLevel { centroids: vec![], parent: Some(vec![0, 1, 2]), sizes: vec![5, 5, 5] },
            TreeLevel { centroids: vec![], parent: None, sizes: vec![5, 5, 5] },
        ];
        let t = ClusterTree::from_parts(1, levels, base).unwrap();
        let loose = sample_subset(&t, 2, Target::Size(8), 3, false).unwrap();
        assert_eq!(loose.achieved(), 9);
        let exact = sample_subset(&t, 2, Target::Size(8), 3, true).unwrap();
        assert_eq!(exact.achieved(), 8);
        let mut per = [0; 3];
        exact.bottom_cluster.iter().for_each(|&c| per[c as usize] += 1);
        assert_eq!(per, [2, 3, 3]);
        assert!(exact.row_indices.iter().all(|r| loose.row_indices.contains(r)));
    }

    #[test]
    fn subset_file_round_trip_and_checks() {
        let t = fixture_17();
        let s = sample_subset(&t, 2, Target::Size(12), 5, true).unwrap();
        let mut buf = Vec::new();
        write_subset(&s, &mut buf).unwrap();
        assert_eq!(parse_subset(&buf, Some(17)).unwrap(), s);

        let empty = sample_subset(&t, 2, Target::Size(0), 5, false).unwrap();
        let mut eb = Vec::new();
        write_subset(&empty, &mut eb).unwrap();
        assert_eq!(parse_subset(&eb, None).unwrap(), empty);

        assert!(matches!(
            parse_subset(&buf, Some(10)),
            Err(SampleError::IndexOutOfRange { count: 10, .. })
        ));
        assert!(matches!(
            parse_subset(&buf[..buf.len() - 2], None),
            Err(SampleError::CorruptSection { .. })
        ));
        let mut bad = buf.clone();
        bad[3] = b'0';
        assert!(matches!(parse_subset(&bad, None), Err(SampleError::BadMagic)));

        let wide = CuratedSubset {
            row_indices: vec![1, 5_000_000_000],
            bottom_cluster: vec![0, 3],
            sampling_level: 4,
            target: 2,
            seed: 9,
            exact: false,
        };
        let mut wb = Vec::new();
        write_subset(&wide, &mut wb).unwrap();
        assert_eq!(wb.len(), HEADER_LEN + 2 * 12);
        assert_eq!(parse_subset(&wb, None).unwrap(), wide);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn allocation_matches_scan(sizes in proptest::collection::vec(1u64..=30, 1..=6), frac in 0.0f64..=1.0) {
            let total: u64 = sizes.iter().sum();
            let target = (frac * total as f64).round() as u64;
            let p = allocate(target, &sizes).unwrap();
            prop_assert_eq!(target.abs_diff(p.achieved), scan_min_gap(target, &sizes));
            prop_assert!(p.n <= target);
            for (q, s) in p.quotas.iter().zip(&sizes) {
                prop_assert_eq!(*q, p.n.min(*s));
            }
        }

        #[test]
        fn achieved_monotone_in_target(sizes in proptest::collection::vec(1u64..=30, 1..=6)) {
            let total: u64 = sizes.iter().sum();
            let mut last = 0;
            for n in 0..=total {
                let a = allocate(n, &sizes).unwrap().achieved;
                prop_assert!(a >= last);
                last = a;
            }
        }

        #[test]
        fn balance_limit(sizes in proptest::collection::vec(1u64..=30, 1..=6), frac in 0.0f64..=1.0) {
            let k = sizes.len() as u64;
            let min = *sizes.iter().min().unwrap();
            let t = (frac * (k * min) as f64).floor() as u64;
            let p = allocate(t, &sizes).unwrap();
            prop_assert!(p.quotas.iter().all(|&q| q == p.quotas[0]));
        }
    }
}
