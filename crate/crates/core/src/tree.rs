//! Bottom-up hierarchical k-means tree.
//!
//! Level 1 clusters the data rows; level `l > 1` clusters the centroids of
//! level `l - 1`, each centroid counting as one unweighted point. Levels are
//! numbered from 1 (bottom) to `depth` (top) everywhere in the public API.
//!
//! Tree file layout (little-endian):
//!
//! ```text
//! "HCT1" | u32 version = 1 | u32 depth
//! depth x { u64 body_len | body }
//!   body = u32 cluster_count | u32 dim | u8 has_centroids | u8 has_parent | 6 x 0u8
//!          | f32 centroids (cluster_count * dim, if has_centroids)
//!          | u32 parent (cluster_count, if has_parent)
//!          | u64 sizes (cluster_count)
//! u64 body_len | u64 row_count | u32 base_assignment (row_count)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{self, Cursor};
use crate::kmeans::{self, KMeansConfig, KMeansError};
use crate::store::EmbeddingMatrix;

pub const TREE_MAGIC: &[u8; 4] = b"HCT1";
pub const TREE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("invalid tree config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error("level {level} or cluster {cluster:?} out of range")]
    IndexOutOfRange { level: usize, cluster: Option<usize> },
    #[error("bad magic: expected \"HCT1\"")]
    BadMagic,
    #[error("unsupported tree file version {0}")]
    VersionMismatch(u32),
    #[error("corrupt section {section}: {reason}")]
    CorruptSection { section: String, reason: String },
    #[error("file not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn corrupt(section: impl Into<String>, reason: impl Into<String>) -> TreeError {
    TreeError::CorruptSection {
        section: section.into(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeConfig {
    /// Cluster count per level, bottom first, strictly decreasing.
    pub level_counts: Vec<usize>,
    /// Template for every level; `k` is overridden and the seed is mixed
    /// with the level number.
    pub kmeans: KMeansConfig,
}

impl TreeConfig {
    pub fn new(level_counts: Vec<usize>, kmeans: KMeansConfig) -> Self {
        TreeConfig {
            level_counts,
            kmeans,
        }
    }

    pub fn validate(&self, count: usize) -> Result<(), TreeError> {
        let lc = &self.level_counts;
        if lc.len() < 2 {
            return Err(TreeError::InvalidConfig(format!(
                "need at least 2 levels, got {}",
                lc.len()
            )));
        }
        if lc.contains(&0) {
            return Err(TreeError::InvalidConfig("cluster counts must be positive".into()));
        }
        if let Some(w) = lc.windows(2).find(|w| w[1] >= w[0]) {
            return Err(TreeError::InvalidConfig(format!(
                "level counts must be strictly decreasing, got {} then {}",
                w[0], w[1]
            )));
        }
        if lc[0] > count {
            return Err(KMeansError::TooFewRows { k: lc[0], n: count }.into());
        }
        if lc.iter().any(|&c| c > u32::MAX as usize) {
            return Err(TreeError::InvalidConfig("cluster count exceeds u32".into()));
        }
        Ok(())
    }

    fn level_kmeans(&self, level: usize) -> KMeansConfig {
        let mut c = self.kmeans.clone();
        c.k = self.level_counts[level - 1];
        c.seed = self.kmeans.seed ^ level as u64;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeLevel {
    /// `cluster_count * dim`; empty when centroids were not stored.
    pub centroids: Vec<f32>,
    /// Cluster id one level up, absent at the top level.
    pub parent: Option<Vec<u32>>,
    /// Data rows reachable from each cluster.
    pub sizes: Vec<u64>,
}

impl TreeLevel {
    pub fn cluster_count(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTree {
    dim: usize,
    levels: Vec<TreeLevel>,
    base_assignment: Vec<u32>,
}

/// Per-level cluster size spread.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSummary {
    pub level: usize,
    pub clusters: usize,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    /// Coefficient of variation (population std / mean).
    pub cv: f64,
}

/// Build the tree bottom-up.
pub fn build_tree(data: &EmbeddingMatrix, config: &TreeConfig) -> Result<ClusterTree, TreeError> {
    config.validate(data.count())?;
    let dim = data.dim();
    let depth = config.level_counts.len();

    let bottom = kmeans::kmeans_fit(data.as_slice(), dim, &config.level_kmeans(1))?;
    log::debug!(
        "level 1: k={} iters={} inertia={:.4e}",
        config.level_counts[0],
        bottom.iterations_run,
        bottom.inertia
    );
    let base_assignment = bottom.assignment;
    let mut centroids = vec![bottom.centroids];
    let mut parents: Vec<Vec<u32>> = Vec::with_capacity(depth - 1);
    for level in 2..=depth {
        let res = kmeans::kmeans_fit(&centroids[level - 2], dim, &config.level_kmeans(level))?;
        log::debug!(
            "level {level}: k={} iters={} inertia={:.4e}",
            config.level_counts[level - 1],
            res.iterations_run,
            res.inertia
        );
        // k-means' own assignment is the nearest-centroid map of the
        // children and keeps every parent non-empty.
        parents.push(res.assignment);
        centroids.push(res.centroids);
    }

    let mut sizes = vec![0u64; config.level_counts[0]];
    for &a in &base_assignment {
        sizes[a as usize] += 1;
    }
    let mut levels = Vec::with_capacity(depth);
    for (l, cents) in centroids.into_iter().enumerate() {
        let parent = parents.get(l).cloned();
        let next_sizes = parent.as_ref().map(|p| {
            let mut up = vec![0u64; config.level_counts[l + 1]];
            for (c, &pa) in p.iter().enumerate() {
                up[pa as usize] += sizes[c];
            }
            up
        });
        levels.push(TreeLevel {
            centroids: cents,
            parent,
            sizes: std::mem::take(&mut sizes),
        });
        if let Some(s) = next_sizes {
            sizes = s;
        }
    }
    let tree = ClusterTree {
        dim,
        levels,
        base_assignment,
    };
    debug_assert!(tree.check().is_ok());
    Ok(tree)
}

impl ClusterTree {
    pub fn from_parts(
        dim: usize,
        levels: Vec<TreeLevel>,
        base_assignment: Vec<u32>,
    ) -> Result<Self, TreeError> {
        let t = ClusterTree {
            dim,
            levels,
            base_assignment,
        };
        t.check().map_err(|(s, r)| corrupt(s, r))?;
        Ok(t)
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of data rows.
    pub fn count(&self) -> usize {
        self.base_assignment.len()
    }

    pub fn base_assignment(&self) -> &[u32] {
        &self.base_assignment
    }

    pub fn level(&self, level: usize) -> Result<&TreeLevel, TreeError> {
        if level == 0 {
            return Err(TreeError::IndexOutOfRange { level, cluster: None });
        }
        self.levels
            .get(level - 1)
            .ok_or(TreeError::IndexOutOfRange { level, cluster: None })
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.cluster_count()).collect()
    }

    pub fn sizes(&self, level: usize) -> Result<&[u64], TreeError> {
        Ok(&self.level(level)?.sizes)
    }

    pub fn has_centroids(&self) -> bool {
        self.levels.iter().all(|l| !l.centroids.is_empty())
    }

    /// Copy with centroid payloads dropped; enough for sampling.
    pub fn without_centroids(&self) -> ClusterTree {
        let mut t = self.clone();
        t.levels.iter_mut().for_each(|l| l.centroids.clear());
        t
    }

    /// For every level-1 cluster, its ancestor at `level`.
    pub fn ancestor_map(&self, level: usize) -> Result<Vec<u32>, TreeError> {
        self.level(level)?;
        let mut map: Vec<u32> = (0..self.levels[0].cluster_count() as u32).collect();
        for l in &self.levels[..level - 1] {
            let p = l.parent.as_ref().expect("non-top level has parents");
            map.iter_mut().for_each(|m| *m = p[*m as usize]);
        }
        Ok(map)
    }

    /// Cluster id at `level` for every data row.
    pub fn row_labels(&self, level: usize) -> Result<Vec<u32>, TreeError> {
        let map = self.ancestor_map(level)?;
        Ok(self.base_assignment.iter().map(|&a| map[a as usize]).collect())
    }

    /// Children of every cluster at `level` (`level >= 2`), ascending.
    pub fn children(&self, level: usize) -> Result<Vec<Vec<u32>>, TreeError> {
        if level < 2 {
            return Err(TreeError::IndexOutOfRange { level, cluster: None });
        }
        let lv = self.level(level)?;
        let mut out = vec![Vec::new(); lv.cluster_count()];
        let p = self.levels[level - 2].parent.as_ref().unwrap();
        for (c, &pa) in p.iter().enumerate() {
            out[pa as usize].push(c as u32);
        }
        Ok(out)
    }

    /// Sorted row indices of every bottom-level cluster.
    pub fn bottom_members(&self) -> Vec<Vec<u64>> {
        let mut out = vec![Vec::new(); self.levels[0].cluster_count()];
        for (r, &a) in self.base_assignment.iter().enumerate() {
            out[a as usize].push(r as u64);
        }
        out
    }

    /// Sorted row indices reachable from `cluster` at `level`.
    pub fn members_of(&self, level: usize, cluster: usize) -> Result<Vec<u64>, TreeError> {
        let lv = self.level(level)?;
        if cluster >= lv.cluster_count() {
            return Err(TreeError::IndexOutOfRange {
                level,
                cluster: Some(cluster),
            });
        }
        let map = self.ancestor_map(level)?;
        Ok(self
            .base_assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| map[a as usize] as usize == cluster)
            .map(|(r, _)| r as u64)
            .collect())
    }

    pub fn level_summaries(&self) -> Vec<LevelSummary> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let n = l.sizes.len() as f64;
                let mean = l.sizes.iter().sum::<u64>() as f64 / n;
                let var = l.sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
                LevelSummary {
                    level: i + 1,
                    clusters: l.sizes.len(),
                    min: l.sizes.iter().copied().min().unwrap_or(0),
                    max: l.sizes.iter().copied().max().unwrap_or(0),
                    mean,
                    cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
                }
            })
            .collect()
    }

    /// Structural invariants: parent ranges, size aggregation, no empty
    /// cluster, consistent centroid shapes.
    fn check(&self) -> Result<(), (String, String)> {
        let hdr = |r: String| ("header".to_string(), r);
        if self.levels.len() < 2 {
            return Err(hdr(format!("depth {} < 2", self.levels.len())));
        }
        let n = self.base_assignment.len() as u64;
        let k1 = self.levels[0].cluster_count();
        let mut bottom = vec![0u64; k1];
        for &a in &self.base_assignment {
            let a = a as usize;
            if a >= k1 {
                return Err(("base_assignment".into(), format!("cluster {a} out of range")));
            }
            bottom[a] += 1;
        }
        if bottom != self.levels[0].sizes {
            return Err(("level 1".into(), "sizes disagree with base_assignment".into()));
        }
        let depth = self.levels.len();
        for (i, l) in self.levels.iter().enumerate() {
            let name = format!("level {}", i + 1);
            if !l.centroids.is_empty() && l.centroids.len() != l.cluster_count() * self.dim {
                return Err((name, "centroid payload has the wrong length".into()));
            }
            if l.sizes.contains(&0) {
                return Err((name, "empty cluster".into()));
            }
            if l.sizes.iter().sum::<u64>() != n {
                return Err((name, "sizes do not sum to the row count".into()));
            }
            match (&l.parent, i + 1 == depth) {
                (None, true) => {}
                (Some(p), false) => {
                    let up = &self.levels[i + 1];
                    if p.len() != l.cluster_count() {
                        return Err((name, "parent array has the wrong length".into()));
                    }
                    let mut agg = vec![0u64; up.cluster_count()];
                    for (c, &pa) in p.iter().enumerate() {
                        let pa = pa as usize;
                        if pa >= up.cluster_count() {
                            return Err((name, format!("parent {pa} out of range")));
                        }
                        agg[pa] += l.sizes[c];
                    }
                    if agg != up.sizes {
                        return Err((format!("level {}", i + 2), "sizes disagree with children".into()));
                    }
                }
                (None, false) => return Err((name, "missing parent array".into())),
                (Some(_), true) => return Err((name, "top level has a parent array".into())),
            }
        }
        Ok(())
    }
}

pub fn save_tree(tree: &ClusterTree, path: &Path) -> Result<(), TreeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tree(tree, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_tree(tree: &ClusterTree, w: &mut impl Write) -> io::Result<()> {
    w.write_all(TREE_MAGIC)?;
    binio::write_u32(w, TREE_VERSION)?;
    binio::write_u32(w, tree.depth() as u32)?;
    for l in &tree.levels {
        let mut body = Vec::new();
        let k = l.cluster_count();
        binio::write_u32(&mut body, k as u32)?;
        binio::write_u32(&mut body, tree.dim as u32)?;
        binio::write_u8(&mut body, !l.centroids.is_empty() as u8)?;
        binio::write_u8(&mut body, l.parent.is_some() as u8)?;
        body.write_all(&[0u8; 6])?;
        binio::write_f32s(&mut body, &l.centroids)?;
        if let Some(p) = &l.parent {
            for &v in p {
                binio::write_u32(&mut body, v)?;
            }
        }
        for &s in &l.sizes {
            binio::write_u64(&mut body, s)?;
        }
        binio::write_u64(w, body.len() as u64)?;
        w.write_all(&body)?;
    }
    let n = tree.base_assignment.len();
    binio::write_u64(w, 8 + 4 * n as u64)?;
    binio::write_u64(w, n as u64)?;
    let mut buf = Vec::with_capacity(4 * n);
    for &a in &tree.base_assignment {
        buf.extend_from_slice(&a.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_section(r: &mut impl Read, name: &str, remaining: &mut u64) -> Result<Vec<u8>, TreeError> {
    let len = binio::read_u64(r).map_err(|_| corrupt(name, "missing length prefix"))?;
    *remaining = remaining.saturating_sub(8);
    if len > *remaining {
        return Err(corrupt(name, format!("declares {len} bytes, {remaining} left")));
    }
    *remaining -= len;
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)
        .map_err(|_| corrupt(name, "truncated body"))?;
    Ok(body)
}

pub fn load_tree(path: &Path) -> Result<ClusterTree, TreeError> {
    let f = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => TreeError::NotFound(path.display().to_string()),
        _ => TreeError::Io(e),
    })?;
    let len = f.metadata()?.len();
    read_tree(&mut BufReader::new(f), len)
}

/// Parse a tree from `r`, which holds exactly `len` bytes.
pub fn read_tree(r: &mut impl Read, len: u64) -> Result<ClusterTree, TreeError> {
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != TREE_MAGIC {
        return Err(TreeError::BadMagic);
    }
    let version = binio::read_u32(r).map_err(|_| corrupt("header", "truncated"))?;
    if version != TREE_VERSION {
        return Err(TreeError::VersionMismatch(version));
    }
    let depth = binio::read_u32(r).map_err(|_| corrupt("header", "truncated"))? as usize;
    if depth < 2 {
        return Err(corrupt("header", format!("depth {depth} < 2")));
    }
    let mut remaining = len.saturating_sub(12);

    let mut dim = None;
    let mut levels = Vec::with_capacity(depth);
    for i in 0..depth {
        let name = format!("level {}", i + 1);
        let body = read_section(r, &name, &mut remaining)?;
        let mut c = Cursor::new(&body);
        let bad = || corrupt(name.as_str(), "body too short");
        let k = c.u32().ok_or_else(bad)? as usize;
        let d = c.u32().ok_or_else(bad)? as usize;
        let has_c = c.u8().ok_or_else(bad)?;
        let has_p = c.u8().ok_or_else(bad)?;
        c.take(6).ok_or_else(bad)?;
        if *dim.get_or_insert(d) != d {
            return Err(corrupt(name.as_str(), "dimension differs from level 1"));
        }
        let centroids = if has_c == 1 {
            c.f32s(k * d).ok_or_else(bad)?
        } else {
            Vec::new()
        };
        let parent = if has_p == 1 {
            Some(c.u32s(k).ok_or_else(bad)?)
        } else {
            None
        };
        let sizes = c.u64s(k).ok_or_else(bad)?;
        if !c.is_empty() {
            return Err(corrupt(name.as_str(), "trailing bytes in section"));
        }
        levels.push(TreeLevel {
            centroids,
            parent,
            sizes,
        });
    }

    let body = read_section(r, "base_assignment", &mut remaining)?;
    let mut c = Cursor::new(&body);
    let n = c
        .u64()
        .ok_or_else(|| corrupt("base_assignment", "body too short"))? as usize;
    let base = c
        .u32s(n)
        .ok_or_else(|| corrupt("base_assignment", "body too short"))?;
    if !c.is_empty() || remaining != 0 {
        return Err(corrupt("base_assignment", "trailing bytes"));
    }
    ClusterTree::from_parts(dim.unwrap_or(0), levels, base)
}
