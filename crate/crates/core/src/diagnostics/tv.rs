use crate::sampler::{self, AllocationPlan, SampleError, Target};
use crate::tree::{ClusterTree, TreeError};

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DiagError {
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),
    #[error("invalid fractions: {0}")]
    InvalidFractions(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

/// Non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProportionVector(Vec<f64>);

impl ProportionVector {
    pub fn new(p: Vec<f64>) -> Result<Self, DiagError> {
        if p.is_empty() {
            return Err(DiagError::InvalidProportions("empty".into()));
        }
        if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(DiagError::InvalidProportions(format!("bad entry {x}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(DiagError::InvalidProportions(format!("sum is {s}")));
        }
        Ok(ProportionVector(p))
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self, DiagError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(DiagError::InvalidProportions("all counts are zero".into()));
        }
        Ok(ProportionVector(
            counts.iter().map(|&c| c as f64 / total as f64).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

/// Total variation distance to the uniform distribution over the same
/// support: `0.5 * sum |p_i - 1/k|`.
pub fn tv_distance(p: &ProportionVector) -> f64 {
    let u = 1.0 / p.k() as f64;
    0.5 * p.0.iter().map(|&x| (x - u).abs()).sum::<f64>()
}

pub fn tv_of_counts(counts: &[u64]) -> Result<f64, DiagError> {
    Ok(tv_distance(&ProportionVector::from_counts(counts)?))
}

/// TV of an allocation's quota proportions.
pub fn quota_tv(plan: &AllocationPlan) -> Result<f64, DiagError> {
    tv_of_counts(&plan.quotas)
}

/// Number of `rows` falling into each cluster at `level`.
pub fn level_counts_of_rows(tree: &ClusterTree, level: usize, rows: &[u64]) -> Result<Vec<u64>, DiagError> {
    let labels = tree.row_labels(level)?;
    let mut counts = vec![0u64; tree.sizes(level)?.len()];
    for &r in rows {
        counts[labels[r as usize] as usize] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvPoint {
    pub fraction: f64,
    pub target: u64,
    pub achieved: u64,
    /// Realized TV at the sampling level.
    pub tv_sampling: f64,
    /// Realized TV at the measure level.
    pub tv_measure: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvCurve {
    pub sampling_level: usize,
    pub measure_level: usize,
    pub points: Vec<TvPoint>,
}

/// Sample a curated subset for each fraction and measure the realized
/// cluster proportions at both levels.
pub fn tv_curve(
    tree: &ClusterTree,
    sampling_level: usize,
    measure_level: usize,
    fractions: &[f64],
    seed: u64,
) -> Result<TvCurve, DiagError> {
    tree.level(measure_level)?;
    if fractions.is_empty() {
        return Err(DiagError::InvalidFractions("no fractions given".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(DiagError::InvalidFractions("fractions must lie in (0, 1]".into()));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagError::InvalidFractions("fractions must be strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let s = sampler::sample_subset(tree, sampling_level, Target::Fraction(f), seed, false)?;
        let tv_at = |level| -> Result<f64, DiagError> {
            tv_of_counts(&level_counts_of_rows(tree, level, &s.row_indices)?)
        };
        points.push(TvPoint {
            fraction: f,
            target: s.target,
            achieved: s.achieved(),
            tv_sampling: tv_at(sampling_level)?,
            tv_measure: tv_at(measure_level)?,
        });
    }
    Ok(TvCurve {
        sampling_level,
        measure_level,
        points,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeRow {
    pub cluster_id: usize,
    pub size: u64,
    pub log10_size: f64,
}

pub fn cluster_size_histogram(tree: &ClusterTree, level: usize) -> Result<Vec<SizeRow>, DiagError> {
    Ok(tree
        .sizes(level)?
        .iter()
        .enumerate()
        .map(|(cluster_id, &size)| SizeRow {
            cluster_id,
            size,
            log10_size: (size as f64).log10(),
        })
        .collect())
}
