use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::store::EmbeddingMatrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub num_points: usize,
    pub dim: usize,
    pub num_components: usize,
    /// Component `r` (1-based rank) gets weight `r^-tail_exponent`.
    pub tail_exponent: f64,
    /// Component means are `mean_scale * N(0, I)`.
    pub mean_scale: f64,
    /// Isotropic standard deviation inside each component.
    pub component_std: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(num_points: usize, dim: usize, num_components: usize, tail_exponent: f64, seed: u64) -> Self {
        SynthParams {
            num_points,
            dim,
            num_components,
            tail_exponent,
            mean_scale: 10.0,
            component_std: 1.0,
            seed,
        }
    }
}

/// Zipf-like component sizes summing to `num_points`, every component
/// getting at least one point. Largest-remainder rounding, so
/// `tail_exponent = 0` gives sizes within one of each other.
pub fn component_sizes(num_points: usize, num_components: usize, tail_exponent: f64) -> Vec<usize> {
    let k = num_components;
    let w: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-tail_exponent)).collect();
    let total_w: f64 = w.iter().sum();
    let spare = num_points - k;
    let exact: Vec<f64> = w.iter().map(|x| x / total_w * spare as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| 1 + x.floor() as usize).collect();
    let mut left = num_points - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Gaussian mixture with heavy-tailed component sizes. Rows are shuffled;
/// the second value holds each row's generating component (0 = largest).
pub fn generate_heavy_tailed(p: &SynthParams) -> Result<(EmbeddingMatrix, Vec<u32>), SynthError> {
    if p.dim == 0 || p.num_components == 0 {
        return Err(SynthError::InvalidParams("dim and num_components must be positive".into()));
    }
    if p.num_components > p.num_points {
        return Err(SynthError::InvalidParams(format!(
            "{} components for {} points",
            p.num_components, p.num_points
        )));
    }
    if !(p.tail_exponent >= 0.0) || !p.tail_exponent.is_finite() {
        return Err(SynthError::InvalidParams("tail_exponent must be finite and >= 0".into()));
    }
    if !(p.component_std > 0.0) || !(p.mean_scale >= 0.0) {
        return Err(SynthError::InvalidParams("scales must be positive".into()));
    }
    let mut r = rng::stream(p.seed);
    let sizes = component_sizes(p.num_points, p.num_components, p.tail_exponent);
    let means: Vec<f64> = (0..p.num_components * p.dim)
        .map(|_| { let z: f64 = StandardNormal.sample(&mut r); p.mean_scale * z })
        .collect();
    let mut order: Vec<u32> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c as u32, s))
        .collect();
    order.shuffle(&mut r);
    let mut data = Vec::with_capacity(p.num_points * p.dim);
    for &c in &order {
        let mu = &means[c as usize * p.dim..(c as usize + 1) * p.dim];
        for &m in mu {
            let z: f64 = StandardNormal.sample(&mut r);
            data.push((m + p.component_std * z) as f32);
        }
    }
    let m = EmbeddingMatrix::from_vec(p.dim, data).map_err(|e| SynthError::InvalidParams(e.to_string()))?;
    Ok((m, order))
}
