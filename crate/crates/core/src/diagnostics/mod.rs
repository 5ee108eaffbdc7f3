//! Balance and agreement diagnostics, plus the synthetic data generator
//! used by tests and the `generate` command.

mod ari;
mod csv;
mod synth;
mod tv;

pub use ari::{adjusted_rand_index, AriError};
pub use csv::{format_sig, write_size_histogram, write_tv_curve};
pub use synth::{component_sizes, generate_heavy_tailed, SynthError, SynthParams};
pub use tv::{
    cluster_size_histogram, level_counts_of_rows, quota_tv, tv_curve, tv_distance, tv_of_counts,
    DiagError, ProportionVector, SizeRow, TvCurve, TvPoint,
};
