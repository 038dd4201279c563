//! Shared fixtures for the benchmark suite: the standard synthetic cohort
//! and a matching model at the published operating point.

use remi_core::{generate_synthetic, LongitudinalDataset, ModelParams, Variant};

/// 40 subjects, 10 ROIs, 4 views, 2 timepoints, seed 42.
pub fn benchmark_cohort() -> LongitudinalDataset {
    generate_synthetic(40, 10, 4, 2, 42, 0.05, 0.05)
}

/// Full variant at the published widths (12, 36, 24).
pub fn benchmark_params() -> ModelParams {
    ModelParams::init(Variant::Full, &[12, 36, 24], 4, 42)
}
