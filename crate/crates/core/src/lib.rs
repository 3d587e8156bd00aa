//! Counting statistics of two independent Bose fields interfering on an
//! array of quadratic detectors: source pmf construction, detector flux
//! matrices and their unitary dilation, exact and quadrature counting
//! kernels, and interference diagnostics on the resulting distributions.

pub mod analysis;
pub mod config;
pub mod detector;
pub mod kernel;
pub mod number_stats;
pub mod numeric;
pub mod output;

pub use analysis::{
    conditional, find_peaks, infer_phase, predict_counts, scaling_invariance_check,
    AnalysisError, MeanFieldEstimate, Peak, PeakReport, PhaseSolution,
};
pub use detector::{
    build_dilation, mean_count, mean_field_count, scale_array, validate_array, DetectorArray,
    DetectorError, DetectorMatrix, DilatedNetwork,
};
pub use kernel::{
    marginal, mixture_joint, Backend, CountTable, JointCountDistribution, KernelCache,
    KernelError, KernelOptions,
};
pub use number_stats::{
    binomial_thinning, classify, effective_moments, make_distribution, moments,
    NumberDistribution, SourceFamily, StatClass,
};
