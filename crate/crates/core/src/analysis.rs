//! Diagnostics on joint count tables: conditional slices, mean-field phase
//! inference from a single detector outcome, peak/width reports against the
//! Poisson shot-noise benchmark, and the detector-rescaling invariance check.

use crate::detector::{mean_count, mean_field_count, scale_array, DetectorArray, DetectorMatrix};
use crate::kernel::{mixture_joint, Backend, JointCountDistribution, KernelError, KernelOptions};
use crate::number_stats::{binomial_thinning, NumberDistribution, NumberStatsError};
use crate::numeric::{poisson_cap, poisson_pmf, KahanSum};
use thiserror::Error;

pub const EVIDENCE_FLOOR: f64 = 1e-15;
/// Mass fraction defining the peak-width window (one-sigma equivalent).
pub const WIDTH_MASS_FRACTION: f64 = 0.683;
const PEAK_MERGE_RADIUS: usize = 2;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("conditioning outcome n = {given} has negligible mass; nearest supported count is {nearest:?}")]
    NegligibleEvidence { given: u32, nearest: Option<u32> },
    #[error("detector has r_ab = 0; the outcome carries no phase information")]
    DegenerateDetector,
    #[error("no peak clears the minimum mass {min_mass}")]
    NoPeaks { min_mass: f64 },
    #[error("detector index {index} out of range 1..={count}")]
    IndexRange { index: usize, count: usize },
    #[error("conditional slices require a two-detector table, got {0} axes")]
    NotTwoDetectors(usize),
    #[error("parameter out of range: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Stats(#[from] NumberStatsError),
}

/// P(n_other | n_given) for a two-detector joint table; `given_detector`
/// is 1-based. The slice is renormalized to unit mass.
pub fn conditional(
    joint: &JointCountDistribution,
    given_detector: usize,
    given_count: u32,
) -> Result<NumberDistribution, AnalysisError> {
    let axes = joint.table.axes();
    if axes != 2 {
        return Err(AnalysisError::NotTwoDetectors(axes));
    }
    if given_detector == 0 || given_detector > axes {
        return Err(AnalysisError::IndexRange {
            index: given_detector,
            count: axes,
        });
    }
    let g = given_detector - 1;
    let other = 1 - g;
    let mut slice: Vec<f64> = Vec::new();
    let mut evidence = KahanSum::new();
    for (counts, p) in joint.table.iter() {
        if counts[g] != given_count {
            continue;
        }
        let n = counts[other] as usize;
        if slice.len() <= n {
            slice.resize(n + 1, 0.0);
        }
        slice[n] = p;
        evidence.add(p);
    }
    let evidence = evidence.value();
    if evidence <= EVIDENCE_FLOOR {
        // report the closest count that does carry mass
        let marg = joint.table.marginal_axis(g);
        let nearest = marg
            .iter()
            .enumerate()
            .filter(|&(_, &p)| p > EVIDENCE_FLOOR)
            .min_by_key(|&(n, _)| (n as i64 - given_count as i64).unsigned_abs())
            .map(|(n, _)| n as u32);
        return Err(AnalysisError::NegligibleEvidence {
            given: given_count,
            nearest,
        });
    }
    Ok(NumberDistribution::from_custom_pmf(&slice)?)
}

/// Both branches of the phase estimate from one detector outcome. The
/// deltas are the observable combination delta_ab + theta_1 folded to
/// (-pi, pi]; theta1 is kept so delta_ab itself can be recovered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldEstimate {
    pub n1: u32,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub theta1: f64,
}

/// Outcomes beyond the mean-field envelope are physical (finite-number
/// fluctuations), so NoSolution is a value, not an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseSolution {
    Estimate(MeanFieldEstimate),
    NoSolution { cosine: f64 },
}

/// Invert n1 = <n1> + 2|r_ab| sqrt(nbar_a nbar_b) cos(delta_ab + theta_1).
pub fn infer_phase(
    n1: u32,
    d1: &DetectorMatrix,
    nbar_a: f64,
    nbar_b: f64,
) -> Result<PhaseSolution, AnalysisError> {
    if !(nbar_a > 0.0 && nbar_b > 0.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "source means must be positive, got {nbar_a}, {nbar_b}"
        )));
    }
    let amp = 2.0 * d1.r_ab.norm() * (nbar_a * nbar_b).sqrt();
    if amp == 0.0 {
        return Err(AnalysisError::DegenerateDetector);
    }
    let cosine = (n1 as f64 - mean_count(d1, nbar_a, nbar_b)) / amp;
    if cosine.abs() > 1.0 + 1e-9 {
        return Ok(PhaseSolution::NoSolution { cosine });
    }
    let phi = cosine.clamp(-1.0, 1.0).acos();
    Ok(PhaseSolution::Estimate(MeanFieldEstimate {
        n1,
        delta_plus: phi,
        delta_minus: -phi,
        theta1: d1.theta(),
    }))
}

/// Mean-field counts at a second detector for the two phase branches.
pub fn predict_counts(
    est: &MeanFieldEstimate,
    d2: &DetectorMatrix,
    nbar_a: f64,
    nbar_b: f64,
) -> (f64, f64) {
    (
        mean_field_count(d2, nbar_a, nbar_b, est.delta_plus - est.theta1),
        mean_field_count(d2, nbar_a, nbar_b, est.delta_minus - est.theta1),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub location: usize,
    pub mass: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakReport {
    pub peaks: Vec<Peak>,
    pub poisson_width_at_peak: Vec<f64>,
    pub narrower_than_poisson: Vec<bool>,
}

impl PeakReport {
    /// Largest width / poisson-width ratio over the detected peaks.
    pub fn max_width_ratio(&self) -> f64 {
        self.peaks
            .iter()
            .zip(&self.poisson_width_at_peak)
            .map(|(p, &w)| p.width / w)
            .fold(0.0, f64::max)
    }
}

/// Smallest contiguous window inside [lo, hi] containing `mode` whose mass
/// reaches `frac` of the window [lo, hi] total; returns half the window
/// length in counts.
fn quantile_half_width(p: &[f64], lo: usize, hi: usize, mode: usize, frac: f64) -> f64 {
    let total: f64 = p[lo..=hi].iter().sum();
    let target = frac * total;
    let mut best = hi - lo + 1;
    let mut r = mode;
    let mut window: f64 = p[lo..=mode].iter().sum();
    // two-pointer sweep: as the left edge moves right, the matching right
    // edge is non-decreasing
    for l in lo..=mode {
        if l > lo {
            window -= p[l - 1];
        }
        while window < target && r < hi {
            r += 1;
            window += p[r];
        }
        if window >= target {
            best = best.min(r - l + 1);
        } else {
            break;
        }
    }
    best as f64 / 2.0
}

/// Local maxima after 3-point smoothing, merged within 2 counts, each
/// carrying its basin mass and 68.3%-quantile half width, benchmarked
/// against a Poisson pmf at the same mode.
pub fn find_peaks(dist: &NumberDistribution, min_mass: f64) -> Result<PeakReport, AnalysisError> {
    if !(min_mass > 0.0 && min_mass < 0.5) {
        return Err(AnalysisError::InvalidParameter(format!(
            "min_mass must lie in (0, 0.5), got {min_mass}"
        )));
    }
    let p = dist.pmf();
    let n = p.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let l = if i > 0 { p[i - 1] } else { 0.0 };
            let r = if i + 1 < n { p[i + 1] } else { 0.0 };
            (l + p[i] + r) / 3.0
        })
        .collect();
    let mut maxima: Vec<usize> = Vec::new();
    for i in 0..n {
        let l = if i > 0 { smooth[i - 1] } else { -1.0 };
        let r = if i + 1 < n { smooth[i + 1] } else { -1.0 };
        if smooth[i] > 0.0 && smooth[i] > l && smooth[i] >= r {
            maxima.push(i);
        }
    }
    // merge maxima closer than the merge radius, keeping the higher one
    let mut merged: Vec<usize> = Vec::new();
    for &i in &maxima {
        match merged.last() {
            Some(&j) if i - j <= PEAK_MERGE_RADIUS => {
                if smooth[i] > smooth[j] {
                    *merged.last_mut().unwrap() = i;
                }
            }
            _ => merged.push(i),
        }
    }
    if merged.is_empty() {
        return Err(AnalysisError::NoPeaks { min_mass });
    }
    // basin boundaries at the smoothed minimum between consecutive maxima
    let mut bounds = vec![0usize];
    for w in merged.windows(2) {
        let (a, b) = (w[0], w[1]);
        let split = (a..=b)
            .min_by(|&i, &j| smooth[i].partial_cmp(&smooth[j]).unwrap())
            .unwrap();
        bounds.push(split);
    }
    bounds.push(n - 1);

    let mut peaks = Vec::new();
    let mut poisson_widths = Vec::new();
    let mut narrower = Vec::new();
    for (k, &m) in merged.iter().enumerate() {
        let (lo, hi) = (bounds[k], bounds[k + 1]);
        let mass: f64 = p[lo..=hi].iter().sum();
        if mass < min_mass {
            continue;
        }
        // mode on the raw pmf within the basin
        let mode = (lo..=hi)
            .max_by(|&i, &j| p[i].partial_cmp(&p[j]).unwrap())
            .unwrap_or(m);
        let width = quantile_half_width(p, lo, hi, mode, WIDTH_MASS_FRACTION);
        let pw = poisson_reference_width(mode);
        peaks.push(Peak {
            location: mode,
            mass,
            width,
        });
        narrower.push(width < pw);
        poisson_widths.push(pw);
    }
    if peaks.is_empty() {
        return Err(AnalysisError::NoPeaks { min_mass });
    }
    Ok(PeakReport {
        peaks,
        poisson_width_at_peak: poisson_widths,
        narrower_than_poisson: narrower,
    })
}

/// The same quantile functional applied to a Poisson pmf with mean at the
/// peak mode: the shot-noise benchmark width.
fn poisson_reference_width(mode: usize) -> f64 {
    let mean = (mode as f64).max(1e-6);
    let cap = poisson_cap(mean, 1e-12);
    let pmf = poisson_pmf(mean, cap);
    let pmode = (0..pmf.len())
        .max_by(|&i, &j| pmf[i].partial_cmp(&pmf[j]).unwrap())
        .unwrap();
    quantile_half_width(&pmf, 0, pmf.len() - 1, pmode, WIDTH_MASS_FRACTION)
}

/// Total-variation residual of the detector-rescaling theorem: the joint
/// table for the original sources and array, marginalized onto the first
/// `keep` detectors, against the table for binomially thinned sources and
/// the array scaled by 1/q with the remaining detectors dropped. Exactly
/// zero in principle for every q.
pub fn scaling_invariance_check(
    source_a: &NumberDistribution,
    source_b: &NumberDistribution,
    array: &DetectorArray,
    q: f64,
    keep: usize,
    backend: Backend,
    opts: &KernelOptions,
) -> Result<f64, AnalysisError> {
    let original = mixture_joint(source_a, source_b, array, backend, opts)?;
    let reference = if keep < array.len() {
        let axes: Vec<usize> = (0..keep).collect();
        original.table.marginalize_onto(&axes).map_err(KernelError::from)?
    } else {
        original.table
    };
    let thin = |d: &NumberDistribution| -> Result<NumberDistribution, AnalysisError> {
        Ok(binomial_thinning(d, q)?.retruncate(opts.tail_tolerance))
    };
    let scaled = scale_array(array, q, keep).map_err(KernelError::from)?;
    let rescaled = mixture_joint(&thin(source_a)?, &thin(source_b)?, &scaled, backend, opts)?;
    Ok(reference.tv_distance(&rescaled.table))
}
