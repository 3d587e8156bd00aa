//! Closed-form coherent-state backend and P-function quadrature for
//! classical (Poissonian / Gamma-mixed) sources.
//!
//! For coherent inputs the counting distribution factorizes into independent
//! Poissonians at the mean-field counts. U(1)-invariant classical sources
//! are handled by averaging over the relative phase (uniform rule,
//! spectrally accurate for periodic integrands) and integrating radial
//! intensities against the Gamma weight with generalized Gauss-Laguerre
//! quadrature.

use super::table::{pack_key, BackendTag, CountTable, CLAMP_FLOOR};
use super::KernelError;
use crate::detector::{mean_field_count, DetectorArray};
use crate::numeric::{poisson_cap, poisson_pmf, KahanSum, LnFactorials};
use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::TAU;

/// Radial (intensity) part of a phase-averaged source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassicalSpec {
    /// Fixed intensity: a Poissonian source of the given mean.
    Poissonian { mean: f64 },
    /// Gamma-distributed intensity with Q = (V - N̄)/N̄² > 0.
    GammaP { mean: f64, q_param: f64 },
    /// Single-photon-added thermal source over occupancy `nbar`
    /// (count mean 2 nbar + 1). Nonclassical, but exactly representable by
    /// the signed intensity density
    ///   f(I) = (1/x) Gamma(shape 2, scale nbar) - ((1-x)/x) Gamma(1, nbar),
    /// x = nbar / (1 + nbar), so the same Poisson-mixture quadrature applies
    /// with signed weights. The two coefficients grow like 1/nbar, so this
    /// route is reserved for nbar where the cancellation stays mild.
    PhotonAdded { nbar: f64 },
}

impl ClassicalSpec {
    pub fn mean(&self) -> f64 {
        match self {
            ClassicalSpec::Poissonian { mean } => *mean,
            ClassicalSpec::GammaP { mean, .. } => *mean,
            ClassicalSpec::PhotonAdded { nbar } => 2.0 * nbar + 1.0,
        }
    }
}

/// Nodes and weights for E[f(X)] with X ~ Gamma(shape 1/Q, scale Q*mean),
/// via Golub-Welsch on the generalized Laguerre recurrence.
pub fn gamma_quadrature(mean: f64, q_param: f64, nodes: usize) -> Result<Vec<(f64, f64)>, KernelError> {
    if !(mean > 0.0 && q_param > 0.0) {
        return Err(KernelError::Quadrature(format!(
            "gamma quadrature needs mean > 0 and Q > 0, got {mean}, {q_param}"
        )));
    }
    let alpha = 1.0 / q_param - 1.0;
    let scale = q_param * mean;
    let n = nodes;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = 2.0 * i as f64 + alpha + 1.0;
        if i + 1 < n {
            let b = ((i as f64 + 1.0) * (i as f64 + 1.0 + alpha)).sqrt();
            jac[(i, i + 1)] = b;
            jac[(i + 1, i)] = b;
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let w = eig.eigenvectors[(0, i)].powi(2);
            (x * scale, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // normalize against the probability weight (total Gamma mass 1)
    let total: f64 = pairs.iter().map(|&(_, w)| w).sum();
    for p in &mut pairs {
        p.1 /= total;
    }
    Ok(pairs)
}

/// Exact counting distribution for coherent inputs |alpha, beta> with
/// intensities i_a, i_b and relative phase delta_ab: a product of
/// independent Poissonians at the mean-field counts.
pub fn coherent_joint(
    i_a: f64,
    i_b: f64,
    delta_ab: f64,
    array: &DetectorArray,
    tail_tolerance: f64,
) -> Result<CountTable, KernelError> {
    if i_a < 0.0 || i_b < 0.0 {
        return Err(KernelError::Quadrature(format!(
            "intensities must be nonnegative, got {i_a}, {i_b}"
        )));
    }
    let m_count = array.len();
    let per_axis: Vec<Vec<f64>> = array
        .detectors()
        .iter()
        .map(|d| {
            let mu = mean_field_count(d, i_a, i_b, delta_ab).max(0.0);
            let cap = poisson_cap(mu, tail_tolerance / m_count as f64);
            poisson_pmf(mu, cap)
        })
        .collect();
    let mut pairs = Vec::new();
    let mut counts = vec![0u32; m_count];
    outer_product(&per_axis, 0, 1.0, &mut counts, &mut pairs);
    Ok(CountTable::from_pairs(
        m_count,
        pairs,
        BackendTag::CoherentQuadrature,
        format!("coherent({i_a},{i_b},{delta_ab})"),
        CLAMP_FLOOR,
    )?)
}

fn outer_product(
    per_axis: &[Vec<f64>],
    axis: usize,
    acc: f64,
    counts: &mut [u32],
    out: &mut Vec<(u128, f64)>,
) {
    if axis == per_axis.len() {
        out.push((pack_key(counts).expect("counts in range"), acc));
        return;
    }
    for (n, &p) in per_axis[axis].iter().enumerate() {
        let next = acc * p;
        if next == 0.0 {
            continue;
        }
        counts[axis] = n as u32;
        outer_product(per_axis, axis + 1, next, counts, out);
        counts[axis] = 0;
    }
}

/// Joint counting distribution for two independent classical sources,
/// integrating the coherent-state result over the relative phase and the
/// Gamma-distributed intensities. Two-detector arrays use a windowed dense
/// accumulator; the relative phase uses `phase_nodes` uniform points.
pub fn classical_joint(
    spec_a: ClassicalSpec,
    spec_b: ClassicalSpec,
    array: &DetectorArray,
    phase_nodes: usize,
    radial_nodes: usize,
) -> Result<CountTable, KernelError> {
    if phase_nodes < 64 || !phase_nodes.is_power_of_two() {
        return Err(KernelError::Quadrature(format!(
            "phase_nodes must be a power of two >= 64, got {phase_nodes}"
        )));
    }
    let any_gamma = !matches!(spec_a, ClassicalSpec::Poissonian { .. })
        || !matches!(spec_b, ClassicalSpec::Poissonian { .. });
    if any_gamma && radial_nodes < 16 {
        return Err(KernelError::Quadrature(format!(
            "radial_nodes must be >= 16 for Gamma sources, got {radial_nodes}"
        )));
    }
    if array.len() != 2 {
        return Err(KernelError::Quadrature(format!(
            "the quadrature backend supports exactly two detectors, got {}",
            array.len()
        )));
    }
    let radial = |spec: ClassicalSpec| -> Result<Vec<(f64, f64)>, KernelError> {
        match spec {
            ClassicalSpec::Poissonian { mean } => Ok(vec![(mean, 1.0)]),
            ClassicalSpec::GammaP { mean, q_param } => {
                gamma_quadrature(mean, q_param, radial_nodes)
            }
            ClassicalSpec::PhotonAdded { nbar } => {
                if !(nbar > 0.0) {
                    return Err(KernelError::Quadrature(format!(
                        "photon-added thermal quadrature needs nbar > 0, got {nbar}"
                    )));
                }
                // signed mixture of Gamma(2, nbar) (mean 2 nbar, Q = 1/2)
                // and Gamma(1, nbar) (mean nbar, Q = 1)
                let x = nbar / (1.0 + nbar);
                let mut nodes = gamma_quadrature(2.0 * nbar, 0.5, radial_nodes)?;
                for n in &mut nodes {
                    n.1 /= x;
                }
                let neg = gamma_quadrature(nbar, 1.0, radial_nodes)?;
                nodes.extend(neg.into_iter().map(|(i, w)| (i, -w * (1.0 - x) / x)));
                Ok(nodes)
            }
        }
    };
    let radial_a = radial(spec_a)?;
    let radial_b = radial(spec_b)?;

    // prune radial pairs with negligible joint weight; their mass is
    // reported as pruned, not silently lost. Weights may be negative for
    // photon-added sources, so prune and account by magnitude.
    const RADIAL_FLOOR: f64 = 1e-14;
    let mut kept: Vec<(f64, f64, f64)> = Vec::new(); // (i_a, i_b, weight)
    let mut pruned = KahanSum::new();
    for &(ia, wa) in &radial_a {
        for &(ib, wb) in &radial_b {
            let w = wa * wb;
            if w.abs() < RADIAL_FLOOR {
                pruned.add(w.abs());
            } else {
                kept.push((ia, ib, w));
            }
        }
    }

    let d1 = &array.detectors()[0];
    let d2 = &array.detectors()[1];
    // caps from the largest possible mean over kept nodes
    let mut caps = [0usize; 2];
    for (axis, d) in [d1, d2].into_iter().enumerate() {
        let mut mu_max = 0.0f64;
        for &(ia, ib, _) in &kept {
            let mu = d.r_aa * ia + d.r_bb * ib + 2.0 * d.r_ab.norm() * (ia * ib).sqrt();
            mu_max = mu_max.max(mu);
        }
        caps[axis] = poisson_cap(mu_max, 1e-16);
    }
    let lf = LnFactorials::up_to(caps[0].max(caps[1]) + 1);

    let stride = caps[1] + 1;
    let mut dense = vec![0.0f64; (caps[0] + 1) * stride];
    let phase_w = 1.0 / phase_nodes as f64;
    let mut window0 = Vec::new();
    let mut window1 = Vec::new();
    for &(ia, ib, w) in &kept {
        for k in 0..phase_nodes {
            let delta = TAU * k as f64 / phase_nodes as f64;
            let mu1 = mean_field_count(d1, ia, ib, delta).max(0.0);
            let mu2 = mean_field_count(d2, ia, ib, delta).max(0.0);
            let (lo0, _) = poisson_window(mu1, caps[0], &lf, &mut window0);
            let (lo1, len1) = poisson_window(mu2, caps[1], &lf, &mut window1);
            if window0.is_empty() || window1.is_empty() {
                continue;
            }
            let wt = w * phase_w;
            for (off0, &p0) in window0.iter().enumerate() {
                let f = wt * p0;
                let row = &mut dense[(lo0 + off0) * stride + lo1..(lo0 + off0) * stride + lo1 + len1];
                for (slot, &p1) in row.iter_mut().zip(window1.iter()) {
                    *slot += f * p1;
                }
            }
        }
    }

    let desc = format!("classical({spec_a:?} x {spec_b:?})");
    // signed radial weights can leave quadrature-error-sized negatives in
    // entries whose true value is below the integration accuracy
    let clamp = if kept.iter().any(|&(_, _, w)| w < 0.0) {
        -1e-9
    } else {
        CLAMP_FLOOR
    };
    let mut table = CountTable::from_dense_2d(
        &dense,
        caps[1],
        BackendTag::CoherentQuadrature,
        desc,
        1e-17,
        clamp,
    )?;
    table.add_pruned_mass(pruned.value());
    Ok(table)
}

/// Windowed Poisson pmf around the mode; returns (window_lo, window_len).
fn poisson_window(
    mu: f64,
    cap: usize,
    lf: &LnFactorials,
    out: &mut Vec<f64>,
) -> (usize, usize) {
    out.clear();
    if mu == 0.0 {
        out.push(1.0);
        return (0, 1);
    }
    let sigma = mu.sqrt();
    let lo = ((mu - 9.0 * sigma - 20.0).floor().max(0.0)) as usize;
    let hi = (((mu + 9.0 * sigma + 20.0).ceil()) as usize).min(cap);
    if lo > hi {
        return (0, 0);
    }
    let lp = -mu + lo as f64 * mu.ln() - lf.get(lo);
    let mut p = lp.exp();
    out.push(p);
    for n in lo + 1..=hi {
        p *= mu / n as f64;
        out.push(p);
    }
    (lo, hi - lo + 1)
}
