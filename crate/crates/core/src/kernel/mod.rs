//! Counting kernel: maps a pair of independent sources through a detector
//! array to the joint distribution of detected counts.
//!
//! Three backends share the same output format (`CountTable`):
//! - `Network`: exact number-state propagation, valid for any source pmf;
//! - `CoherentQuadrature`: phase and intensity quadrature over coherent
//!   states, valid for classical (Poissonian / gamma_p) sources and for
//!   photon-added thermal sources via an exact signed intensity density;
//! - `MomentOracle`: direct normally-ordered moment expansion, exponential
//!   cost, used as an independent cross-check at small particle number.

pub mod cache;
pub mod fock;
mod fock_big;
pub mod oracle;
pub mod quadrature;
pub mod table;

pub use cache::KernelCache;
pub use fock::{fock_joint, fock_joint_with_tolerance, DEFAULT_MASS_TOLERANCE};
pub use oracle::{moment_oracle, ORACLE_MAX_TOTAL};
pub use quadrature::{classical_joint, coherent_joint, gamma_quadrature, ClassicalSpec};
pub use table::{BackendTag, CountTable, TableError};

use crate::detector::{build_dilation, DetectorArray, DetectorError};
use crate::number_stats::{
    NumberDistribution, NumberStatsError, SourceFamily, DEFAULT_TAIL_TOLERANCE,
};
use crate::numeric::KahanSum;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_BUDGET: u64 = 10_000_000;
pub const DEFAULT_PHASE_NODES: usize = 256;
pub const DEFAULT_RADIAL_NODES: usize = 48;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(
        "estimated {estimated:.3e} detector configurations exceeds budget {budget}; \
         raise the budget or rescale the array with scale_array(q) and thin the \
         sources, which leaves the counting distribution unchanged"
    )]
    BudgetExceeded { estimated: f64, budget: u64 },
    #[error(
        "number-state kernel mass defect {defect:.3e} still exceeds tolerance \
         {tolerance:.1e} at {bits}-bit working precision"
    )]
    MassCheck {
        defect: f64,
        tolerance: f64,
        bits: u32,
    },
    #[error("moment expansion infeasible at {n_tot} total quanta (limit {max})")]
    OracleScale { n_tot: usize, max: usize },
    #[error("quadrature backend: {0}")]
    Quadrature(String),
    #[error("backend selection: {0}")]
    Backend(String),
    #[error("kernel cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Stats(#[from] NumberStatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Quadrature when both sources are classical, network otherwise.
    #[default]
    Auto,
    Network,
    CoherentQuadrature,
}

#[derive(Debug, Clone)]
pub struct KernelOptions {
    /// Cap on the number of detector-count configurations a single
    /// number-state kernel may enumerate.
    pub budget: u64,
    pub tail_tolerance: f64,
    pub phase_nodes: usize,
    pub radial_nodes: usize,
    /// Joint source-number pairs (N_a, N_b) whose combined probability is
    /// below this are skipped; the skipped mass is reported as pruned.
    /// Zero disables pruning.
    pub pair_mass_tolerance: f64,
    /// Bound on |total mass - 1| accepted from a single number-state kernel
    /// before it is recomputed at higher working precision. Since the
    /// mixture weights sum to at most 1, this also bounds the kernel-induced
    /// error of the mixed table.
    pub kernel_mass_tolerance: f64,
    pub cache: Option<Arc<KernelCache>>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            tail_tolerance: DEFAULT_TAIL_TOLERANCE,
            phase_nodes: DEFAULT_PHASE_NODES,
            radial_nodes: DEFAULT_RADIAL_NODES,
            pair_mass_tolerance: 0.0,
            kernel_mass_tolerance: fock::DEFAULT_MASS_TOLERANCE,
            cache: None,
        }
    }
}

/// Joint counting distribution together with the inputs that produced it.
#[derive(Debug, Clone)]
pub struct JointCountDistribution {
    pub table: CountTable,
    pub source_a: NumberDistribution,
    pub source_b: NumberDistribution,
    pub array: DetectorArray,
}

fn classical_spec(family: &SourceFamily) -> Option<ClassicalSpec> {
    match family {
        SourceFamily::Poisson { mean } => Some(ClassicalSpec::Poissonian { mean: *mean }),
        SourceFamily::Thermal { nbar } => Some(ClassicalSpec::GammaP {
            mean: *nbar,
            q_param: 1.0,
        }),
        SourceFamily::GammaP { mean, q_param } => Some(ClassicalSpec::GammaP {
            mean: *mean,
            q_param: *q_param,
        }),
        // exactly representable by a signed intensity density; the signed
        // coefficients scale like 1/nbar, so small occupancies stay on the
        // network backend where they are cheap anyway
        SourceFamily::PhotonAddedThermal { nbar } if *nbar >= 0.5 => {
            Some(ClassicalSpec::PhotonAdded { nbar: *nbar })
        }
        _ => None,
    }
}

/// Joint counting distribution for two independent sources with a uniform
/// relative phase. The network backend mixes exact per-pair number-state
/// kernels over the source pmfs; the quadrature backend integrates the
/// coherent-state solution over phase and intensity.
pub fn mixture_joint(
    source_a: &NumberDistribution,
    source_b: &NumberDistribution,
    array: &DetectorArray,
    backend: Backend,
    opts: &KernelOptions,
) -> Result<JointCountDistribution, KernelError> {
    let spec_a = classical_spec(source_a.family());
    let spec_b = classical_spec(source_b.family());
    let use_quadrature = match backend {
        Backend::CoherentQuadrature => {
            if spec_a.is_none() || spec_b.is_none() {
                return Err(KernelError::Backend(format!(
                    "quadrature requires classical sources, got {} and {}",
                    source_a.family_tag(),
                    source_b.family_tag()
                )));
            }
            true
        }
        Backend::Network => false,
        Backend::Auto => spec_a.is_some() && spec_b.is_some(),
    };

    let table = if use_quadrature {
        classical_joint(
            spec_a.unwrap(),
            spec_b.unwrap(),
            array,
            opts.phase_nodes,
            opts.radial_nodes,
        )?
    } else {
        network_mixture(source_a, source_b, array, opts)?
    };

    Ok(JointCountDistribution {
        table,
        source_a: source_a.clone(),
        source_b: source_b.clone(),
        array: array.clone(),
    })
}

fn network_mixture(
    source_a: &NumberDistribution,
    source_b: &NumberDistribution,
    array: &DetectorArray,
    opts: &KernelOptions,
) -> Result<CountTable, KernelError> {
    let net = build_dilation(array)?;
    let fingerprint = net.fingerprint();

    // in (N_a, N_b) lexicographic order so the accumulation is deterministic
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (n_a, p_a) in source_a.support() {
        for (n_b, p_b) in source_b.support() {
            pairs.push((n_a, n_b, p_a * p_b));
        }
    }
    let mut dropped = 0.0;
    if opts.pair_mass_tolerance > 0.0 {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&i, &j| pairs[i].2.partial_cmp(&pairs[j].2).unwrap());
        let mut cut = vec![false; pairs.len()];
        let mut acc = 0.0;
        for &i in &order {
            if acc + pairs[i].2 > opts.pair_mass_tolerance {
                break;
            }
            acc += pairs[i].2;
            cut[i] = true;
        }
        dropped = acc;
        let mut idx = 0;
        pairs.retain(|_| {
            let keep = !cut[idx];
            idx += 1;
            keep
        });
    }

    // fail before doing any work if the heaviest pair is out of reach
    let worst = pairs.iter().map(|&(a, b, _)| a + b).max().unwrap_or(0);
    let ln_work = fock::ln_config_count(worst, net.rows().len());
    if ln_work > (opts.budget as f64).ln() {
        return Err(KernelError::BudgetExceeded {
            estimated: ln_work.exp(),
            budget: opts.budget,
        });
    }

    let mut accum: BTreeMap<u128, KahanSum> = BTreeMap::new();
    // compute kernels in parallel batch by batch, accumulate in pair order
    for batch in pairs.chunks(32) {
        let tables: Vec<Result<Arc<CountTable>, KernelError>> = batch
            .par_iter()
            .map(|&(n_a, n_b, _)| match &opts.cache {
                Some(cache) => cache.get_or_compute(&fingerprint, n_a as u32, n_b as u32, || {
                    fock_joint_with_tolerance(n_a, n_b, &net, opts.budget, opts.kernel_mass_tolerance)
                }),
                None => fock_joint_with_tolerance(n_a, n_b, &net, opts.budget, opts.kernel_mass_tolerance)
                    .map(Arc::new),
            })
            .collect();
        for (table, &(_, _, w)) in tables.into_iter().zip(batch) {
            for &(key, p) in table?.entries() {
                accum.entry(key).or_insert_with(KahanSum::new).add(w * p);
            }
        }
    }

    let entries: Vec<(u128, f64)> = accum
        .into_iter()
        .map(|(k, s)| (k, s.value()))
        .collect();
    let mut table = CountTable::from_pairs(
        array.len(),
        entries,
        BackendTag::Network,
        format!("{}x{}", source_a.family_tag(), source_b.family_tag()),
        table::CLAMP_FLOOR,
    )?;
    table.add_pruned_mass(dropped);
    Ok(table)
}

/// Marginal counting distribution of detector `m` (1-based).
pub fn marginal(
    joint: &JointCountDistribution,
    m: usize,
) -> Result<NumberDistribution, KernelError> {
    if m == 0 || m > joint.table.axes() {
        return Err(KernelError::Backend(format!(
            "detector index {m} out of range 1..={}",
            joint.table.axes()
        )));
    }
    let pmf = joint.table.marginal_axis(m - 1);
    let deficit = 1.0 - joint.table.total_mass();
    Ok(NumberDistribution::from_truncated_pmf(
        pmf,
        deficit.max(0.0) + joint.table.pruned_mass(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::mirrored_pair;
    use crate::number_stats::{make_distribution, moments};
    use std::f64::consts::PI;

    fn poisson_sources(mean: f64) -> (NumberDistribution, NumberDistribution) {
        let d = make_distribution(SourceFamily::Poisson { mean }, 1e-12).unwrap();
        (d.clone(), d)
    }

    #[test]
    fn network_and_quadrature_agree_for_poisson_inputs() {
        let array = mirrored_pair(0.6, 0.95 * PI).unwrap();
        let (a, b) = poisson_sources(2.0);
        let opts = KernelOptions {
            budget: 1_000_000_000,
            ..Default::default()
        };
        let net = mixture_joint(&a, &b, &array, Backend::Network, &opts).unwrap();
        let quad = mixture_joint(&a, &b, &array, Backend::CoherentQuadrature, &opts).unwrap();
        assert!(net.table.tv_distance(&quad.table) < 1e-7);
    }

    #[test]
    fn auto_picks_quadrature_for_classical_pairs() {
        let array = mirrored_pair(0.6, 0.95 * PI).unwrap();
        let (a, b) = poisson_sources(1.5);
        let joint = mixture_joint(&a, &b, &array, Backend::Auto, &Default::default()).unwrap();
        assert_eq!(joint.table.backend(), BackendTag::CoherentQuadrature);
        let fock = make_distribution(SourceFamily::Fock { n: 3 }, 1e-12).unwrap();
        let joint2 = mixture_joint(&a, &fock, &array, Backend::Auto, &Default::default()).unwrap();
        assert_eq!(joint2.table.backend(), BackendTag::Network);
    }

    #[test]
    fn quadrature_rejects_nonclassical_sources() {
        let array = mirrored_pair(0.6, 0.95 * PI).unwrap();
        let fock = make_distribution(SourceFamily::Fock { n: 2 }, 1e-12).unwrap();
        let err = mixture_joint(
            &fock,
            &fock,
            &array,
            Backend::CoherentQuadrature,
            &Default::default(),
        );
        assert!(matches!(err, Err(KernelError::Backend(_))));
    }

    #[test]
    fn marginal_mean_matches_flux_prediction() {
        let array = mirrored_pair(0.6, 0.95 * PI).unwrap();
        let (a, b) = poisson_sources(2.5);
        let joint = mixture_joint(&a, &b, &array, Backend::Auto, &Default::default()).unwrap();
        for m in 1..=2 {
            let marg = marginal(&joint, m).unwrap();
            let d = &array.detectors()[m - 1];
            let expected = crate::detector::mean_count(d, 2.5, 2.5);
            assert!((moments(&marg).mean - expected).abs() < 1e-6 * expected);
        }
    }

    #[test]
    fn pair_pruning_mass_is_accounted() {
        let array = mirrored_pair(0.6, 0.95 * PI).unwrap();
        let (a, b) = poisson_sources(1.0);
        let opts = KernelOptions {
            pair_mass_tolerance: 1e-4,
            ..Default::default()
        };
        let joint = mixture_joint(&a, &b, &array, Backend::Network, &opts).unwrap();
        let lost = 1.0 - joint.table.total_mass();
        assert!(joint.table.pruned_mass() > 0.0);
        assert!(lost <= joint.table.pruned_mass() + 1e-9 + 2.0 * 1e-12);
    }

    #[test]
    fn budget_failure_happens_before_compute() {
        let array = mirrored_pair(0.6, 0.95 * PI).unwrap();
        let fock = make_distribution(SourceFamily::Fock { n: 60 }, 1e-12).unwrap();
        let opts = KernelOptions {
            budget: 100,
            ..Default::default()
        };
        let err = mixture_joint(&fock, &fock, &array, Backend::Network, &opts);
        assert!(matches!(err, Err(KernelError::BudgetExceeded { .. })));
    }
}
