//! Randomized invariants. Everything here holds exactly in principle; the
//! tolerances only cover floating-point accumulation.

use std::f64::consts::PI;

use bosecount::analysis::conditional;
use bosecount::detector::{validate_array, DetectorArray, DetectorMatrix};
use bosecount::kernel::{mixture_joint, Backend, KernelOptions};
use bosecount::number_stats::{
    binomial_thinning, effective_moments, make_distribution, moments, NumberDistribution,
    SourceFamily,
};
use bosecount::scaling_invariance_check;
use num_complex::Complex64;
use proptest::prelude::*;

fn pmf_strategy(max_len: usize) -> impl Strategy<Value = NumberDistribution> {
    prop::collection::vec(0.0f64..1.0, 1..=max_len)
        .prop_filter("needs mass", |v| v.iter().sum::<f64>() > 1e-3)
        .prop_map(|mut v| {
            let total: f64 = v.iter().sum();
            for p in &mut v {
                *p /= total;
            }
            NumberDistribution::from_custom_pmf(&v).unwrap()
        })
}

/// Two random detectors rescaled so the summed flux matrix has top
/// eigenvalue `lambda_max` (strictly sub-unity array).
fn pair_strategy(lambda_max: f64) -> impl Strategy<Value = DetectorArray> {
    let entry = (0.05f64..0.6, 0.05f64..0.6, 0.0f64..1.0, 0.0f64..2.0 * PI);
    (entry.clone(), entry).prop_map(move |(e1, e2)| {
        let mats: Vec<DetectorMatrix> = [e1, e2]
            .iter()
            .enumerate()
            .map(|(m, &(r_aa, r_bb, rho, theta))| {
                DetectorMatrix::new(
                    r_aa,
                    r_bb,
                    Complex64::from_polar(rho * (r_aa * r_bb).sqrt(), theta),
                    format!("d{}", m + 1),
                )
            })
            .collect();
        let p: f64 = mats.iter().map(|d| d.r_aa).sum();
        let r: f64 = mats.iter().map(|d| d.r_bb).sum();
        let c: Complex64 = mats.iter().map(|d| d.r_ab).sum();
        let top = (p + r) / 2.0 + (((p - r) / 2.0).powi(2) + c.norm_sqr()).sqrt();
        let s = lambda_max / top;
        validate_array(
            mats.iter()
                .map(|d| DetectorMatrix::new(d.r_aa * s, d.r_bb * s, d.r_ab * s, d.label.clone()))
                .collect(),
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn thinning_composes_multiplicatively(
        dist in pmf_strategy(25),
        q1 in 0.1f64..1.0,
        q2 in 0.1f64..1.0,
    ) {
        let two_step = binomial_thinning(&binomial_thinning(&dist, q2).unwrap(), q1).unwrap();
        let one_step = binomial_thinning(&dist, q1 * q2).unwrap();
        for (n, p) in one_step.support() {
            prop_assert!((p - two_step.prob(n)).abs() <= 1e-10, "n={n}");
        }
    }

    #[test]
    fn thinned_moments_match_closed_form(
        dist in pmf_strategy(25),
        q in 0.05f64..1.0,
    ) {
        let m = moments(&dist);
        let t = moments(&binomial_thinning(&dist, q).unwrap());
        let (em, ev) = effective_moments(m.mean, m.variance, q).unwrap();
        prop_assert!((t.mean - em).abs() <= 1e-9 * (1.0 + em));
        prop_assert!((t.variance - ev).abs() <= 1e-9 * (1.0 + ev));
        // the variance excess scales by q^2 exactly, so the side of the
        // Poisson boundary never changes
        prop_assert!(
            ((t.variance - t.mean) - q * q * (m.variance - m.mean)).abs()
                <= 1e-9 * (1.0 + m.variance)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn detector_rescaling_equals_thinning(
        a in pmf_strategy(8),
        b in pmf_strategy(8),
        array in pair_strategy(0.22),
        q in prop::sample::select(vec![0.3f64, 0.5, 0.9]),
    ) {
        let tv = scaling_invariance_check(
            &a, &b, &array, q, 2, Backend::Network, &KernelOptions::default(),
        ).unwrap();
        prop_assert!(tv <= 1e-8, "tv = {tv:.3e}");
    }

    #[test]
    fn joint_table_ignores_global_detector_phase(
        a in pmf_strategy(6),
        b in pmf_strategy(6),
        array in pair_strategy(0.7),
        phi in 0.0f64..2.0 * PI,
    ) {
        // rotating every off-diagonal entry by a common phase is a U(1)
        // rotation of one source mode; phase-diagonal sources cannot see it
        let rotated = validate_array(
            array
                .detectors()
                .iter()
                .map(|d| DetectorMatrix::new(
                    d.r_aa,
                    d.r_bb,
                    d.r_ab * Complex64::from_polar(1.0, phi),
                    d.label.clone(),
                ))
                .collect(),
        ).unwrap();
        let opts = KernelOptions::default();
        let t1 = mixture_joint(&a, &b, &array, Backend::Network, &opts).unwrap();
        let t2 = mixture_joint(&a, &b, &rotated, Backend::Network, &opts).unwrap();
        prop_assert!(t1.table.max_abs_diff(&t2.table) <= 1e-12);
    }

    #[test]
    fn conditional_is_proportional_to_joint_slice(
        a in pmf_strategy(6),
        b in pmf_strategy(6),
        array in pair_strategy(0.7),
    ) {
        let joint = mixture_joint(&a, &b, &array, Backend::Network, &KernelOptions::default())
            .unwrap();
        let n1 = joint
            .table
            .iter()
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .map(|(counts, _)| counts[0])
            .unwrap();
        let cond = conditional(&joint, 1, n1).unwrap();
        let evidence: f64 = joint
            .table
            .iter()
            .filter(|(c, _)| c[0] == n1)
            .map(|(_, p)| p)
            .sum();
        for (n2, p) in cond.support() {
            let raw = joint.table.get(&[n1, n2 as u32]);
            prop_assert!((p * evidence - raw).abs() <= 1e-12 * (1.0 + raw));
        }
    }
}

#[test]
fn classical_sources_keep_their_family_under_thinning() {
    // Poisson stays Poisson, thermal stays thermal with scaled mean
    for q in [0.25, 0.6] {
        let p = make_distribution(SourceFamily::Poisson { mean: 6.0 }, 1e-12).unwrap();
        let thinned = binomial_thinning(&p, q).unwrap();
        let reference = make_distribution(SourceFamily::Poisson { mean: 6.0 * q }, 1e-12).unwrap();
        for (n, pr) in reference.support() {
            assert!((pr - thinned.prob(n)).abs() < 1e-10);
        }
        let t = make_distribution(SourceFamily::Thermal { nbar: 4.0 }, 1e-12).unwrap();
        let thinned = binomial_thinning(&t, q).unwrap();
        let reference = make_distribution(SourceFamily::Thermal { nbar: 4.0 * q }, 1e-12).unwrap();
        for (n, pr) in reference.support() {
            assert!((pr - thinned.prob(n)).abs() < 1e-10);
        }
    }
}
