//! Small-scale counting probabilities by direct normal-ordered moment
//! expansion: each e^{-I_m} is expanded as an alternating series, mode
//! operators are treated as commuting symbols inside normal ordering, and
//! falling factorials terminate the series exactly at N_a + N_b total
//! powers. Independent of the network kernel; used as its oracle.

use super::table::{pack_key, BackendTag, CountTable};
use super::KernelError;
use crate::detector::DetectorArray;
use crate::numeric::KahanSum;
use num_complex::Complex64;
use std::collections::BTreeMap;

pub const ORACLE_MAX_TOTAL: usize = 40;
/// Alternating-series cancellation leaves noise well above the network
/// kernel's roundoff floor; clamp accordingly.
const ORACLE_CLAMP_FLOOR: f64 = -1e-10;

/// Normal-ordered power moments <: I_1^{p_1} ... I_M^{p_M} :> for every
/// exponent vector with total <= n_tot, on the Fock pair |N_a, N_b>.
fn power_moments(
    n_a: usize,
    n_b: usize,
    array: &DetectorArray,
) -> BTreeMap<Vec<u8>, f64> {
    let n_tot = n_a + n_b;
    // falling factorials ff(n, k) = n!/(n-k)!, zero beyond k = n
    let ff = |n: usize, k: usize| -> f64 {
        if k > n {
            return 0.0;
        }
        ((n - k + 1)..=n).map(|x| x as f64).product()
    };
    // state: (p_prefix, sum aa, sum bb, sum ab, sum ba) -> coefficient
    type State = (Vec<u8>, u8, u8, u8, u8);
    let mut states: BTreeMap<State, Complex64> = BTreeMap::new();
    states.insert((Vec::new(), 0, 0, 0, 0), Complex64::new(1.0, 0.0));
    let mut fact = vec![1.0f64; n_tot + 1];
    for i in 1..=n_tot {
        fact[i] = fact[i - 1] * i as f64;
    }
    for d in array.detectors() {
        let raa = Complex64::new(d.r_aa, 0.0);
        let rbb = Complex64::new(d.r_bb, 0.0);
        let rab = d.r_ab;
        let rba = d.r_ab.conj();
        let mut next: BTreeMap<State, Complex64> = BTreeMap::new();
        for ((prefix, a, b, ab, ba), coeff) in &states {
            let used = *a as usize + *b as usize + *ab as usize + *ba as usize;
            for p in 0..=(n_tot - used) {
                // split p into the four bilinear terms of the flux operator
                for aa_k in 0..=p {
                    for bb_k in 0..=(p - aa_k) {
                        for ab_k in 0..=(p - aa_k - bb_k) {
                            let ba_k = p - aa_k - bb_k - ab_k;
                            let multi = fact[p]
                                / (fact[aa_k] * fact[bb_k] * fact[ab_k] * fact[ba_k]);
                            let term = coeff
                                * multi
                                * raa.powu(aa_k as u32)
                                * rbb.powu(bb_k as u32)
                                * rab.powu(ab_k as u32)
                                * rba.powu(ba_k as u32);
                            if term == Complex64::new(0.0, 0.0) {
                                continue;
                            }
                            let mut prefix2 = prefix.clone();
                            prefix2.push(p as u8);
                            let key = (
                                prefix2,
                                a + aa_k as u8,
                                b + bb_k as u8,
                                ab + ab_k as u8,
                                ba + ba_k as u8,
                            );
                            *next.entry(key).or_insert(Complex64::new(0.0, 0.0)) += term;
                        }
                    }
                }
            }
        }
        states = next;
    }
    // keep only balanced monomials (equal a†/a and b†/b powers) and evaluate
    // the falling-factorial expectation values
    let mut moments: BTreeMap<Vec<u8>, f64> = BTreeMap::new();
    for ((prefix, a, b, ab, ba), coeff) in states {
        if ab != ba {
            continue;
        }
        let k_a = a as usize + ab as usize;
        let k_b = b as usize + ab as usize;
        let value = coeff.re * ff(n_a, k_a) * ff(n_b, k_b);
        if value != 0.0 {
            *moments.entry(prefix).or_insert(0.0) += value;
        }
    }
    moments
}

pub fn moment_oracle(
    n_a: usize,
    n_b: usize,
    array: &DetectorArray,
    n_cap: usize,
) -> Result<CountTable, KernelError> {
    let n_tot = n_a + n_b;
    if n_tot > ORACLE_MAX_TOTAL {
        return Err(KernelError::OracleScale {
            n_tot,
            max: ORACLE_MAX_TOTAL,
        });
    }
    if n_cap < n_tot {
        return Err(KernelError::OracleScale { n_tot, max: n_cap });
    }
    let m_count = array.len();
    // direct expansion work grows like C(n_tot + 4M, 4M)
    let ln_work = crate::kernel::fock::ln_config_count(n_tot, 4 * m_count + 1);
    if ln_work > (5e8f64).ln() {
        return Err(KernelError::OracleScale { n_tot, max: ORACLE_MAX_TOTAL });
    }
    let moments = power_moments(n_a, n_b, array);
    let mut fact = vec![1.0f64; n_tot + 1];
    for i in 1..=n_tot {
        fact[i] = fact[i - 1] * i as f64;
    }
    // P(n) = sum_k prod_m [(-1)^{k_m} / (n_m! k_m!)] <: prod I_m^{n_m + k_m} :>
    let mut pairs = Vec::new();
    let mut n_vec = vec![0u8; m_count];
    enumerate_counts(&mut n_vec, 0, n_tot, &mut |n: &[u8]| {
        let mut sum = KahanSum::new();
        let mut k_vec = vec![0u8; m_count];
        let n_used: usize = n.iter().map(|&x| x as usize).sum();
        enumerate_counts(&mut k_vec, 0, n_tot - n_used, &mut |k: &[u8]| {
            let p_vec: Vec<u8> = n.iter().zip(k).map(|(&a, &b)| a + b).collect();
            if let Some(&t) = moments.get(&p_vec) {
                let mut coeff = 1.0f64;
                for m in 0..m_count {
                    coeff /= fact[n[m] as usize] * fact[k[m] as usize];
                    if k[m] % 2 == 1 {
                        coeff = -coeff;
                    }
                }
                sum.add(coeff * t);
            }
        });
        let p = sum.value();
        if p != 0.0 {
            let counts: Vec<u32> = n.iter().map(|&x| x as u32).collect();
            pairs.push((pack_key(&counts).expect("small counts"), p));
        }
    });
    Ok(CountTable::from_pairs(
        m_count,
        pairs,
        BackendTag::MomentOracle,
        format!("fock({n_a})xfock({n_b})"),
        ORACLE_CLAMP_FLOOR,
    )?)
}

/// Visit every vector whose entries sum to at most `budget`.
fn enumerate_counts(vec: &mut Vec<u8>, idx: usize, budget: usize, f: &mut impl FnMut(&[u8])) {
    if idx == vec.len() {
        f(vec);
        return;
    }
    for v in 0..=budget {
        vec[idx] = v as u8;
        enumerate_counts(vec, idx + 1, budget - v, f);
    }
    vec[idx] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{homodyne_pair, mirrored_pair, validate_array, DetectorMatrix};
    use std::f64::consts::PI;

    #[test]
    fn single_particle_split() {
        let arr = validate_array(vec![
            DetectorMatrix::new(0.5, 0.0, num_complex::Complex64::new(0.0, 0.0), "d1"),
            DetectorMatrix::new(0.5, 1.0, num_complex::Complex64::new(0.0, 0.0), "d2"),
        ])
        .unwrap();
        let t = moment_oracle(1, 0, &arr, 10).unwrap();
        assert!((t.get(&[1, 0]) - 0.5).abs() < 1e-12);
        assert!((t.get(&[0, 1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hom_null_by_expansion() {
        let t = moment_oracle(1, 1, &homodyne_pair(), 10).unwrap();
        assert!(t.get(&[1, 1]).abs() < 1e-12);
        assert!((t.get(&[2, 0]) - 0.5).abs() < 1e-12);
        assert!((t.total_mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn matches_network_kernel_small_scale() {
        let arr = mirrored_pair(0.6, 0.95 * PI).unwrap();
        let net = crate::detector::build_dilation(&arr).unwrap();
        let a = moment_oracle(3, 2, &arr, 10).unwrap();
        let b = crate::kernel::fock::fock_joint(3, 2, &net, 10_000_000).unwrap();
        assert!(
            a.max_abs_diff(&b) < 1e-9,
            "max diff {}",
            a.max_abs_diff(&b)
        );
    }

    #[test]
    fn scale_guard() {
        let arr = homodyne_pair();
        assert!(matches!(
            moment_oracle(30, 30, &arr, 100),
            Err(KernelError::OracleScale { .. })
        ));
    }
}
