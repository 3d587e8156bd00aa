//! Particle-number statistics of the sources: construction of the standard
//! pmf families, moments, sub/super-Poissonian classification, and the
//! binomial-thinning transformation that renormalizes detector rescaling
//! into the source statistics.

use crate::numeric::{KahanSum, LnFactorials};
use thiserror::Error;

pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-10;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NumberStatsError {
    #[error("parameter out of range: {0}")]
    InvalidParameter(String),
    #[error("custom pmf has negative entries")]
    NegativePmf,
    #[error("custom pmf has zero total mass")]
    ZeroMass,
}

/// Source family with its parameters. `mean` is always the mean of the
/// resulting distribution except for `PhotonAddedThermal`, where `nbar`
/// is the underlying thermal occupation (the state mean is 2*nbar + 1).
#[derive(Debug, Clone, PartialEq)]
pub enum SourceFamily {
    Fock { n: usize },
    Poisson { mean: f64 },
    Thermal { nbar: f64 },
    GammaP { mean: f64, q_param: f64 },
    PhotonAddedThermal { nbar: f64 },
    Binomial { n: usize, q: f64 },
    Custom,
}

impl SourceFamily {
    pub fn tag(&self) -> String {
        match self {
            SourceFamily::Fock { n } => format!("fock({n})"),
            SourceFamily::Poisson { mean } => format!("poisson({mean})"),
            SourceFamily::Thermal { nbar } => format!("thermal({nbar})"),
            SourceFamily::GammaP { mean, q_param } => format!("gamma_p({mean},{q_param})"),
            SourceFamily::PhotonAddedThermal { nbar } => {
                format!("photon_added_thermal({nbar})")
            }
            SourceFamily::Binomial { n, q } => format!("binomial({n},{q})"),
            SourceFamily::Custom => "custom".to_string(),
        }
    }

    /// True for the families with a classical (nonnegative) P-representation
    /// of the U(1)-invariant form, which the quadrature backend can handle.
    pub fn is_classical(&self) -> bool {
        matches!(
            self,
            SourceFamily::Poisson { .. } | SourceFamily::Thermal { .. } | SourceFamily::GammaP { .. }
        )
    }
}

/// A finite, normalized pmf over particle number, stored densely from N = 0.
#[derive(Debug, Clone)]
pub struct NumberDistribution {
    pmf: Vec<f64>,
    family: SourceFamily,
    family_tag: String,
    truncation_mass: f64,
}

impl NumberDistribution {
    fn new(pmf: Vec<f64>, family: SourceFamily, truncation_mass: f64) -> Self {
        let family_tag = family.tag();
        let mut d = Self {
            pmf,
            family,
            family_tag,
            truncation_mass,
        };
        d.trim();
        debug_assert!(d.check_invariants().is_ok(), "{:?}", d.check_invariants());
        d
    }

    fn trim(&mut self) {
        while self.pmf.len() > 1 && *self.pmf.last().unwrap() == 0.0 {
            self.pmf.pop();
        }
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    #[inline]
    pub fn prob(&self, n: usize) -> f64 {
        self.pmf.get(n).copied().unwrap_or(0.0)
    }

    /// Largest N with nonzero probability.
    pub fn max_n(&self) -> usize {
        self.pmf.len() - 1
    }

    pub fn family(&self) -> &SourceFamily {
        &self.family
    }

    pub fn family_tag(&self) -> &str {
        &self.family_tag
    }

    pub fn truncation_mass(&self) -> f64 {
        self.truncation_mass
    }

    pub fn total_mass(&self) -> f64 {
        let mut s = KahanSum::new();
        for &p in &self.pmf {
            s.add(p);
        }
        s.value()
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pmf
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, p)| p > 0.0)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.pmf.is_empty() {
            return Err("empty support".into());
        }
        if self.pmf.iter().any(|&p| !(p >= 0.0)) {
            return Err("negative or NaN probability".into());
        }
        let total = self.total_mass();
        if !(total <= 1.0 + NORM_EPS && total >= 1.0 - self.truncation_mass - NORM_EPS) {
            return Err(format!(
                "total mass {total} outside [1 - {} - eps, 1]",
                self.truncation_mass
            ));
        }
        Ok(())
    }

    /// Drop a trailing tail of at most `tol` extra mass, folding it into
    /// `truncation_mass`. Keeps kernels cheap for thinned distributions
    /// whose upper support carries negligible probability.
    pub fn retruncate(&self, tol: f64) -> NumberDistribution {
        let mut tail = 0.0;
        let mut cut = self.pmf.len();
        for (i, &p) in self.pmf.iter().enumerate().rev() {
            if tail + p > tol || i == 0 {
                break;
            }
            tail += p;
            cut = i;
        }
        let mut d = self.clone();
        d.pmf.truncate(cut.max(1));
        d.truncation_mass += tail;
        d.trim();
        d
    }

    pub fn from_custom_pmf(pmf: &[f64]) -> Result<NumberDistribution, NumberStatsError> {
        if pmf.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(NumberStatsError::NegativePmf);
        }
        let total: f64 = pmf.iter().sum();
        if total <= 0.0 {
            return Err(NumberStatsError::ZeroMass);
        }
        let pmf = pmf.iter().map(|&p| p / total).collect();
        Ok(NumberDistribution::new(pmf, SourceFamily::Custom, 0.0))
    }

    /// Wrap a pmf that is already on the probability scale but may be short
    /// of full mass (e.g. the marginal of a truncated joint table). No
    /// rescaling is applied; the deficit is recorded as truncation mass.
    pub fn from_truncated_pmf(
        pmf: Vec<f64>,
        truncation_mass: f64,
    ) -> Result<NumberDistribution, NumberStatsError> {
        if pmf.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(NumberStatsError::NegativePmf);
        }
        if pmf.iter().all(|&p| p == 0.0) {
            return Err(NumberStatsError::ZeroMass);
        }
        Ok(NumberDistribution::new(
            pmf,
            SourceFamily::Custom,
            truncation_mass.max(0.0),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSummary {
    pub mean: f64,
    pub variance: f64,
    /// V / N̄ (Fano factor); NaN when mean = 0.
    pub fano: f64,
    /// Q = (V − N̄)/N̄²; NaN when mean = 0.
    pub mandel_q_param: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatClass {
    SubPoissonian,
    Poissonian,
    SuperPoissonian,
}

pub fn make_distribution(
    family: SourceFamily,
    tail_tolerance: f64,
) -> Result<NumberDistribution, NumberStatsError> {
    if !(tail_tolerance > 0.0 && tail_tolerance < 1.0) {
        return Err(NumberStatsError::InvalidParameter(format!(
            "tail_tolerance {tail_tolerance}"
        )));
    }
    match family {
        SourceFamily::Fock { n } => {
            let mut pmf = vec![0.0; n + 1];
            pmf[n] = 1.0;
            Ok(NumberDistribution::new(pmf, family, 0.0))
        }
        SourceFamily::Poisson { mean } => {
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(NumberStatsError::InvalidParameter(format!("mean {mean}")));
            }
            // p(0) = e^{-mean}; ratio p(N+1)/p(N) = mean/(N+1)
            let pmf = truncated_by_ratio((-mean).exp(), mean, tail_tolerance, |n| {
                mean / (n as f64 + 1.0)
            });
            let trunc = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
            Ok(NumberDistribution::new(pmf, family, trunc))
        }
        SourceFamily::Thermal { nbar } => {
            if !(nbar > 0.0 && nbar.is_finite()) {
                return Err(NumberStatsError::InvalidParameter(format!("nbar {nbar}")));
            }
            let x = nbar / (1.0 + nbar);
            let pmf = truncated_by_ratio(1.0 / (1.0 + nbar), nbar, tail_tolerance, |_| x);
            let trunc = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
            Ok(NumberDistribution::new(pmf, family, trunc))
        }
        SourceFamily::GammaP { mean, q_param } => {
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(NumberStatsError::InvalidParameter(format!("mean {mean}")));
            }
            if !(q_param > 0.0 && q_param.is_finite()) {
                return Err(NumberStatsError::InvalidParameter(format!("Q {q_param}")));
            }
            // Poisson mixed over a Gamma(shape 1/Q, scale Q*mean) intensity:
            // a negative-binomial-shaped pmf with
            //   p(N+1)/p(N) = (N + 1/Q)/(N + 1) * theta/(1 + theta).
            let shape = 1.0 / q_param;
            let theta = q_param * mean;
            let r = theta / (1.0 + theta);
            let p0 = (-shape * (1.0 + theta).ln()).exp();
            let pmf =
                truncated_by_ratio(p0, mean, tail_tolerance, |n| (n as f64 + shape) * r / (n as f64 + 1.0));
            let trunc = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
            Ok(NumberDistribution::new(pmf, family, trunc))
        }
        SourceFamily::PhotonAddedThermal { nbar } => {
            if !(nbar > 0.0 && nbar.is_finite()) {
                return Err(NumberStatsError::InvalidParameter(format!("nbar {nbar}")));
            }
            // Fock-diagonal pmf of a† rho_th a, normalized:
            //   p(N) = N x^{N-1} (1-x)^2 with x = nbar/(1+nbar); p(0) = 0.
            let x = nbar / (1.0 + nbar);
            let scale = (1.0 - x) * (1.0 - x);
            let mean = 2.0 * nbar + 1.0;
            let mut pmf = vec![0.0];
            let mut cum = 0.0;
            let mut n = 1usize;
            loop {
                let p = scale * n as f64 * x.powi(n as i32 - 1);
                pmf.push(p);
                cum += p;
                if 1.0 - cum < tail_tolerance && (n as f64) > mean {
                    break;
                }
                n += 1;
                if n > 20_000_000 {
                    break;
                }
            }
            let trunc = (1.0 - cum).max(0.0);
            Ok(NumberDistribution::new(pmf, family, trunc))
        }
        SourceFamily::Binomial { n, q } => {
            if !(0.0..=1.0).contains(&q) {
                return Err(NumberStatsError::InvalidParameter(format!("q {q}")));
            }
            let lf = LnFactorials::up_to(n);
            let pmf = binomial_pmf(n, q, &lf);
            Ok(NumberDistribution::new(pmf, family, 0.0))
        }
        SourceFamily::Custom => Err(NumberStatsError::InvalidParameter(
            "use from_custom_pmf for custom sources".into(),
        )),
    }
}

fn truncated_by_ratio(
    p0: f64,
    mean: f64,
    tail_tolerance: f64,
    ratio: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let mut pmf = vec![p0];
    let mut cum = p0;
    let mut p = p0;
    let mut n = 0usize;
    while !(1.0 - cum < tail_tolerance && (n as f64) > mean) {
        p *= ratio(n);
        n += 1;
        pmf.push(p);
        cum += p;
        if n > 20_000_000 {
            break;
        }
    }
    pmf
}

/// Binomial(n, q) pmf; log-space coefficients above n = 30.
fn binomial_pmf(n: usize, q: f64, lf: &LnFactorials) -> Vec<f64> {
    if q == 1.0 {
        let mut pmf = vec![0.0; n + 1];
        pmf[n] = 1.0;
        return pmf;
    }
    if q == 0.0 {
        let mut pmf = vec![0.0; n + 1];
        pmf[0] = 1.0;
        return pmf;
    }
    let mut pmf = Vec::with_capacity(n + 1);
    if n > 30 {
        let (lq, l1q) = (q.ln(), (1.0 - q).ln());
        for k in 0..=n {
            pmf.push((lf.ln_choose(n, k) + k as f64 * lq + (n - k) as f64 * l1q).exp());
        }
    } else {
        let mut c = 1.0f64;
        for k in 0..=n {
            pmf.push(c * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32));
            if k < n {
                c = c * (n - k) as f64 / (k as f64 + 1.0);
            }
        }
    }
    pmf
}

pub fn moments(dist: &NumberDistribution) -> MomentSummary {
    let total = dist.total_mass();
    let mut m1 = KahanSum::new();
    let mut m2 = KahanSum::new();
    for (n, p) in dist.support() {
        m1.add(n as f64 * p);
        m2.add((n as f64) * (n as f64) * p);
    }
    // normalize by the retained mass so truncation does not bias the mean
    let mean = m1.value() / total;
    let variance = (m2.value() / total - mean * mean).max(0.0);
    MomentSummary {
        mean,
        variance,
        fano: if mean > 0.0 { variance / mean } else { f64::NAN },
        mandel_q_param: if mean > 0.0 {
            (variance - mean) / (mean * mean)
        } else {
            f64::NAN
        },
    }
}

pub fn classify(dist: &NumberDistribution, tolerance: f64) -> StatClass {
    let m = moments(dist);
    classify_moments(m.mean, m.variance, tolerance)
}

pub fn classify_moments(mean: f64, variance: f64, tolerance: f64) -> StatClass {
    if variance < mean - tolerance * mean {
        StatClass::SubPoissonian
    } else if (variance - mean).abs() <= tolerance * mean {
        StatClass::Poissonian
    } else {
        StatClass::SuperPoissonian
    }
}

/// p̃(N) = Σ_{N' ≥ N} p(N') B^{N'}_N(q): every particle independently
/// survives with probability q.
pub fn binomial_thinning(
    dist: &NumberDistribution,
    q: f64,
) -> Result<NumberDistribution, NumberStatsError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(NumberStatsError::InvalidParameter(format!("q {q}")));
    }
    if q == 1.0 {
        return Ok(dist.clone());
    }
    let max_n = dist.max_n();
    let lf = LnFactorials::up_to(max_n);
    let mut out = vec![KahanSum::new(); max_n + 1];
    for (n_src, p) in dist.support() {
        let b = binomial_pmf(n_src, q, &lf);
        for (k, &bk) in b.iter().enumerate() {
            out[k].add(p * bk);
        }
    }
    let pmf: Vec<f64> = out.into_iter().map(|s| s.value()).collect();
    Ok(NumberDistribution::new(
        pmf,
        SourceFamily::Custom,
        dist.truncation_mass(),
    ))
}

/// Effective moments under thinning: (qN̄, q²V + (1−q)qN̄).
pub fn effective_moments(
    mean: f64,
    variance: f64,
    q: f64,
) -> Result<(f64, f64), NumberStatsError> {
    if !(mean >= 0.0 && variance >= 0.0 && q > 0.0 && q <= 1.0) {
        return Err(NumberStatsError::InvalidParameter(format!(
            "mean {mean}, variance {variance}, q {q}"
        )));
    }
    Ok((q * mean, q * q * variance + (1.0 - q) * q * mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make(f: SourceFamily) -> NumberDistribution {
        make_distribution(f, DEFAULT_TAIL_TOLERANCE).unwrap()
    }

    #[test]
    fn fock_is_a_point_mass() {
        let d = make(SourceFamily::Fock { n: 100 });
        assert_eq!(d.prob(100), 1.0);
        let m = moments(&d);
        assert_eq!(m.mean, 100.0);
        assert_eq!(m.variance, 0.0);
    }

    #[test]
    fn gamma_p_q1_equals_thermal() {
        let d = make(SourceFamily::GammaP {
            mean: 12.0,
            q_param: 1.0,
        });
        let t = make(SourceFamily::Thermal { nbar: 12.0 });
        let len = d.max_n().max(t.max_n());
        for n in 0..=len {
            assert!(
                (d.prob(n) - t.prob(n)).abs() < 1e-12,
                "n={n}: {} vs {}",
                d.prob(n),
                t.prob(n)
            );
        }
    }

    #[test]
    fn gamma_p_small_q_approaches_poisson() {
        let d = make(SourceFamily::GammaP {
            mean: 20.0,
            q_param: 1e-6,
        });
        let p = make(SourceFamily::Poisson { mean: 20.0 });
        let mut tv = 0.0;
        for n in 0..=d.max_n().max(p.max_n()) {
            tv += 0.5 * (d.prob(n) - p.prob(n)).abs();
        }
        assert!(tv < 1e-4, "tv {tv}");
    }

    #[test]
    fn photon_added_thermal_pmf() {
        let d = make(SourceFamily::PhotonAddedThermal { nbar: 2.0 });
        assert_eq!(d.prob(0), 0.0);
        assert!((d.total_mass() - 1.0).abs() < 1e-9);
        // mean 2*nbar + 1
        assert!((moments(&d).mean - 5.0).abs() < 1e-7);
        // brute-force Fock-basis construction of a† rho_th a at small nbar
        for &nbar in &[0.5, 1.0, 5.0] {
            let x: f64 = nbar / (1.0 + nbar);
            let cap = 800;
            let mut brute: Vec<f64> = (0..=cap)
                .map(|n| {
                    if n == 0 {
                        0.0
                    } else {
                        // <N| a† rho_th a |N> = N * rho_th(N-1)
                        n as f64 * x.powi(n as i32 - 1) / (1.0 + nbar)
                    }
                })
                .collect();
            let norm: f64 = brute.iter().sum();
            brute.iter_mut().for_each(|p| *p /= norm);
            let d = make(SourceFamily::PhotonAddedThermal { nbar });
            for n in 0..=d.max_n() {
                assert!((d.prob(n) - brute[n]).abs() < 1e-9, "nbar {nbar}, n {n}");
            }
        }
    }

    #[test]
    fn gamma_p_moments() {
        // gamma_p(50, 0.5): mean 50, variance 50 + 0.5 * 50^2 = 1300
        let d = make_distribution(
            SourceFamily::GammaP {
                mean: 50.0,
                q_param: 0.5,
            },
            1e-12,
        )
        .unwrap();
        let m = moments(&d);
        assert!((m.mean - 50.0).abs() / 50.0 < 1e-6);
        assert!((m.variance - 1300.0).abs() / 1300.0 < 1e-4);
        assert!((m.variance - m.mean - 0.5 * m.mean * m.mean).abs() / 1300.0 < 1e-4);
    }

    #[test]
    fn classification() {
        assert_eq!(
            classify(&make(SourceFamily::Poisson { mean: 40.0 }), 1e-6),
            StatClass::Poissonian
        );
        assert_eq!(
            classify(&make(SourceFamily::Fock { n: 10 }), 1e-6),
            StatClass::SubPoissonian
        );
        assert_eq!(
            classify(
                &make(SourceFamily::GammaP {
                    mean: 30.0,
                    q_param: 0.2
                }),
                1e-6
            ),
            StatClass::SuperPoissonian
        );
    }

    #[test]
    fn thinning_fock_gives_binomial() {
        let d = make(SourceFamily::Fock { n: 40 });
        let thinned = binomial_thinning(&d, 0.37).unwrap();
        let b = make(SourceFamily::Binomial { n: 40, q: 0.37 });
        for n in 0..=40 {
            assert!((thinned.prob(n) - b.prob(n)).abs() < 1e-14);
        }
    }

    #[test]
    fn thinning_poisson_stays_poisson() {
        let d = make(SourceFamily::Poisson { mean: 30.0 });
        let thinned = binomial_thinning(&d, 0.4).unwrap();
        let target = make(SourceFamily::Poisson { mean: 12.0 });
        for n in 0..=thinned.max_n() {
            assert!(
                (thinned.prob(n) - target.prob(n)).abs() < 1e-10,
                "n={n}: {} vs {}",
                thinned.prob(n),
                target.prob(n)
            );
        }
    }

    #[test]
    fn thinning_q1_is_identity() {
        let d = make(SourceFamily::Thermal { nbar: 3.0 });
        let thinned = binomial_thinning(&d, 1.0).unwrap();
        for n in 0..=d.max_n() {
            assert_eq!(d.prob(n), thinned.prob(n));
        }
    }

    #[test]
    fn thinning_large_support_no_overflow() {
        // N' ≈ 200 would overflow naive factorials
        let d = make(SourceFamily::Fock { n: 200 });
        let thinned = binomial_thinning(&d, 0.5).unwrap();
        assert!((thinned.total_mass() - 1.0).abs() < 1e-12);
        assert!((moments(&thinned).mean - 100.0).abs() < 1e-9);
    }

    #[test]
    fn effective_moments_examples() {
        assert_eq!(effective_moments(50.0, 50.0, 0.3).unwrap(), (15.0, 15.0));
        let (m, v) = effective_moments(100.0, 0.0, 0.5).unwrap();
        assert_eq!((m, v), (50.0, 25.0));
        // thermal stays thermal: (qn̄, qn̄ + (qn̄)^2)
        let nbar = 7.0;
        let (m, v) = effective_moments(nbar, nbar + nbar * nbar, 0.25).unwrap();
        let qn = 0.25 * nbar;
        assert!((m - qn).abs() < 1e-12);
        assert!((v - (qn + qn * qn)).abs() < 1e-12);
    }

    #[test]
    fn moment_consistency_with_thinning() {
        let d = make(SourceFamily::GammaP {
            mean: 9.0,
            q_param: 0.7,
        });
        let q = 0.42;
        let m0 = moments(&d);
        let (em, ev) = effective_moments(m0.mean, m0.variance, q).unwrap();
        let mt = moments(&binomial_thinning(&d, q).unwrap());
        assert!((mt.mean - em).abs() / em < 1e-9);
        assert!((mt.variance - ev).abs() / ev < 1e-9);
    }

    #[test]
    fn custom_pmf_errors() {
        assert_eq!(
            NumberDistribution::from_custom_pmf(&[0.2, -0.1]).unwrap_err(),
            NumberStatsError::NegativePmf
        );
        assert_eq!(
            NumberDistribution::from_custom_pmf(&[0.0, 0.0]).unwrap_err(),
            NumberStatsError::ZeroMass
        );
    }

    #[test]
    fn retruncate_folds_tail() {
        let d = make(SourceFamily::Thermal { nbar: 2.0 });
        let r = d.retruncate(1e-4);
        assert!(r.max_n() < d.max_n());
        assert!(r.truncation_mass() <= 1e-4 + d.truncation_mass());
        assert!(r.check_invariants().is_ok());
    }
}
