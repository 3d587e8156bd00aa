//! Detector matrices, array validation against the unitarity bound, the
//! detector rescaling transformation, mean and mean-field counts, and the
//! rank-one dilation network consumed by the exact Fock kernel.

use num_complex::Complex64;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const VALIDATION_TOL: f64 = 1e-10;
pub const RECONSTRUCTION_TOL: f64 = 1e-12;
const ROW_EIGENVALUE_CUTOFF: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("detector {label} is not Hermitian PSD: {detail}")]
    NonHermitianOrNegative { label: String, detail: String },
    #[error("array is over-complete: I - sum R has eigenvalue {min_eigenvalue:.3e} < -1e-10")]
    OverComplete { min_eigenvalue: f64 },
    #[error("detector array must be nonempty")]
    EmptyArray,
    #[error("invalid scaling parameters: {0}")]
    InvalidScaling(String),
}

/// 2x2 Hermitian flux matrix of one detector; r_ba is the conjugate of r_ab.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorMatrix {
    pub r_aa: f64,
    pub r_bb: f64,
    pub r_ab: Complex64,
    pub label: String,
}

impl DetectorMatrix {
    pub fn new(r_aa: f64, r_bb: f64, r_ab: Complex64, label: impl Into<String>) -> Self {
        Self {
            r_aa,
            r_bb,
            r_ab,
            label: label.into(),
        }
    }

    /// Rank-one detector with |r_ab| = sqrt(r_aa r_bb) and off-diagonal
    /// phase theta: maximum interference term.
    pub fn rank_one(r_aa: f64, r_bb: f64, theta: f64, label: impl Into<String>) -> Self {
        let m = (r_aa * r_bb).sqrt();
        Self::new(r_aa, r_bb, Complex64::from_polar(m, theta), label)
    }

    pub fn theta(&self) -> f64 {
        self.r_ab.arg()
    }

    pub fn check_psd(&self) -> Result<(), DetectorError> {
        let det = self.r_aa * self.r_bb - self.r_ab.norm_sqr();
        if self.r_aa < -VALIDATION_TOL || self.r_bb < -VALIDATION_TOL || det < -VALIDATION_TOL {
            return Err(DetectorError::NonHermitianOrNegative {
                label: self.label.clone(),
                detail: format!(
                    "r_aa={}, r_bb={}, det={det}",
                    self.r_aa, self.r_bb
                ),
            });
        }
        Ok(())
    }

}

fn hermitian_eigenpairs(a: f64, b: f64, z: Complex64) -> [(f64, [Complex64; 2]); 2] {
    let half_tr = 0.5 * (a + b);
    let half_diff = 0.5 * (a - b);
    let disc = (half_diff * half_diff + z.norm_sqr()).sqrt();
    let lam_hi = half_tr + disc;
    let lam_lo = half_tr - disc;
    let vec_for = |lam: f64| -> [Complex64; 2] {
        // pick the better-conditioned formula branch
        let v1 = [z, Complex64::new(lam - a, 0.0)];
        let v2 = [Complex64::new(lam - b, 0.0), z.conj()];
        let n1 = v1[0].norm_sqr() + v1[1].norm_sqr();
        let n2 = v2[0].norm_sqr() + v2[1].norm_sqr();
        let (v, n) = if n1 >= n2 { (v1, n1) } else { (v2, n2) };
        if n == 0.0 {
            // diagonal degenerate matrix
            return if lam == a {
                [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]
            } else {
                [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]
            };
        }
        let s = n.sqrt();
        [v[0] / s, v[1] / s]
    };
    if (lam_hi - lam_lo).abs() < 1e-300 {
        // exactly proportional to identity
        return [
            (lam_hi, [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]),
            (lam_lo, [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]),
        ];
    }
    let v_hi = vec_for(lam_hi);
    // second eigenvector orthogonal to the first (exact for 2x2)
    let v_lo = [-v_hi[1].conj(), v_hi[0].conj()];
    [(lam_hi, v_hi), (lam_lo, v_lo)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completeness {
    Complete,
    SubUnity,
}

#[derive(Debug, Clone)]
pub struct DetectorArray {
    detectors: Vec<DetectorMatrix>,
    completeness: Completeness,
}

impl DetectorArray {
    pub fn detectors(&self) -> &[DetectorMatrix] {
        &self.detectors
    }

    pub fn len(&self) -> usize {
        self.detectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detectors.is_empty()
    }

    pub fn completeness(&self) -> Completeness {
        self.completeness
    }

    /// Sum of all detector matrices as (aa, bb, ab).
    fn total(&self) -> (f64, f64, Complex64) {
        let mut aa = 0.0;
        let mut bb = 0.0;
        let mut ab = Complex64::new(0.0, 0.0);
        for d in &self.detectors {
            aa += d.r_aa;
            bb += d.r_bb;
            ab += d.r_ab;
        }
        (aa, bb, ab)
    }
}

/// Eigenvalues (min, max) of I - sum R.
fn residual_eigenvalues(detectors: &[DetectorMatrix]) -> (f64, f64) {
    let mut aa = 1.0;
    let mut bb = 1.0;
    let mut ab = Complex64::new(0.0, 0.0);
    for d in detectors {
        aa -= d.r_aa;
        bb -= d.r_bb;
        ab -= d.r_ab;
    }
    let half_tr = 0.5 * (aa + bb);
    let disc = (0.25 * (aa - bb) * (aa - bb) + ab.norm_sqr()).sqrt();
    (half_tr - disc, half_tr + disc)
}

pub fn validate_array(detectors: Vec<DetectorMatrix>) -> Result<DetectorArray, DetectorError> {
    if detectors.is_empty() {
        return Err(DetectorError::EmptyArray);
    }
    for d in &detectors {
        d.check_psd()?;
    }
    let (min_eig, max_eig) = residual_eigenvalues(&detectors);
    if min_eig < -VALIDATION_TOL {
        return Err(DetectorError::OverComplete {
            min_eigenvalue: min_eig,
        });
    }
    let completeness = if min_eig.abs() <= VALIDATION_TOL && max_eig.abs() <= VALIDATION_TOL {
        Completeness::Complete
    } else {
        Completeness::SubUnity
    };
    Ok(DetectorArray {
        detectors,
        completeness,
    })
}

/// R̃^(m) = R^(m)/q for m <= keep; detectors beyond `keep` are dropped.
pub fn scale_array(
    array: &DetectorArray,
    q: f64,
    keep: usize,
) -> Result<DetectorArray, DetectorError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(DetectorError::InvalidScaling(format!("q = {q}")));
    }
    if keep == 0 || keep > array.len() {
        return Err(DetectorError::InvalidScaling(format!(
            "keep = {keep} with {} detectors",
            array.len()
        )));
    }
    let scaled: Vec<DetectorMatrix> = array.detectors[..keep]
        .iter()
        .map(|d| {
            DetectorMatrix::new(d.r_aa / q, d.r_bb / q, d.r_ab / q, d.label.clone())
        })
        .collect();
    validate_array(scaled)
}

/// <n_m> = R_aa N̄_a + R_bb N̄_b for U(1)-invariant sources.
pub fn mean_count(d: &DetectorMatrix, nbar_a: f64, nbar_b: f64) -> f64 {
    d.r_aa * nbar_a + d.r_bb * nbar_b
}

/// Mean-field count with the interference term:
/// <n_m> + 2|R_ab| sqrt(N̄_a N̄_b) cos(delta_ab + theta_m).
pub fn mean_field_count(d: &DetectorMatrix, nbar_a: f64, nbar_b: f64, delta_ab: f64) -> f64 {
    mean_count(d, nbar_a, nbar_b)
        + 2.0 * d.r_ab.norm() * (nbar_a * nbar_b).sqrt() * (delta_ab + d.theta()).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOwner {
    Detector(usize),
    Loss,
}

/// Isometry rows realizing the detector array exactly: one or two rank-one
/// rows per detector plus loss rows completing I - sum R.
#[derive(Debug, Clone)]
pub struct DilatedNetwork {
    rows: Vec<[Complex64; 2]>,
    owners: Vec<RowOwner>,
    num_detectors: usize,
}

impl DilatedNetwork {
    pub fn rows(&self) -> &[[Complex64; 2]] {
        &self.rows
    }

    pub fn owners(&self) -> &[RowOwner] {
        &self.owners
    }

    pub fn num_detectors(&self) -> usize {
        self.num_detectors
    }

    pub fn num_loss_rows(&self) -> usize {
        self.owners.iter().filter(|o| **o == RowOwner::Loss).count()
    }

    /// Stable identity of the network, used as the kernel-cache key.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (row, owner) in self.rows.iter().zip(&self.owners) {
            for c in row {
                h.update(c.re.to_bits().to_le_bytes());
                h.update(c.im.to_bits().to_le_bytes());
            }
            match owner {
                RowOwner::Detector(m) => h.update((*m as u64).to_le_bytes()),
                RowOwner::Loss => h.update(u64::MAX.to_le_bytes()),
            }
        }
        let digest = h.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sum over rows of the conjugate outer product, restricted to rows of
    /// the given owner; equals R^(m) for Detector(m) and I - sum R for Loss.
    pub fn reconstruct(&self, owner: RowOwner) -> [[Complex64; 2]; 2] {
        let mut m = [[Complex64::new(0.0, 0.0); 2]; 2];
        for (row, o) in self.rows.iter().zip(&self.owners) {
            if *o != owner {
                continue;
            }
            for s in 0..2 {
                for t in 0..2 {
                    m[s][t] += row[s].conj() * row[t];
                }
            }
        }
        m
    }

    pub fn check_isometry(&self) -> Result<(), String> {
        let mut m = [[Complex64::new(0.0, 0.0); 2]; 2];
        for row in &self.rows {
            for s in 0..2 {
                for t in 0..2 {
                    m[s][t] += row[s].conj() * row[t];
                }
            }
        }
        for s in 0..2 {
            for t in 0..2 {
                let expect = if s == t { 1.0 } else { 0.0 };
                if (m[s][t] - expect).norm() > RECONSTRUCTION_TOL {
                    return Err(format!("isometry defect at ({s},{t}): {}", m[s][t]));
                }
            }
        }
        Ok(())
    }
}

/// Spectral rank-one rows for one Hermitian PSD 2x2 block.
fn spectral_rows(a: f64, b: f64, z: Complex64, out: &mut Vec<[Complex64; 2]>) {
    for (lam, v) in hermitian_eigenpairs(a, b, z) {
        if lam < ROW_EIGENVALUE_CUTOFF {
            continue;
        }
        let s = lam.sqrt();
        // row entries V_{k,s} = sqrt(lam) * conj(v_s), so that
        // sum_k conj(V_{k,s}) V_{k,s'} = R_{s,s'}
        out.push([v[0].conj() * s, v[1].conj() * s]);
    }
}

pub fn build_dilation(array: &DetectorArray) -> Result<DilatedNetwork, DetectorError> {
    let mut rows = Vec::new();
    let mut owners = Vec::new();
    for (m, d) in array.detectors().iter().enumerate() {
        let before = rows.len();
        spectral_rows(d.r_aa, d.r_bb, d.r_ab, &mut rows);
        for _ in before..rows.len() {
            owners.push(RowOwner::Detector(m));
        }
    }
    // loss completion: spectral factorization of I - sum R
    let (taa, tbb, tab) = array.total();
    let (laa, lbb, lab) = (1.0 - taa, 1.0 - tbb, -tab);
    let (min_eig, _) = residual_eigenvalues(array.detectors());
    if min_eig < -VALIDATION_TOL {
        return Err(DetectorError::OverComplete {
            min_eigenvalue: min_eig,
        });
    }
    let before = rows.len();
    spectral_rows(laa, lbb, lab, &mut rows);
    for _ in before..rows.len() {
        owners.push(RowOwner::Loss);
    }
    let net = DilatedNetwork {
        rows,
        owners,
        num_detectors: array.len(),
    };
    debug_assert!(net.check_isometry().is_ok(), "{:?}", net.check_isometry());
    Ok(net)
}

/// The familiar balanced two-mode homodyne pair: I_{1,2} = (a† ± b†)(a ± b)/2.
pub fn homodyne_pair() -> DetectorArray {
    validate_array(vec![
        DetectorMatrix::new(0.5, 0.5, Complex64::new(0.5, 0.0), "homodyne+"),
        DetectorMatrix::new(0.5, 0.5, Complex64::new(-0.5, 0.0), "homodyne-"),
    ])
    .expect("homodyne pair is complete")
}

/// The two-detector geometry used throughout: r_aa^1 = r_bb^2 = 0.6 R,
/// r_bb^1 = r_aa^2 = 0.4 R, rank-one, theta_1 = 0, theta_2 = theta_diff.
pub fn mirrored_pair(r_total: f64, theta_diff: f64) -> Result<DetectorArray, DetectorError> {
    validate_array(vec![
        DetectorMatrix::rank_one(0.6 * r_total, 0.4 * r_total, 0.0, "d1"),
        DetectorMatrix::rank_one(0.4 * r_total, 0.6 * r_total, theta_diff, "d2"),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn homodyne_pair_is_complete() {
        assert_eq!(homodyne_pair().completeness(), Completeness::Complete);
    }

    #[test]
    fn mirrored_pair_at_high_flux_is_subunity() {
        let arr = mirrored_pair(0.867, 0.9 * PI).unwrap();
        assert_eq!(arr.completeness(), Completeness::SubUnity);
    }

    #[test]
    fn mirrored_pair_overcomplete_below_phase_bound() {
        // 0.9 pi <= theta_2 - theta_1 <= pi is required at R = 0.867
        match mirrored_pair(0.867, 0.5 * PI) {
            Err(DetectorError::OverComplete { .. }) => {}
            other => panic!("expected OverComplete, got {other:?}"),
        }
    }

    #[test]
    fn scale_identity() {
        let arr = mirrored_pair(0.4, PI).unwrap();
        let scaled = scale_array(&arr, 1.0, 2).unwrap();
        assert_eq!(scaled.detectors(), arr.detectors());
    }

    #[test]
    fn scale_restores_full_flux() {
        // R = q * 0.867 scaled by q gives R̃ = 0.867
        let q = 0.5;
        let arr = mirrored_pair(q * 0.867, 0.9 * PI).unwrap();
        let scaled = scale_array(&arr, q, 2).unwrap();
        assert!((scaled.detectors()[0].r_aa - 0.6 * 0.867).abs() < 1e-12);
    }

    #[test]
    fn complete_array_cannot_be_magnified() {
        match scale_array(&homodyne_pair(), 0.5, 2) {
            Err(DetectorError::OverComplete { .. }) => {}
            other => panic!("expected OverComplete, got {other:?}"),
        }
    }

    #[test]
    fn mean_counts() {
        let arr = mirrored_pair(0.867, 0.9 * PI).unwrap();
        let nbar = 100.0 / 0.867;
        assert!((mean_count(&arr.detectors()[0], nbar, nbar) - 100.0).abs() < 1e-9);
        let h = homodyne_pair();
        assert!((mean_count(&h.detectors()[0], 7.0, 7.0) - 7.0).abs() < 1e-12);
        assert_eq!(mean_count(&arr.detectors()[0], 0.0, 0.0), 0.0);
    }

    #[test]
    fn mean_field_count_limits() {
        let d = DetectorMatrix::rank_one(0.3, 0.3, 0.0, "d");
        // cosine zero
        let base = mean_count(&d, 10.0, 10.0);
        assert!((mean_field_count(&d, 10.0, 10.0, PI / 2.0) - base).abs() < 1e-12);
        // perfect destructive interference
        assert!(mean_field_count(&d, 10.0, 10.0, PI).abs() < 1e-12);
    }

    #[test]
    fn fig1_mean_field_predictions() {
        let arr = mirrored_pair(0.867, 0.9 * PI).unwrap();
        let nbar = 100.0 / 0.867;
        // delta for n1 = 118 at detector 1, then prediction at detector 2
        let cosv: f64 = (118.0 - 100.0) / (2.0 * arr.detectors()[0].r_ab.norm() * nbar);
        let delta = cosv.acos(); // one branch; theta_1 = 0
        let n2_plus = mean_field_count(&arr.detectors()[1], nbar, nbar, -delta);
        let n2_minus = mean_field_count(&arr.detectors()[1], nbar, nbar, delta);
        let (lo, hi) = if n2_plus < n2_minus {
            (n2_plus, n2_minus)
        } else {
            (n2_minus, n2_plus)
        };
        assert!((lo - 53.0).abs() < 1.0, "lo {lo}");
        assert!((hi - 113.0).abs() < 1.0, "hi {hi}");
    }

    #[test]
    fn dilation_homodyne_has_no_loss_rows() {
        let net = build_dilation(&homodyne_pair()).unwrap();
        assert_eq!(net.rows().len(), 2);
        assert_eq!(net.num_loss_rows(), 0);
        net.check_isometry().unwrap();
    }

    #[test]
    fn dilation_full_detector_is_rank_two() {
        let arr = validate_array(vec![DetectorMatrix::new(
            1.0,
            1.0,
            Complex64::new(0.0, 0.0),
            "full",
        )])
        .unwrap();
        let net = build_dilation(&arr).unwrap();
        assert_eq!(net.rows().len(), 2);
        assert_eq!(net.num_loss_rows(), 0);
        net.check_isometry().unwrap();
    }

    #[test]
    fn dilation_reconstructs_detectors() {
        let arr = mirrored_pair(0.867, 0.9 * PI).unwrap();
        let net = build_dilation(&arr).unwrap();
        assert_eq!(net.rows().len(), 4);
        assert_eq!(net.num_loss_rows(), 2);
        for (m, d) in arr.detectors().iter().enumerate() {
            let r = net.reconstruct(RowOwner::Detector(m));
            assert!((r[0][0].re - d.r_aa).abs() < RECONSTRUCTION_TOL);
            assert!((r[1][1].re - d.r_bb).abs() < RECONSTRUCTION_TOL);
            assert!((r[0][1] - d.r_ab).norm() < RECONSTRUCTION_TOL);
        }
        net.check_isometry().unwrap();
    }

    #[test]
    fn phase_covariance() {
        let d = DetectorMatrix::rank_one(0.3, 0.2, 0.4, "d");
        let phi = 1.1;
        let shifted = DetectorMatrix::new(
            d.r_aa,
            d.r_bb,
            d.r_ab * Complex64::from_polar(1.0, phi),
            "d'",
        );
        assert!((shifted.theta() - (d.theta() + phi)).abs() < 1e-12);
        assert_eq!(mean_count(&d, 3.0, 4.0), mean_count(&shifted, 3.0, 4.0));
        let delta = 0.7;
        assert!(
            (mean_field_count(&shifted, 3.0, 4.0, delta - phi)
                - mean_field_count(&d, 3.0, 4.0, delta))
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn rejects_non_psd_matrix() {
        let bad = DetectorMatrix::new(0.1, 0.1, Complex64::new(0.5, 0.0), "bad");
        match validate_array(vec![bad]) {
            Err(DetectorError::NonHermitianOrNegative { .. }) => {}
            other => panic!("expected NonHermitianOrNegative, got {other:?}"),
        }
    }

    #[test]
    fn fingerprint_distinguishes_networks() {
        let a = build_dilation(&mirrored_pair(0.867, 0.9 * PI).unwrap()).unwrap();
        let b = build_dilation(&mirrored_pair(0.6, 0.9 * PI).unwrap()).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        let a2 = build_dilation(&mirrored_pair(0.867, 0.9 * PI).unwrap()).unwrap();
        assert_eq!(a.fingerprint(), a2.fingerprint());
    }
}
