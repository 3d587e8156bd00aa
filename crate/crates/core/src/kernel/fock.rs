//! Exact joint count distribution for a Fock-pair input propagated through
//! the dilated detector network.
//!
//! The input |N_a, N_b> maps through the isometry rows t_k to
//! prod_s (sum_k t_{k,s} c_k†)^{N_s} |0>. For a row occupation pattern
//! (u_1, ..., u_K) the amplitude is a convolution over the per-row split
//! j_k (quanta taken from mode a):
//!
//!   A(u) = sqrt(N_a! N_b! / prod u_k!)
//!          * sum_{j : sum j = N_a} prod_k C(u_k, j_k) t_{k,a}^{j_k} t_{k,b}^{u_k - j_k}
//!
//! Probabilities are |A|^2 summed over loss-row occupations and folded onto
//! detector counts. All row weights are carried as scaled complex mantissas
//! with a separate log-magnitude exponent, so N ~ 230 stays in range.

use super::table::{pack_key, BackendTag, CountTable, CLAMP_FLOOR};
use super::KernelError;
use crate::detector::{DilatedNetwork, RowOwner};
use crate::numeric::{KahanSum, LnFactorials};
use num_complex::Complex64;
use rayon::prelude::*;

/// ln of the configuration-count work estimate C(n_tot + K - 1, K - 1).
pub fn ln_config_count(n_tot: usize, rows: usize) -> f64 {
    if rows <= 1 {
        return 0.0;
    }
    let lf = LnFactorials::up_to(n_tot + rows);
    lf.ln_choose(n_tot + rows - 1, rows - 1)
}

/// Scaled complex weight vector over a contiguous j range.
#[derive(Debug, Clone)]
struct WeightVec {
    /// log-magnitude factored out of `vals`
    scale: f64,
    j_lo: usize,
    vals: Vec<Complex64>,
}

impl WeightVec {
    fn j_hi(&self) -> usize {
        self.j_lo + self.vals.len() - 1
    }
}

/// Per-row weights indexed by the row count u; `None` marks impossible u.
struct RowWeights {
    by_count: Vec<Option<WeightVec>>,
}

fn build_row_weights(
    row: &[Complex64; 2],
    n_a: usize,
    n_b: usize,
    lf: &LnFactorials,
) -> RowWeights {
    let n_tot = n_a + n_b;
    let (ma, pa) = (row[0].norm(), row[0].arg());
    let (mb, pb) = (row[1].norm(), row[1].arg());
    let (la, lb) = (ma.ln(), mb.ln());
    let mut by_count = Vec::with_capacity(n_tot + 1);
    for u in 0..=n_tot {
        let mut j_lo = u.saturating_sub(n_b);
        let mut j_hi = u.min(n_a);
        if ma == 0.0 {
            j_hi = j_hi.min(0);
        }
        if mb == 0.0 {
            j_lo = j_lo.max(u);
        }
        if j_lo > j_hi {
            by_count.push(None);
            continue;
        }
        // lw(u, j) = j ln|t_a| + (u-j) ln|t_b| - ln j! - ln (u-j)! + ln sqrt(u!)
        // a zero modulus gives ln = -inf; its exponent is 0 on every kept j,
        // and 0 * -inf must read as 0, not NaN
        let xlny = |k: usize, l: f64| if k == 0 { 0.0 } else { k as f64 * l };
        let base = 0.5 * lf.get(u);
        let mut lws = Vec::with_capacity(j_hi - j_lo + 1);
        let mut max_lw = f64::NEG_INFINITY;
        for j in j_lo..=j_hi {
            let lw = base + xlny(j, la) + xlny(u - j, lb) - lf.get(j) - lf.get(u - j);
            max_lw = max_lw.max(lw);
            lws.push(lw);
        }
        let vals = lws
            .iter()
            .enumerate()
            .map(|(i, &lw)| {
                let j = j_lo + i;
                let phase = j as f64 * pa + (u - j) as f64 * pb;
                Complex64::from_polar((lw - max_lw).exp(), phase)
            })
            .collect();
        by_count.push(Some(WeightVec {
            scale: max_lw,
            j_lo,
            vals,
        }));
    }
    RowWeights { by_count }
}

/// Convolve two weight vectors, rescaling the result to unit max magnitude.
fn convolve(a: &WeightVec, b: &WeightVec, n_a: usize) -> Option<WeightVec> {
    let lo = a.j_lo + b.j_lo;
    if lo > n_a {
        return None;
    }
    let hi = (a.j_hi() + b.j_hi()).min(n_a);
    let mut vals = vec![Complex64::new(0.0, 0.0); hi - lo + 1];
    for (ia, &va) in a.vals.iter().enumerate() {
        let ja = a.j_lo + ia;
        if ja + b.j_lo > hi {
            break;
        }
        let jb_max = (hi - ja).min(b.j_hi()) - b.j_lo;
        let out = &mut vals[ja + b.j_lo - lo..];
        for (ib, &vb) in b.vals[..=jb_max].iter().enumerate() {
            out[ib] += va * vb;
        }
    }
    let max_mag = vals.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
    if max_mag == 0.0 {
        return None;
    }
    let half_ln = 0.5 * max_mag.ln();
    let inv = (-half_ln).exp();
    for v in &mut vals {
        *v *= inv;
    }
    Some(WeightVec {
        scale: a.scale + b.scale + half_ln,
        j_lo: lo,
        vals,
    })
}

/// Dot of a convolution vector against a weight vector at fixed total
/// j + j' = n_a; returns the unscaled amplitude mantissa.
#[inline]
fn paired_dot(conv: &WeightVec, w: &WeightVec, n_a: usize) -> Complex64 {
    // j ranges over conv; j' = n_a - j must fall inside w
    let j_min = conv.j_lo.max(n_a.saturating_sub(w.j_hi()));
    let j_max = conv.j_hi().min(n_a - w.j_lo.min(n_a));
    if w.j_lo > n_a || j_min > j_max {
        return Complex64::new(0.0, 0.0);
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for j in j_min..=j_max {
        acc += conv.vals[j - conv.j_lo] * w.vals[n_a - j - w.j_lo];
    }
    acc
}

struct KernelCtx<'a> {
    det_rows: Vec<(usize, RowWeights)>, // (detector index, weights)
    loss: Vec<RowWeights>,
    /// loss_pair[l_total][l3]: convolution of the two loss rows at counts
    /// (l3, l_total - l3); only built when there are two loss rows.
    loss_pair: Vec<Vec<Option<WeightVec>>>,
    n_a: usize,
    n_tot: usize,
    num_detectors: usize,
    e_base: f64,
    lf: &'a LnFactorials,
}

fn leaf_probability(ctx: &KernelCtx, conv: &WeightVec, remaining: usize) -> f64 {
    match ctx.loss.len() {
        0 => {
            debug_assert_eq!(remaining, 0);
            if ctx.n_a < conv.j_lo || ctx.n_a > conv.j_hi() {
                return 0.0;
            }
            let a = conv.vals[ctx.n_a - conv.j_lo];
            a.norm_sqr() * (2.0 * (ctx.e_base + conv.scale)).exp()
        }
        1 => {
            let Some(w) = ctx.loss[0].by_count[remaining].as_ref() else {
                return 0.0;
            };
            let a = paired_dot(conv, w, ctx.n_a);
            a.norm_sqr() * (2.0 * (ctx.e_base + conv.scale + w.scale)).exp()
        }
        2 => {
            let mut p = KahanSum::new();
            for pair in ctx.loss_pair[remaining].iter().flatten() {
                let a = paired_dot(conv, pair, ctx.n_a);
                if a != Complex64::new(0.0, 0.0) {
                    p.add(a.norm_sqr() * (2.0 * (ctx.e_base + conv.scale + pair.scale)).exp());
                }
            }
            p.value()
        }
        _ => unreachable!("a 2x2 loss block has at most two rows"),
    }
}

/// Recurse over detector rows from `row_idx`, extending the convolution.
fn enumerate_rows(
    ctx: &KernelCtx,
    row_idx: usize,
    used: usize,
    conv: &WeightVec,
    counts: &mut [u32],
    out: &mut Vec<(u128, f64)>,
) {
    let remaining = ctx.n_tot - used;
    if row_idx == ctx.det_rows.len() {
        let p = leaf_probability(ctx, conv, remaining);
        if p != 0.0 {
            let key = pack_key(counts).expect("counts fit the key layout");
            out.push((key, p));
        }
        return;
    }
    let (det, weights) = &ctx.det_rows[row_idx];
    let forced_last = row_idx + 1 == ctx.det_rows.len() && ctx.loss.is_empty();
    let u_range = if forced_last {
        remaining..=remaining
    } else {
        0..=remaining
    };
    for u in u_range {
        let Some(w) = weights.by_count[u].as_ref() else {
            continue;
        };
        let Some(next) = convolve(conv, w, ctx.n_a) else {
            continue;
        };
        counts[*det] += u as u32;
        enumerate_rows(ctx, row_idx + 1, used + u, &next, counts, out);
        counts[*det] -= u as u32;
    }
}

/// Default bound on |total mass - 1| before the high-precision path kicks in.
pub const DEFAULT_MASS_TOLERANCE: f64 = 1e-10;

/// Hard cap on the adaptive working precision.
const MAX_PRECISION_BITS: u32 = 16_384;

pub fn fock_joint(
    n_a: usize,
    n_b: usize,
    net: &DilatedNetwork,
    budget: u64,
) -> Result<CountTable, KernelError> {
    fock_joint_with_tolerance(n_a, n_b, net, budget, DEFAULT_MASS_TOLERANCE)
}

fn mass_defect(pairs: &[(u128, f64)]) -> f64 {
    let mut s = KahanSum::new();
    for &(_, p) in pairs {
        s.add(p);
    }
    (s.value() - 1.0).abs()
}

/// As `fock_joint`, with an explicit bound on the acceptable deviation of
/// the total mass from its exact value of 1.
///
/// The j-convolution cancels path amplitudes whose combined magnitude grows
/// roughly like (|t_a| + |t_b|)^(N_a + N_b), so the double-precision result
/// degrades exponentially in the total quantum number. The unit-mass
/// invariant exposes this: when the defect exceeds `mass_tolerance`, the
/// enumeration is repeated in software floats at a precision calibrated
/// from the observed defect, doubling until the invariant holds.
pub fn fock_joint_with_tolerance(
    n_a: usize,
    n_b: usize,
    net: &DilatedNetwork,
    budget: u64,
    mass_tolerance: f64,
) -> Result<CountTable, KernelError> {
    let n_tot = n_a + n_b;
    let ln_work = ln_config_count(n_tot, net.rows().len());
    if ln_work > (budget as f64).ln() {
        return Err(KernelError::BudgetExceeded {
            estimated: ln_work.exp(),
            budget,
        });
    }
    let lf = LnFactorials::up_to(n_tot.max(1));
    let mut det_rows = Vec::new();
    let mut loss = Vec::new();
    for (row, owner) in net.rows().iter().zip(net.owners()) {
        let weights = build_row_weights(row, n_a, n_b, &lf);
        match owner {
            RowOwner::Detector(m) => det_rows.push((*m, weights)),
            RowOwner::Loss => loss.push(weights),
        }
    }
    // pre-convolve the two loss rows for every (l_total, l3); shared by all
    // detector configurations with the same remaining count
    let loss_pair = if loss.len() == 2 {
        (0..=n_tot)
            .map(|l_total| {
                (0..=l_total)
                    .map(|l3| {
                        let (w3, w4) = (
                            loss[0].by_count[l3].as_ref()?,
                            loss[1].by_count[l_total - l3].as_ref()?,
                        );
                        convolve(w3, w4, n_a)
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let ctx = KernelCtx {
        det_rows,
        loss,
        loss_pair,
        n_a,
        n_tot,
        num_detectors: net.num_detectors(),
        e_base: 0.5 * (lf.get(n_a) + lf.get(n_b)),
        lf: &lf,
    };
    let _ = ctx.lf; // kept alive for the weights borrowed above

    let desc = format!("fock({n_a})xfock({n_b})");
    let mut pairs: Vec<(u128, f64)> = if ctx.det_rows.is_empty() {
        // every detector matrix was zero; all quanta are lost
        let unit = WeightVec {
            scale: 0.0,
            j_lo: 0,
            vals: vec![Complex64::new(1.0, 0.0)],
        };
        let p = leaf_probability(&ctx, &unit, n_tot);
        vec![(pack_key(&vec![0u32; ctx.num_detectors])?, p)]
    } else {
        // parallel over the first row's count; each branch accumulates its
        // own deterministic list, merged in count order afterwards
        let (first_det, first_weights) = &ctx.det_rows[0];
        let forced = ctx.det_rows.len() == 1 && ctx.loss.is_empty();
        let u_values: Vec<usize> = if forced {
            vec![n_tot]
        } else {
            (0..=n_tot).collect()
        };
        let mut chunks: Vec<Vec<(u128, f64)>> = u_values
            .par_iter()
            .map(|&u| {
                let mut out = Vec::new();
                let Some(w) = first_weights.by_count[u].as_ref() else {
                    return out;
                };
                let mut counts = vec![0u32; ctx.num_detectors];
                counts[*first_det] = u as u32;
                enumerate_rows(&ctx, 1, u, w, &mut counts, &mut out);
                out
            })
            .collect();
        chunks.drain(..).flatten().collect()
    };

    // the exact total mass is 1 for every Fock pair (the dilation rows form
    // a full isometry and the loss occupations are summed out); treat any
    // larger defect, or a non-finite mass, as cancellation failure
    let defect = mass_defect(&pairs);
    if !(defect <= mass_tolerance) {
        // calibrate: defect ~ (G eps)^2 where G is the cancellation ratio,
        // so G bits of the f64 amplitudes were lost; ask for G plus ten
        // decimal digits of headroom plus margin, escalating if the
        // calibration was off
        let g = (defect.sqrt() / f64::EPSILON).max(1.0);
        let wanted = g.log2() + 10.0 * std::f64::consts::LOG2_10 + 12.0;
        let mut prec: u32 = if wanted.is_finite() {
            (wanted.ceil() as u32).clamp(96, MAX_PRECISION_BITS)
        } else {
            96
        };
        loop {
            pairs = super::fock_big::enumerate(n_a, n_b, net, prec);
            let defect = mass_defect(&pairs);
            if defect <= mass_tolerance {
                break;
            }
            if prec >= MAX_PRECISION_BITS {
                return Err(KernelError::MassCheck {
                    defect,
                    tolerance: mass_tolerance,
                    bits: prec,
                });
            }
            prec = (prec * 2).min(MAX_PRECISION_BITS);
        }
    }

    let table = CountTable::from_pairs(
        net.num_detectors(),
        pairs,
        BackendTag::Network,
        desc,
        CLAMP_FLOOR,
    )?;
    Ok(table)
}
