//! High-precision re-evaluation of the Fock-pair kernel.
//!
//! The j-convolution in the amplitude sums paths whose combined l1 norm
//! exceeds the result by roughly (|t_a| + |t_b|)^{n_tot}, so double
//! precision loses about half a bit of the answer per quantum. When the
//! fast path fails its unit-mass check, the same enumeration is repeated
//! here with MPFR reals at a precision chosen from the measured
//! cancellation. Magnitudes like sqrt(N_a! N_b!) stay in exact form; the
//! wide exponent range removes the mantissa/exponent bookkeeping of the
//! f64 path.

use super::table::pack_key;
use crate::detector::{DilatedNetwork, RowOwner};
use num_complex::Complex64;
use rug::{Assign, Float};

#[derive(Clone)]
struct Cx {
    re: Float,
    im: Float,
}

impl Cx {
    fn zero(prec: u32) -> Cx {
        Cx {
            re: Float::new(prec),
            im: Float::new(prec),
        }
    }

    fn from_f64(prec: u32, z: Complex64) -> Cx {
        Cx {
            re: Float::with_val(prec, z.re),
            im: Float::with_val(prec, z.im),
        }
    }

    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }
}

/// acc += a * b, reusing `t` as scratch.
fn mac(acc: &mut Cx, a: &Cx, b: &Cx, t: &mut Float) {
    t.assign(&a.re * &b.re);
    acc.re += &*t;
    t.assign(&a.im * &b.im);
    acc.re -= &*t;
    t.assign(&a.re * &b.im);
    acc.im += &*t;
    t.assign(&a.im * &b.re);
    acc.im += &*t;
}

/// a * b into a fresh value.
fn mul(a: &Cx, b: &Cx, prec: u32, t: &mut Float) -> Cx {
    let mut out = Cx::zero(prec);
    mac(&mut out, a, b, t);
    out
}

struct WeightVec {
    j_lo: usize,
    vals: Vec<Cx>,
}

impl WeightVec {
    fn j_hi(&self) -> usize {
        self.j_lo + self.vals.len() - 1
    }
}

struct RowWeights {
    by_count: Vec<Option<WeightVec>>,
}

/// w(u, j) = sqrt(u!) t_a^j t_b^(u-j) / (j! (u-j)!), full magnitude.
fn build_row_weights(
    row: &[Complex64; 2],
    n_a: usize,
    n_b: usize,
    fact: &[Float],
    prec: u32,
) -> RowWeights {
    let n_tot = n_a + n_b;
    let ta = Cx::from_f64(prec, row[0]);
    let tb = Cx::from_f64(prec, row[1]);
    let mut t = Float::new(prec);
    let mut pow_table = |base: &Cx| -> Vec<Cx> {
        let mut pows = Vec::with_capacity(n_tot + 1);
        pows.push(Cx {
            re: Float::with_val(prec, 1),
            im: Float::new(prec),
        });
        for k in 1..=n_tot {
            let prev = &pows[k - 1];
            pows.push(mul(prev, base, prec, &mut t));
        }
        pows
    };
    let ta_pow = pow_table(&ta);
    let tb_pow = pow_table(&tb);
    let ta_zero = row[0] == Complex64::new(0.0, 0.0);
    let tb_zero = row[1] == Complex64::new(0.0, 0.0);

    let mut by_count = Vec::with_capacity(n_tot + 1);
    for u in 0..=n_tot {
        let mut j_lo = u.saturating_sub(n_b);
        let mut j_hi = u.min(n_a);
        if ta_zero {
            j_hi = j_hi.min(0);
        }
        if tb_zero {
            j_lo = j_lo.max(u);
        }
        if j_lo > j_hi {
            by_count.push(None);
            continue;
        }
        let root = Float::with_val(prec, fact[u].clone().sqrt());
        let mut vals = Vec::with_capacity(j_hi - j_lo + 1);
        for j in j_lo..=j_hi {
            let denom = Float::with_val(prec, &fact[j] * &fact[u - j]);
            let coef = Float::with_val(prec, &root / &denom);
            let base = mul(&ta_pow[j], &tb_pow[u - j], prec, &mut t);
            vals.push(Cx {
                re: Float::with_val(prec, &base.re * &coef),
                im: Float::with_val(prec, &base.im * &coef),
            });
        }
        by_count.push(Some(WeightVec { j_lo, vals }));
    }
    RowWeights { by_count }
}

fn convolve(a: &WeightVec, b: &WeightVec, n_a: usize, prec: u32, t: &mut Float) -> Option<WeightVec> {
    let lo = a.j_lo + b.j_lo;
    if lo > n_a {
        return None;
    }
    let hi = (a.j_hi() + b.j_hi()).min(n_a);
    let mut vals: Vec<Cx> = (lo..=hi).map(|_| Cx::zero(prec)).collect();
    for (ia, va) in a.vals.iter().enumerate() {
        let ja = a.j_lo + ia;
        if ja + b.j_lo > hi {
            break;
        }
        let jb_max = (hi - ja).min(b.j_hi()) - b.j_lo;
        for (ib, vb) in b.vals[..=jb_max].iter().enumerate() {
            mac(&mut vals[ja + b.j_lo - lo + ib], va, vb, t);
        }
    }
    if vals.iter().all(Cx::is_zero) {
        return None;
    }
    Some(WeightVec { j_lo: lo, vals })
}

/// |sum_j conv_j w_(n_a - j)|^2 accumulated onto `p`.
fn paired_norm_sqr(
    conv: &WeightVec,
    w: &WeightVec,
    n_a: usize,
    p: &mut Float,
    prec: u32,
    t: &mut Float,
) {
    let j_min = conv.j_lo.max(n_a.saturating_sub(w.j_hi()));
    let j_max = conv.j_hi().min(n_a - w.j_lo.min(n_a));
    if w.j_lo > n_a || j_min > j_max {
        return;
    }
    let mut acc = Cx::zero(prec);
    for j in j_min..=j_max {
        mac(&mut acc, &conv.vals[j - conv.j_lo], &w.vals[n_a - j - w.j_lo], t);
    }
    t.assign(&acc.re * &acc.re);
    *p += &*t;
    t.assign(&acc.im * &acc.im);
    *p += &*t;
}

struct Ctx {
    det_rows: Vec<(usize, RowWeights)>,
    loss: Vec<RowWeights>,
    loss_pair: Vec<Vec<Option<WeightVec>>>,
    n_a: usize,
    n_tot: usize,
    /// N_a! N_b!, multiplied into every |amplitude|^2
    fact_ab: Float,
    prec: u32,
}

fn leaf_probability(ctx: &Ctx, conv: &WeightVec, remaining: usize, t: &mut Float) -> f64 {
    let mut p = Float::new(ctx.prec);
    match ctx.loss.len() {
        0 => {
            debug_assert_eq!(remaining, 0);
            if ctx.n_a < conv.j_lo || ctx.n_a > conv.j_hi() {
                return 0.0;
            }
            let a = &conv.vals[ctx.n_a - conv.j_lo];
            t.assign(&a.re * &a.re);
            p += &*t;
            t.assign(&a.im * &a.im);
            p += &*t;
        }
        1 => {
            let Some(w) = ctx.loss[0].by_count[remaining].as_ref() else {
                return 0.0;
            };
            paired_norm_sqr(conv, w, ctx.n_a, &mut p, ctx.prec, t);
        }
        2 => {
            for pair in ctx.loss_pair[remaining].iter().flatten() {
                paired_norm_sqr(conv, pair, ctx.n_a, &mut p, ctx.prec, t);
            }
        }
        _ => unreachable!("a 2x2 loss block has at most two rows"),
    }
    p *= &ctx.fact_ab;
    p.to_f64()
}

fn enumerate_rows(
    ctx: &Ctx,
    row_idx: usize,
    used: usize,
    conv: &WeightVec,
    counts: &mut [u32],
    t: &mut Float,
    out: &mut Vec<(u128, f64)>,
) {
    let remaining = ctx.n_tot - used;
    if row_idx == ctx.det_rows.len() {
        let p = leaf_probability(ctx, conv, remaining, t);
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
        let Some(next) = convolve(conv, w, ctx.n_a, ctx.prec, t) else {
            continue;
        };
        counts[*det] += u as u32;
        enumerate_rows(ctx, row_idx + 1, used + u, &next, counts, t, out);
        counts[*det] -= u as u32;
    }
}

/// Full enumeration at `prec` bits; same output contract as the f64 path.
pub(super) fn enumerate(
    n_a: usize,
    n_b: usize,
    net: &DilatedNetwork,
    prec: u32,
) -> Vec<(u128, f64)> {
    let n_tot = n_a + n_b;
    let mut fact = Vec::with_capacity(n_tot + 1);
    fact.push(Float::with_val(prec, 1));
    for k in 1..=n_tot.max(1) {
        fact.push(Float::with_val(prec, &fact[k - 1] * &Float::with_val(prec, k as u64)));
    }
    let mut det_rows = Vec::new();
    let mut loss = Vec::new();
    for (row, owner) in net.rows().iter().zip(net.owners()) {
        let weights = build_row_weights(row, n_a, n_b, &fact, prec);
        match owner {
            RowOwner::Detector(m) => det_rows.push((*m, weights)),
            RowOwner::Loss => loss.push(weights),
        }
    }
    let mut t = Float::new(prec);
    let loss_pair = if loss.len() == 2 {
        (0..=n_tot)
            .map(|l_total| {
                (0..=l_total)
                    .map(|l3| {
                        let (w3, w4) = (
                            loss[0].by_count[l3].as_ref()?,
                            loss[1].by_count[l_total - l3].as_ref()?,
                        );
                        convolve(w3, w4, n_a, prec, &mut t)
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let ctx = Ctx {
        det_rows,
        loss,
        loss_pair,
        n_a,
        n_tot,
        fact_ab: Float::with_val(prec, &fact[n_a] * &fact[n_b]),
        prec,
    };

    let num_detectors = net.num_detectors();
    let mut out = Vec::new();
    if ctx.det_rows.is_empty() {
        let unit = WeightVec {
            j_lo: 0,
            vals: vec![Cx {
                re: Float::with_val(prec, 1),
                im: Float::new(prec),
            }],
        };
        let p = leaf_probability(&ctx, &unit, n_tot, &mut t);
        out.push((
            pack_key(&vec![0u32; num_detectors]).expect("counts fit the key layout"),
            p,
        ));
    } else {
        let (first_det, first_weights) = &ctx.det_rows[0];
        let forced = ctx.det_rows.len() == 1 && ctx.loss.is_empty();
        let u_values: Vec<usize> = if forced {
            vec![n_tot]
        } else {
            (0..=n_tot).collect()
        };
        for u in u_values {
            let Some(w) = first_weights.by_count[u].as_ref() else {
                continue;
            };
            let mut counts = vec![0u32; num_detectors];
            counts[*first_det] = u as u32;
            enumerate_rows(&ctx, 1, u, w, &mut counts, &mut t, &mut out);
        }
    }
    out
}
