//! Small numeric helpers shared across the crate.

/// Table of ln(n!) for n in 0..=max.
#[derive(Debug, Clone)]
pub struct LnFactorials {
    table: Vec<f64>,
}

impl LnFactorials {
    pub fn up_to(max: usize) -> Self {
        let mut table = Vec::with_capacity(max + 1);
        let mut acc = 0.0f64;
        table.push(0.0);
        for n in 1..=max {
            acc += (n as f64).ln();
            table.push(acc);
        }
        Self { table }
    }

    #[inline]
    pub fn get(&self, n: usize) -> f64 {
        self.table[n]
    }

    /// ln C(n, k); requires k <= n.
    #[inline]
    pub fn ln_choose(&self, n: usize, k: usize) -> f64 {
        debug_assert!(k <= n);
        self.table[n] - self.table[k] - self.table[n - k]
    }
}

/// Two-term compensated (Kahan) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Poisson pmf over 0..=cap, computed by stable recurrence from the mode.
pub fn poisson_pmf(mean: f64, cap: usize) -> Vec<f64> {
    let mut pmf = vec![0.0; cap + 1];
    if mean == 0.0 {
        pmf[0] = 1.0;
        return pmf;
    }
    // log-space seed at the mode avoids underflow for large means
    let mode = (mean.floor() as usize).min(cap);
    let mut ln_fact = 0.0;
    for n in 1..=mode {
        ln_fact += (n as f64).ln();
    }
    let ln_p_mode = -mean + (mode as f64) * mean.ln() - ln_fact;
    pmf[mode] = ln_p_mode.exp();
    let mut p = pmf[mode];
    for n in (0..mode).rev() {
        p *= (n as f64 + 1.0) / mean;
        pmf[n] = p;
    }
    p = pmf[mode];
    for n in mode + 1..=cap {
        p *= mean / n as f64;
        pmf[n] = p;
    }
    pmf
}

/// Support cap for a Poisson of the given mean such that the dropped
/// upper tail is below `tail_tol`.
pub fn poisson_cap(mean: f64, tail_tol: f64) -> usize {
    // Chernoff-style padding; cheap and safely conservative.
    let sigma = mean.sqrt();
    let k = (2.0 * (1.0 / tail_tol.max(1e-300)).ln()).sqrt() + 4.0;
    (mean + k * sigma + 10.0).ceil() as usize
}
