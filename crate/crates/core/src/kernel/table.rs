//! Sparse joint count tables with provenance.

use crate::numeric::KahanSum;
use thiserror::Error;

/// Clamp window for roundoff negatives on the exact backends.
pub const CLAMP_FLOOR: f64 = -1e-14;
pub const NORMALIZATION_TOL: f64 = 1e-9;
pub const MAX_AXES: usize = 8;
const MAX_COUNT: u32 = u16::MAX as u32;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("at most {MAX_AXES} detectors are supported, got {0}")]
    TooManyAxes(usize),
    #[error("count {0} exceeds the representable maximum {MAX_COUNT}")]
    CountOverflow(u32),
    #[error("probability {value:.3e} below the clamp floor {floor:.1e}")]
    NegativeProbability { value: f64, floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendTag {
    Network,
    MomentOracle,
    CoherentQuadrature,
}

impl BackendTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendTag::Network => "network",
            BackendTag::MomentOracle => "moment_oracle",
            BackendTag::CoherentQuadrature => "coherent_quadrature",
        }
    }
}

#[inline]
pub fn pack_key(counts: &[u32]) -> Result<u128, TableError> {
    if counts.len() > MAX_AXES {
        return Err(TableError::TooManyAxes(counts.len()));
    }
    let mut key = 0u128;
    for &c in counts {
        if c > MAX_COUNT {
            return Err(TableError::CountOverflow(c));
        }
        key = (key << 16) | c as u128;
    }
    Ok(key)
}

#[inline]
pub fn unpack_key(key: u128, axes: usize) -> Vec<u32> {
    let mut counts = vec![0u32; axes];
    let mut k = key;
    for i in (0..axes).rev() {
        counts[i] = (k & 0xffff) as u32;
        k >>= 16;
    }
    counts
}

/// Sparse table P(n_1, ..., n_M) with entries sorted by packed key.
#[derive(Debug, Clone)]
pub struct CountTable {
    axes: usize,
    entries: Vec<(u128, f64)>,
    total_mass: f64,
    backend: BackendTag,
    source_desc: String,
    /// Mass discarded when sparsifying near-zero entries.
    pruned_mass: f64,
}

impl CountTable {
    /// Build from raw (key, probability) pairs; clamps roundoff negatives in
    /// [clamp_floor, 0) to zero and rejects anything more negative.
    pub fn from_pairs(
        axes: usize,
        mut pairs: Vec<(u128, f64)>,
        backend: BackendTag,
        source_desc: String,
        clamp_floor: f64,
    ) -> Result<Self, TableError> {
        if axes > MAX_AXES {
            return Err(TableError::TooManyAxes(axes));
        }
        pairs.sort_unstable_by_key(|&(k, _)| k);
        let mut entries: Vec<(u128, f64)> = Vec::with_capacity(pairs.len());
        for (k, mut p) in pairs {
            if p < 0.0 {
                if p < clamp_floor {
                    return Err(TableError::NegativeProbability {
                        value: p,
                        floor: clamp_floor,
                    });
                }
                p = 0.0;
            }
            if let Some(last) = entries.last_mut() {
                if last.0 == k {
                    last.1 += p;
                    continue;
                }
            }
            entries.push((k, p));
        }
        entries.retain(|&(_, p)| p > 0.0);
        let mut sum = KahanSum::new();
        for &(_, p) in &entries {
            sum.add(p);
        }
        Ok(Self {
            axes,
            entries,
            total_mass: sum.value(),
            backend,
            source_desc,
            pruned_mass: 0.0,
        })
    }

    /// Sparsify a windowed dense accumulation, dropping entries below
    /// `floor` (their mass is recorded in `pruned_mass`).
    pub fn from_dense_2d(
        dense: &[f64],
        cap1: usize,
        backend: BackendTag,
        source_desc: String,
        floor: f64,
        clamp_floor: f64,
    ) -> Result<Self, TableError> {
        let cap0 = dense.len() / (cap1 + 1);
        let mut entries = Vec::new();
        let mut pruned = KahanSum::new();
        let mut sum = KahanSum::new();
        for n0 in 0..cap0 {
            let row = &dense[n0 * (cap1 + 1)..(n0 + 1) * (cap1 + 1)];
            for (n1, &p) in row.iter().enumerate() {
                if p < 0.0 {
                    if p < clamp_floor {
                        return Err(TableError::NegativeProbability {
                            value: p,
                            floor: clamp_floor,
                        });
                    }
                    continue;
                }
                if p <= floor {
                    pruned.add(p);
                    continue;
                }
                entries.push((pack_key(&[n0 as u32, n1 as u32])?, p));
                sum.add(p);
            }
        }
        Ok(Self {
            axes: 2,
            entries,
            total_mass: sum.value(),
            backend,
            source_desc,
            pruned_mass: pruned.value(),
        })
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn entries(&self) -> &[(u128, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn pruned_mass(&self) -> f64 {
        self.pruned_mass
    }

    pub fn add_pruned_mass(&mut self, mass: f64) {
        self.pruned_mass += mass;
    }

    pub fn backend(&self) -> BackendTag {
        self.backend
    }

    pub fn source_desc(&self) -> &str {
        &self.source_desc
    }

    pub fn get(&self, counts: &[u32]) -> f64 {
        let key = match pack_key(counts) {
            Ok(k) => k,
            Err(_) => return 0.0,
        };
        match self.entries.binary_search_by_key(&key, |&(k, _)| k) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<u32>, f64)> + '_ {
        self.entries
            .iter()
            .map(move |&(k, p)| (unpack_key(k, self.axes), p))
    }

    /// Marginal pmf of axis m as a dense vector from 0.
    pub fn marginal_axis(&self, m: usize) -> Vec<f64> {
        assert!(m < self.axes);
        let shift = 16 * (self.axes - 1 - m);
        let max = self
            .entries
            .iter()
            .map(|&(k, _)| ((k >> shift) & 0xffff) as usize)
            .max()
            .unwrap_or(0);
        let mut sums = vec![KahanSum::new(); max + 1];
        for &(k, p) in &self.entries {
            sums[((k >> shift) & 0xffff) as usize].add(p);
        }
        sums.into_iter().map(|s| s.value()).collect()
    }

    /// Total-variation distance, treating missing entries as zero.
    pub fn tv_distance(&self, other: &CountTable) -> f64 {
        assert_eq!(self.axes, other.axes);
        let mut tv = KahanSum::new();
        let (mut i, mut j) = (0usize, 0usize);
        while i < self.entries.len() || j < other.entries.len() {
            let a = self.entries.get(i);
            let b = other.entries.get(j);
            match (a, b) {
                (Some(&(ka, pa)), Some(&(kb, pb))) => {
                    if ka == kb {
                        tv.add((pa - pb).abs());
                        i += 1;
                        j += 1;
                    } else if ka < kb {
                        tv.add(pa);
                        i += 1;
                    } else {
                        tv.add(pb);
                        j += 1;
                    }
                }
                (Some(&(_, pa)), None) => {
                    tv.add(pa);
                    i += 1;
                }
                (None, Some(&(_, pb))) => {
                    tv.add(pb);
                    j += 1;
                }
                (None, None) => break,
            }
        }
        0.5 * tv.value()
    }

    /// Largest entrywise absolute difference against another table.
    pub fn max_abs_diff(&self, other: &CountTable) -> f64 {
        let mut keys: Vec<u128> = self.entries.iter().map(|&(k, _)| k).collect();
        keys.extend(other.entries.iter().map(|&(k, _)| k));
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .map(|k| {
                let a = self.lookup(k);
                let b = other.lookup(k);
                (a - b).abs()
            })
            .fold(0.0, f64::max)
    }

    fn lookup(&self, key: u128) -> f64 {
        match self.entries.binary_search_by_key(&key, |&(k, _)| k) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    /// Marginalize onto the given axes (in their listed order).
    pub fn marginalize_onto(&self, keep: &[usize]) -> Result<CountTable, TableError> {
        let mut acc: std::collections::BTreeMap<u128, KahanSum> = Default::default();
        for (counts, p) in self.iter() {
            let reduced: Vec<u32> = keep.iter().map(|&m| counts[m]).collect();
            acc.entry(pack_key(&reduced)?).or_default().add(p);
        }
        let entries: Vec<(u128, f64)> = acc.into_iter().map(|(k, s)| (k, s.value())).collect();
        let mut sum = KahanSum::new();
        for &(_, p) in &entries {
            sum.add(p);
        }
        Ok(CountTable {
            axes: keep.len(),
            entries,
            total_mass: sum.value(),
            backend: self.backend,
            source_desc: self.source_desc.clone(),
            pruned_mass: self.pruned_mass,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip() {
        let counts = vec![3u32, 0, 65535, 7];
        let key = pack_key(&counts).unwrap();
        assert_eq!(unpack_key(key, 4), counts);
    }

    #[test]
    fn pack_preserves_lexicographic_order() {
        let a = pack_key(&[1, 9]).unwrap();
        let b = pack_key(&[2, 0]).unwrap();
        assert!(a < b);
    }

    #[test]
    fn clamps_small_negatives_and_rejects_large() {
        let pairs = vec![(0u128, -5e-15), (1u128, 1.0)];
        let t = CountTable::from_pairs(1, pairs, BackendTag::Network, "t".into(), CLAMP_FLOOR)
            .unwrap();
        assert_eq!(t.get(&[0]), 0.0);
        let bad = vec![(0u128, -1e-10)];
        assert!(
            CountTable::from_pairs(1, bad, BackendTag::Network, "t".into(), CLAMP_FLOOR).is_err()
        );
    }

    #[test]
    fn marginal_and_tv() {
        let pairs = vec![
            (pack_key(&[0, 0]).unwrap(), 0.25),
            (pack_key(&[0, 1]).unwrap(), 0.25),
            (pack_key(&[1, 0]).unwrap(), 0.5),
        ];
        let t = CountTable::from_pairs(2, pairs, BackendTag::Network, "t".into(), CLAMP_FLOOR)
            .unwrap();
        assert_eq!(t.marginal_axis(0), vec![0.5, 0.5]);
        assert_eq!(t.marginal_axis(1), vec![0.75, 0.25]);
        assert!((t.tv_distance(&t)).abs() < 1e-15);
    }
}
