//! Per-pair kernel cache keyed by (network fingerprint, N_a, N_b), with an
//! optional on-disk store. The disk format is line-based and carries f64
//! bit patterns in hex, so probabilities round-trip bit-exactly.

use super::table::{pack_key, unpack_key, BackendTag, CountTable, CLAMP_FLOOR};
use super::KernelError;
use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

const FORMAT_HEADER: &str = "bosecount-kernel-cache v1";

#[derive(Debug, Default)]
pub struct KernelCache {
    mem: RwLock<HashMap<(String, u32, u32), Arc<CountTable>>>,
    disk_dir: Option<PathBuf>,
}

impl KernelCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_disk_dir(dir: impl Into<PathBuf>) -> Result<Self, KernelError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| KernelError::Cache(format!("creating {}: {e}", dir.display())))?;
        Ok(Self {
            mem: RwLock::new(HashMap::new()),
            disk_dir: Some(dir),
        })
    }

    fn disk_path(&self, fingerprint: &str, n_a: u32, n_b: u32) -> Option<PathBuf> {
        self.disk_dir
            .as_ref()
            .map(|d| d.join(format!("{fingerprint}_{n_a}_{n_b}.kern")))
    }

    pub fn get_or_compute(
        &self,
        fingerprint: &str,
        n_a: u32,
        n_b: u32,
        compute: impl FnOnce() -> Result<CountTable, KernelError>,
    ) -> Result<Arc<CountTable>, KernelError> {
        let key = (fingerprint.to_string(), n_a, n_b);
        if let Some(hit) = self.mem.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        if let Some(path) = self.disk_path(fingerprint, n_a, n_b) {
            if path.exists() {
                let table = Arc::new(read_kernel_file(&path, fingerprint, n_a, n_b)?);
                self.mem
                    .write()
                    .expect("cache lock")
                    .entry(key)
                    .or_insert_with(|| Arc::clone(&table));
                return Ok(table);
            }
        }
        let table = Arc::new(compute()?);
        if let Some(path) = self.disk_path(fingerprint, n_a, n_b) {
            write_kernel_file(&path, fingerprint, n_a, n_b, &table)?;
        }
        // insert-or-get: a concurrent computation of the same key wins once
        let mut mem = self.mem.write().expect("cache lock");
        let entry = mem.entry(key).or_insert_with(|| Arc::clone(&table));
        Ok(Arc::clone(entry))
    }

    pub fn mem_entries(&self) -> usize {
        self.mem.read().expect("cache lock").len()
    }

    pub fn disk_files(&self) -> Result<usize, KernelError> {
        let Some(dir) = &self.disk_dir else {
            return Ok(0);
        };
        let mut count = 0;
        for entry in std::fs::read_dir(dir)
            .map_err(|e| KernelError::Cache(format!("reading {}: {e}", dir.display())))?
        {
            let entry = entry.map_err(|e| KernelError::Cache(e.to_string()))?;
            if entry.path().extension().is_some_and(|x| x == "kern") {
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn clear(&self) -> Result<(), KernelError> {
        self.mem.write().expect("cache lock").clear();
        if let Some(dir) = &self.disk_dir {
            for entry in std::fs::read_dir(dir)
                .map_err(|e| KernelError::Cache(format!("reading {}: {e}", dir.display())))?
            {
                let entry = entry.map_err(|e| KernelError::Cache(e.to_string()))?;
                if entry.path().extension().is_some_and(|x| x == "kern") {
                    std::fs::remove_file(entry.path())
                        .map_err(|e| KernelError::Cache(e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

fn write_kernel_file(
    path: &Path,
    fingerprint: &str,
    n_a: u32,
    n_b: u32,
    table: &CountTable,
) -> Result<(), KernelError> {
    let io_err = |e: std::io::Error| KernelError::Cache(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("kern.tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp).map_err(io_err)?);
        writeln!(w, "{FORMAT_HEADER}").map_err(io_err)?;
        writeln!(w, "fingerprint {fingerprint}").map_err(io_err)?;
        writeln!(w, "pair {n_a} {n_b}").map_err(io_err)?;
        writeln!(w, "axes {}", table.axes()).map_err(io_err)?;
        writeln!(w, "entries {}", table.len()).map_err(io_err)?;
        for (counts, p) in table.iter() {
            let counts_str: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{} {:016x}", counts_str.join(" "), p.to_bits()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

fn read_kernel_file(
    path: &Path,
    fingerprint: &str,
    n_a: u32,
    n_b: u32,
) -> Result<CountTable, KernelError> {
    let bad = |msg: String| KernelError::Cache(format!("{}: {msg}", path.display()));
    let file = std::fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let mut next = || -> Result<String, KernelError> {
        lines
            .next()
            .transpose()
            .map_err(|e| bad(e.to_string()))?
            .ok_or_else(|| bad("unexpected end of file".into()))
    };
    if next()? != FORMAT_HEADER {
        return Err(bad("unknown format header".into()));
    }
    if next()? != format!("fingerprint {fingerprint}") {
        return Err(bad("fingerprint mismatch".into()));
    }
    if next()? != format!("pair {n_a} {n_b}") {
        return Err(bad("pair mismatch".into()));
    }
    let axes_line = next()?;
    let axes: usize = axes_line
        .strip_prefix("axes ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad axes line: {axes_line}")))?;
    let entries_line = next()?;
    let count: usize = entries_line
        .strip_prefix("entries ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad entries line: {entries_line}")))?;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next()?;
        let mut fields = line.split_whitespace();
        let mut counts = Vec::with_capacity(axes);
        for _ in 0..axes {
            let f = fields.next().ok_or_else(|| bad(format!("short line: {line}")))?;
            counts.push(
                f.parse::<u32>()
                    .map_err(|e| bad(format!("bad count in {line}: {e}")))?,
            );
        }
        let bits = fields.next().ok_or_else(|| bad(format!("short line: {line}")))?;
        let p = f64::from_bits(
            u64::from_str_radix(bits, 16).map_err(|e| bad(format!("bad bits in {line}: {e}")))?,
        );
        pairs.push((pack_key(&counts)?, p));
    }
    let table = CountTable::from_pairs(
        axes,
        pairs,
        BackendTag::Network,
        format!("fock({n_a})xfock({n_b})"),
        CLAMP_FLOOR,
    )?;
    // keep unpack_key linked for readers of this module
    debug_assert!(table.len() <= count && axes <= 8 && unpack_key(0, axes).len() == axes);
    Ok(table)
}
