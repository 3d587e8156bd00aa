//! CSV emission with a commented metadata header. Probabilities are
//! rendered with 17 significant digits so every f64 round-trips exactly.

use crate::kernel::table::CountTable;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// 17 significant digits: the shortest count guaranteed to round-trip f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn write_csv(path: &Path, table: &CsvTable) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in &table.meta {
        writeln!(w, "# {k}: {v}")?;
    }
    writeln!(w, "{}", table.columns.join(","))?;
    for row in &table.rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

pub fn read_csv(path: &Path) -> std::io::Result<CsvTable> {
    let file = std::fs::File::open(path)?;
    let mut meta = Vec::new();
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest.split_once(": ").unwrap_or((rest, ""));
            meta.push((k.to_string(), v.to_string()));
        } else if columns.is_empty() {
            columns = line.split(',').map(str::to_string).collect();
        } else {
            rows.push(line.split(',').map(str::to_string).collect());
        }
    }
    Ok(CsvTable {
        meta,
        columns,
        rows,
    })
}

/// Unix-epoch timestamp header value; the single line allowed to differ
/// between otherwise byte-identical runs.
pub fn timestamp() -> String {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".to_string())
}

/// Rows (n_1, ..., n_M, probability) for a count table, in key order.
pub fn count_table_rows(table: &CountTable) -> (Vec<String>, Vec<Vec<String>>) {
    let mut columns: Vec<String> = (1..=table.axes()).map(|m| format!("n{m}")).collect();
    columns.push("probability".to_string());
    let rows = table
        .iter()
        .map(|(counts, p)| {
            let mut row: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
            row.push(fmt_f64(p));
            row
        })
        .collect();
    (columns, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        for &x in &[
            1.0 / 3.0,
            5.3e-112,
            0.1 + 0.2,
            f64::MIN_POSITIVE,
            1.0 - 1e-16,
        ] {
            let back: f64 = fmt_f64(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = CsvTable {
            meta: vec![
                ("backend".into(), "network".into()),
                ("total_mass".into(), fmt_f64(0.9999999)),
            ],
            columns: vec!["n1".into(), "probability".into()],
            rows: vec![
                vec!["0".into(), fmt_f64(0.25)],
                vec!["1".into(), fmt_f64(0.75)],
            ],
        };
        write_csv(&path, &t).unwrap();
        assert_eq!(read_csv(&path).unwrap(), t);
    }
}
