// SPDX-License-Identifier: Apache-2.0

//! Result tables and across-seed summaries.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Mean, sample standard deviation and count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

/// Groups values by key, in order of first appearance, and summarizes each
/// group.
pub fn summarize<K: PartialEq>(rows: impl IntoIterator<Item = (K, f64)>) -> Vec<(K, Stats)> {
    let mut groups: Vec<(K, Vec<f64>)> = Vec::new();
    for (k, v) in rows {
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, vals)) => vals.push(v),
            None => groups.push((k, vec![v])),
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, Stats::of(&v)))
        .collect()
}

/// First time at which `accuracy` falls below `threshold`, interpolated
/// linearly in `log10 t` between the bracketing points. `points` must be
/// sorted by time. `None` if the curve never drops below the threshold on
/// the sampled range.
pub fn crossing_time(points: &[(f64, f64)], threshold: f64) -> Option<f64> {
    let i = points.iter().position(|&(_, a)| a < threshold)?;
    if i == 0 {
        return Some(points[0].0);
    }
    let (t0, a0) = points[i - 1];
    let (t1, a1) = points[i];
    let frac = (a0 - threshold) / (a0 - a1);
    if t0 <= 0.0 {
        return Some(t0 + frac * (t1 - t0));
    }
    let (l0, l1) = (t0.log10(), t1.log10());
    Some(10f64.powf(l0 + frac * (l1 - l0)))
}

/// A results table: typed rows plus a grouped summary.
pub struct Table<R> {
    pub rows: Vec<R>,
    /// Header for the key columns of `summary`.
    pub summary_keys: Vec<&'static str>,
    pub summary: Vec<(Vec<String>, Stats)>,
}

/// `results.csv` -> `results-summary.csv`.
pub fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    out.with_file_name(format!("{stem}-summary.csv"))
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Rows as CSV with a header.
pub fn write_rows<R: Serialize, W: Write>(rows: &[R], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn write_summary<W: Write>(
    keys: &[&str],
    summary: &[(Vec<String>, Stats)],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = keys.to_vec();
    header.extend(["mean_accuracy", "std_accuracy", "n"]);
    w.write_record(&header)?;
    for (k, s) in summary {
        let mut rec = k.clone();
        rec.extend([s.mean.to_string(), s.std.to_string(), s.n.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

impl<R: Serialize> Table<R> {
    /// Writes the rows to `out` and, when there is one, the summary next to it.
    pub fn save(&self, out: &Path) -> Result<()> {
        write_rows(&self.rows, create(out)?)?;
        if !self.summary_keys.is_empty() {
            let p = summary_path(out);
            write_summary(&self.summary_keys, &self.summary, create(&p)?)?;
        }
        Ok(())
    }

    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_rows(&self.rows, &mut buf)?;
        Ok(buf)
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_summary(&self.summary_keys, &self.summary, &mut buf)?;
        Ok(buf)
    }

    /// Summary entry whose key columns equal `key`.
    pub fn stats(&self, key: &[&str]) -> Option<Stats> {
        self.summary
            .iter()
            .find(|(k, _)| k.iter().map(String::as_str).eq(key.iter().copied()))
            .map(|(_, s)| *s)
    }
}
