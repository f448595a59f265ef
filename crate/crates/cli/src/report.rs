//! Benchmark tables, pass/fail checks and latency summaries.

use std::fmt;
use std::path::Path;
use std::time::Duration;

use anyhow::Result;

/// One experiment's rows, written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub experiment: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(experiment: &str, columns: &[&'static str]) -> Table {
        Table {
            experiment: experiment.to_string(),
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    /// Values of `column` in row order.
    pub fn column(&self, column: &str) -> Vec<&str> {
        let i = self.columns.iter().position(|c| *c == column).expect("known column");
        self.rows.iter().map(|r| r[i].as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Writes `<dir>/<experiment>.csv`, plus `<experiment>.gp` when a plot
    /// script is given.
    pub fn save(&self, dir: &Path, plot: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.csv", self.experiment)), self.to_csv())?;
        if let Some(p) = plot {
            std::fs::write(dir.join(format!("{}.gp", self.experiment)), p)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: String) -> Check {
        Check {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}: {}", self.name, self.detail)
    }
}

/// A benchmark's output.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: Table,
    pub checks: Vec<Check>,
    pub plot: Option<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Median and tail of a latency sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub median: Duration,
    pub p99: Duration,
}

impl Summary {
    /// Nearest-rank percentiles.
    pub fn of(samples: &[Duration]) -> Summary {
        let mut s = samples.to_vec();
        s.sort_unstable();
        Summary {
            n: s.len(),
            median: percentile(&s, 50.0),
            p99: percentile(&s, 99.0),
        }
    }
}

/// Nearest-rank percentile of sorted samples; zero when empty.
pub fn percentile(sorted: &[Duration], p: f64) -> Duration {
    if sorted.is_empty() {
        return Duration::ZERO;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn micros(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_use_nearest_rank() {
        let s: Vec<Duration> = (1..=100).map(Duration::from_micros).collect();
        let sum = Summary::of(&s);
        assert_eq!(sum.median, Duration::from_micros(50));
        assert_eq!(sum.p99, Duration::from_micros(99));
        assert_eq!(percentile(&s[..1], 99.0), Duration::from_micros(1));
        assert_eq!(percentile(&[], 50.0), Duration::ZERO);
    }

    #[test]
    fn csv_has_a_stable_header() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec!["1".into(), "two, quoted".into()]);
        assert_eq!(t.to_csv(), "a,b\n1,\"two, quoted\"\n");
        assert_eq!(t.column("b"), vec!["two, quoted"]);
    }
}
