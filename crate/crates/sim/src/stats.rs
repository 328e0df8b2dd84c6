//! Latency/staleness statistics: per-column summaries with nearest-rank
//! quantiles, rendered as the measurement tables.

/// Six summary statistics over one sample, in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    pub std_dev: f64,
    pub q95: f64,
    pub q99: f64,
}

impl Summary {
    /// Computes the summary; quantiles are nearest-rank on the sorted
    /// sample, the deviation is the population standard deviation.
    pub fn from_samples(samples: &[f64]) -> Option<Summary> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("samples are finite"));
        let n = sorted.len();
        let sum: f64 = sorted.iter().sum();
        let avg = sum / n as f64;
        let var = sorted.iter().map(|x| (x - avg) * (x - avg)).sum::<f64>() / n as f64;
        Some(Summary {
            n,
            min: sorted[0],
            max: sorted[n - 1],
            avg,
            std_dev: var.sqrt(),
            q95: nearest_rank(&sorted, 0.95),
            q99: nearest_rank(&sorted, 0.99),
        })
    }

    pub fn stat(&self, row: StatRow) -> f64 {
        match row {
            StatRow::Min => self.min,
            StatRow::Max => self.max,
            StatRow::Avg => self.avg,
            StatRow::StdDev => self.std_dev,
            StatRow::Q95 => self.q95,
            StatRow::Q99 => self.q99,
        }
    }
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatRow {
    Min,
    Max,
    Avg,
    StdDev,
    Q95,
    Q99,
}

pub const STAT_ROWS: [StatRow; 6] = [
    StatRow::Min,
    StatRow::Max,
    StatRow::Avg,
    StatRow::StdDev,
    StatRow::Q95,
    StatRow::Q99,
];

impl StatRow {
    pub fn label(&self) -> &'static str {
        match self {
            StatRow::Min => "Min",
            StatRow::Max => "Max",
            StatRow::Avg => "Avg",
            StatRow::StdDev => "Std Dev",
            StatRow::Q95 => "Q0.95",
            StatRow::Q99 => "Q0.99",
        }
    }
}

/// A named table of summaries, one column per operation type.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsTable {
    pub title: String,
    pub columns: Vec<(String, Summary)>,
}

impl StatsTable {
    pub fn new(title: impl Into<String>) -> Self {
        StatsTable {
            title: title.into(),
            columns: Vec::new(),
        }
    }

    pub fn push_column(&mut self, name: impl Into<String>, samples: &[f64]) -> bool {
        match Summary::from_samples(samples) {
            Some(summary) => {
                self.columns.push((name.into(), summary));
                true
            }
            None => false,
        }
    }

    pub fn column(&self, name: &str) -> Option<&Summary> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Structural sanity shared by every table: min <= avg <= max per
    /// column, all values finite and nonnegative.
    pub fn check_shape(&self) -> Result<(), String> {
        for (name, s) in &self.columns {
            let values = [s.min, s.max, s.avg, s.std_dev, s.q95, s.q99];
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(format!("column {name} has a non-finite or negative statistic"));
            }
            if !(s.min <= s.avg && s.avg <= s.max) {
                return Err(format!("column {name} violates min <= avg <= max"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_single_sample_has_equal_stats() {
        let s = Summary::from_samples(&[7.0]).unwrap();
        assert_eq!(s.min, 7.0);
        assert_eq!(s.max, 7.0);
        assert_eq!(s.avg, 7.0);
        assert_eq!(s.q95, 7.0);
        assert_eq!(s.q99, 7.0);
        assert_eq!(s.std_dev, 0.0);
    }

    #[test]
    fn nearest_rank_quantiles() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let s = Summary::from_samples(&samples).unwrap();
        assert_eq!(s.q95, 95.0);
        assert_eq!(s.q99, 99.0);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 100.0);
        assert!((s.avg - 50.5).abs() < 1e-9);
    }

    #[test]
    fn empty_sample_yields_none() {
        assert!(Summary::from_samples(&[]).is_none());
        let mut t = StatsTable::new("x");
        assert!(!t.push_column("empty", &[]));
        assert!(t.is_empty());
    }

    #[test]
    fn shape_check_rejects_negative() {
        let mut t = StatsTable::new("x");
        t.push_column("ok", &[1.0, 2.0]);
        assert!(t.check_shape().is_ok());
        t.columns.push((
            "bad".into(),
            Summary {
                n: 1,
                min: -1.0,
                max: 1.0,
                avg: 0.0,
                std_dev: 0.0,
                q95: 0.0,
                q99: 0.0,
            },
        ));
        assert!(t.check_shape().is_err());
    }
}
