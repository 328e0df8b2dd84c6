//! Deterministic report rendering: markdown (tables laid out as
//! Min/Max/Avg/Std Dev/Q0.95/Q0.99 rows) and a machine-readable TSV that
//! parses back to the identical numbers. Reports never contain wall-clock
//! values, so a fixed spec and seed render byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::cluster::{HarnessError, LossLine};
use crate::stats::{StatsTable, Summary, STAT_ROWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Tsv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "tsv" => Ok(ReportFormat::Tsv),
            other => Err(format!("unknown report format {other:?} (markdown|tsv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Note(String),
    Assertions(Vec<Assertion>),
    Table(StatsTable),
    Loss(Vec<LossLine>),
    KeyValues { title: String, pairs: Vec<(String, String)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    pub seed: u64,
    pub sections: Vec<Section>,
}

impl Report {
    pub fn new(title: impl Into<String>, seed: u64) -> Report {
        Report {
            title: title.into(),
            seed,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn assertions(&self) -> impl Iterator<Item = &Assertion> {
        self.sections.iter().flat_map(|s| match s {
            Section::Assertions(list) => list.as_slice(),
            _ => &[],
        })
    }

    pub fn first_failure(&self) -> Option<&Assertion> {
        self.assertions().find(|a| !a.passed)
    }

    fn check_not_empty(&self) -> Result<(), HarnessError> {
        if self.sections.is_empty() {
            return Err(HarnessError::EmptyReport);
        }
        for section in &self.sections {
            if let Section::Table(table) = section {
                if table.is_empty() {
                    return Err(HarnessError::EmptyReport);
                }
            }
        }
        Ok(())
    }

    pub fn render(&self, format: ReportFormat) -> Result<String, HarnessError> {
        self.check_not_empty()?;
        Ok(match format {
            ReportFormat::Markdown => self.render_markdown(),
            ReportFormat::Tsv => self.render_tsv(),
        })
    }

    pub fn emit(&self, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
        let text = self.render(format)?;
        std::fs::write(path, text).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
    }

    fn render_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.title);
        let _ = writeln!(out);
        let _ = writeln!(out, "seed: {}", self.seed);
        for section in &self.sections {
            let _ = writeln!(out);
            match section {
                Section::Note(text) => {
                    let _ = writeln!(out, "{text}");
                }
                Section::Assertions(list) => {
                    let _ = writeln!(out, "## Assertions");
                    let _ = writeln!(out);
                    for a in list {
                        let mark = if a.passed { "PASS" } else { "FAIL" };
                        let _ = writeln!(out, "- [{mark}] {}: {}", a.name, a.detail);
                    }
                }
                Section::Table(table) => {
                    let _ = writeln!(out, "## {}", table.title);
                    let _ = writeln!(out);
                    let mut header = String::from("| Statistic |");
                    let mut rule = String::from("|---|");
                    for (name, _) in &table.columns {
                        let _ = write!(header, " {name} |");
                        rule.push_str("---|");
                    }
                    let _ = writeln!(out, "{header}");
                    let _ = writeln!(out, "{rule}");
                    for row in STAT_ROWS {
                        let mut line = format!("| {} |", row.label());
                        for (_, summary) in &table.columns {
                            let _ = write!(line, " {} |", fmt_num(summary.stat(row)));
                        }
                        let _ = writeln!(out, "{line}");
                    }
                }
                Section::Loss(lines) => {
                    let _ = writeln!(out, "## Loss accounting");
                    let _ = writeln!(out);
                    let _ = writeln!(
                        out,
                        "| Keygroup | Receiver | Sender | Latest | Applied | Pending | Lost | Accounted |"
                    );
                    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
                    for l in lines {
                        let _ = writeln!(
                            out,
                            "| {} | {} | {} | {} | {} | {} | {} | {} |",
                            l.keygroup, l.receiver, l.sender, l.latest_sent, l.applied, l.pending, l.lost, l.accounted
                        );
                    }
                }
                Section::KeyValues { title, pairs } => {
                    let _ = writeln!(out, "## {title}");
                    let _ = writeln!(out);
                    for (k, v) in pairs {
                        let _ = writeln!(out, "- {k}: {v}");
                    }
                }
            }
        }
        out
    }

    fn render_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "report\t{}\t{}", self.title, self.seed);
        for section in &self.sections {
            match section {
                Section::Note(text) => {
                    let _ = writeln!(out, "note\t{}", text.replace(['\t', '\n'], " "));
                }
                Section::Assertions(list) => {
                    for a in list {
                        let _ = writeln!(
                            out,
                            "assert\t{}\t{}\t{}",
                            a.name,
                            if a.passed { "PASS" } else { "FAIL" },
                            a.detail.replace(['\t', '\n'], " ")
                        );
                    }
                }
                Section::Table(table) => {
                    let mut header = format!("table\t{}", table.title);
                    for (name, _) in &table.columns {
                        let _ = write!(header, "\t{name}");
                    }
                    let _ = writeln!(out, "{header}");
                    for row in STAT_ROWS {
                        let mut line = format!("stat\t{}", row.label());
                        for (_, summary) in &table.columns {
                            let _ = write!(line, "\t{}", fmt_num(summary.stat(row)));
                        }
                        let _ = writeln!(out, "{line}");
                    }
                }
                Section::Loss(lines) => {
                    for l in lines {
                        let _ = writeln!(
                            out,
                            "loss\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                            l.keygroup, l.receiver, l.sender, l.latest_sent, l.applied, l.pending, l.lost, l.accounted
                        );
                    }
                }
                Section::KeyValues { title, pairs } => {
                    for (k, v) in pairs {
                        let _ = writeln!(out, "kv\t{title}\t{k}\t{v}");
                    }
                }
            }
        }
        out
    }
}

/// Numbers render via the shortest exact representation so a TSV
/// round-trip reproduces them bit for bit.
fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Parses the tables back out of a TSV rendering (round-trip checks).
pub fn parse_tsv_tables(text: &str) -> Vec<StatsTable> {
    let mut tables: Vec<StatsTable> = Vec::new();
    for line in text.lines() {
        let mut parts = line.split('\t');
        match parts.next() {
            Some("table") => {
                let title = parts.next().unwrap_or_default().to_string();
                let mut table = StatsTable::new(title);
                for name in parts {
                    table.columns.push((
                        name.to_string(),
                        Summary {
                            n: 0,
                            min: 0.0,
                            max: 0.0,
                            avg: 0.0,
                            std_dev: 0.0,
                            q95: 0.0,
                            q99: 0.0,
                        },
                    ));
                }
                tables.push(table);
            }
            Some("stat") => {
                let Some(table) = tables.last_mut() else { continue };
                let label = parts.next().unwrap_or_default();
                for (i, value) in parts.enumerate() {
                    let Some((_, summary)) = table.columns.get_mut(i) else { break };
                    let Ok(v) = value.parse::<f64>() else { continue };
                    match label {
                        "Min" => summary.min = v,
                        "Max" => summary.max = v,
                        "Avg" => summary.avg = v,
                        "Std Dev" => summary.std_dev = v,
                        "Q0.95" => summary.q95 = v,
                        "Q0.99" => summary.q99 = v,
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    tables
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> Report {
        let mut table = StatsTable::new("Staleness, ms");
        table.push_column("Put", &[6.0, 98.0, 15.5, 11.25]);
        table.push_column("Delete", &[3.0, 57.0, 8.125]);
        let mut report = Report::new("sample", 7);
        report.push(Section::Table(table));
        report.push(Section::Assertions(vec![Assertion {
            name: "converged".into(),
            passed: true,
            detail: "3 replicas identical".into(),
        }]));
        report
    }

    #[test]
    fn markdown_has_the_six_stat_rows() {
        let md = sample_report().render(ReportFormat::Markdown).unwrap();
        for label in ["Min", "Max", "Avg", "Std Dev", "Q0.95", "Q0.99"] {
            assert!(md.contains(&format!("| {label} |")), "missing row {label}:\n{md}");
        }
        assert!(md.contains("| Statistic | Put | Delete |"));
    }

    #[test]
    fn tsv_round_trips_identical_numbers() {
        let report = sample_report();
        let tsv = report.render(ReportFormat::Tsv).unwrap();
        let parsed = parse_tsv_tables(&tsv);
        assert_eq!(parsed.len(), 1);
        let original = match &report.sections[0] {
            Section::Table(t) => t,
            _ => unreachable!(),
        };
        for ((_, orig), (_, back)) in original.columns.iter().zip(parsed[0].columns.iter()) {
            assert_eq!(orig.min, back.min);
            assert_eq!(orig.max, back.max);
            assert_eq!(orig.avg, back.avg);
            assert_eq!(orig.std_dev, back.std_dev);
            assert_eq!(orig.q95, back.q95);
            assert_eq!(orig.q99, back.q99);
        }
    }

    #[test]
    fn empty_reports_are_refused() {
        let empty = Report::new("empty", 0);
        assert!(matches!(empty.render(ReportFormat::Markdown), Err(HarnessError::EmptyReport)));
        let mut with_empty_table = Report::new("empty-table", 0);
        with_empty_table.push(Section::Table(StatsTable::new("no columns")));
        assert!(matches!(
            with_empty_table.render(ReportFormat::Tsv),
            Err(HarnessError::EmptyReport)
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = sample_report().render(ReportFormat::Markdown).unwrap();
        let b = sample_report().render(ReportFormat::Markdown).unwrap();
        assert_eq!(a, b);
    }
}
