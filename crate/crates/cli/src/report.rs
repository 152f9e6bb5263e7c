use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;

use referral::metrics::{EvalReport, Metric, ReportRow};

pub const TABLES_FILE: &str = "tables.md";
pub const PLOT_FILE: &str = "all_patients.csv";

type Cells = BTreeMap<(Metric, usize), Option<f64>>;

fn columns(rows: &[&ReportRow]) -> Vec<(Metric, usize)> {
    let mut cols: Vec<(Metric, usize)> = rows.iter().map(|r| (r.metric, r.k)).collect();
    cols.sort_by_key(|&(m, k)| (Metric::ALL.iter().position(|&x| x == m), k));
    cols.dedup();
    cols
}

fn ordered<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// One markdown table per (partition, specialty); rows are method and scenario, cells in percent.
pub fn render_tables(report: &EvalReport) -> String {
    let mut out = String::new();
    let partitions = ordered(report.rows.iter().map(|r| r.partition.as_str()));
    for partition in partitions {
        let in_part: Vec<&ReportRow> = report.rows.iter().filter(|r| r.partition == partition).collect();
        let specialties = ordered(in_part.iter().map(|r| r.specialty.as_str()));
        for specialty in specialties {
            let rows: Vec<&ReportRow> = in_part.iter().copied().filter(|r| r.specialty == specialty).collect();
            let cols = columns(&rows);
            let mut cells: BTreeMap<(&str, &str), Cells> = BTreeMap::new();
            let mut order: Vec<(&str, &str)> = Vec::new();
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for r in &rows {
                let key = (r.method.as_str(), r.scenario.as_str());
                if !order.contains(&key) {
                    order.push(key);
                }
                cells.entry(key).or_default().insert((r.metric, r.k), r.value);
                let n = counts.entry(key).or_default();
                *n = (*n).max(r.n_patients);
            }
            let _ = writeln!(out, "### {partition} / {specialty}\n");
            let header: Vec<String> = cols.iter().map(|(m, k)| format!("{m}@{k}")).collect();
            let _ = writeln!(out, "| method | scenario | {} | patients |", header.join(" | "));
            let _ = writeln!(out, "|---|---|{}---|", "---|".repeat(cols.len()));
            for key in order {
                let values: Vec<String> = cols
                    .iter()
                    .map(|c| fmt_value(cells[&key].get(c).copied().flatten()))
                    .collect();
                let _ = writeln!(out, "| {} | {} | {} | {} |", key.0, key.1, values.join(" | "), counts[&key]);
            }
            out.push('\n');
        }
    }
    out
}

/// Wide CSV of the "All" rows: one line per (partition, method, scenario), one column per metric@K.
pub fn plot_csv(report: &EvalReport) -> String {
    let rows: Vec<&ReportRow> = report.rows.iter().filter(|r| r.specialty == "All").collect();
    let cols = columns(&rows);
    let mut out = String::from("partition,method,scenario");
    for (m, k) in &cols {
        let _ = write!(out, ",{m}@{k}");
    }
    out.push('\n');
    let mut order: Vec<(&str, &str, &str)> = Vec::new();
    let mut cells: BTreeMap<(&str, &str, &str), Cells> = BTreeMap::new();
    for r in rows {
        let key = (r.partition.as_str(), r.method.as_str(), r.scenario.as_str());
        if !order.contains(&key) {
            order.push(key);
        }
        cells.entry(key).or_default().insert((r.metric, r.k), r.value);
    }
    for key in order {
        let _ = write!(out, "{},{},{}", key.0, key.1, key.2);
        for c in &cols {
            let v = cells[&key].get(c).copied().flatten();
            let _ = write!(out, ",{}", v.map(|v| v.to_string()).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}

pub fn report_stage(input: &Path, out: &Path) -> Result<String> {
    let report = EvalReport::load_csv(input)?;
    fs::create_dir_all(out)?;
    let tables = render_tables(&report);
    fs::write(out.join(TABLES_FILE), &tables)?;
    fs::write(out.join(PLOT_FILE), plot_csv(&report))?;
    log::info!("stage=report cells={}", report.rows.len());
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, metric: Metric, k: usize, value: Option<f64>) -> ReportRow {
        ReportRow {
            method: method.into(),
            scenario: "S1".into(),
            partition: "test_seen".into(),
            specialty: "All".into(),
            metric,
            k,
            value,
            n_patients: 4,
        }
    }

    #[test]
    fn single_cell_table() {
        let report = EvalReport { ps_normalization: String::new(), rows: vec![row("xml", Metric::Precision, 1, Some(0.25))] };
        let t = render_tables(&report);
        assert_eq!(
            t,
            "### test_seen / All\n\n| method | scenario | P@1 | patients |\n|---|---|---|---|\n| xml | S1 | 25.00 | 4 |\n\n"
        );
    }

    #[test]
    fn absent_cells_and_column_order() {
        let report = EvalReport {
            ps_normalization: String::new(),
            rows: vec![
                row("xml", Metric::Recall, 10, Some(0.5)),
                row("xml", Metric::Precision, 3, None),
                row("mf", Metric::Precision, 3, Some(1.0)),
            ],
        };
        let t = render_tables(&report);
        assert!(t.contains("| method | scenario | P@3 | Recall@10 | patients |"));
        assert!(t.contains("| xml | S1 | - | 50.00 | 4 |"));
        assert!(t.contains("| mf | S1 | 100.00 | - | 4 |"));
        let csv = plot_csv(&report);
        assert_eq!(csv.lines().next().unwrap(), "partition,method,scenario,P@3,Recall@10");
        assert!(csv.contains("test_seen,xml,S1,,0.5\n"));
    }
}
