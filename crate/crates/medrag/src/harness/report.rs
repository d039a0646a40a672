//! Render metric reports as a Markdown or CSV table with the per-column
//! minimum flagged.

use crate::error::{Error, Result};
use crate::harness::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

const COLUMNS: [&str; 4] = ["acc", "pre", "rec", "f1"];

fn column_values(r: &MetricsReport) -> [f64; 4] {
    [r.accuracy, r.precision, r.recall, r.f1]
}

fn column_minima(reports: &[MetricsReport]) -> [f64; 4] {
    let mut mins = [f64::INFINITY; 4];
    for r in reports {
        for (m, v) in mins.iter_mut().zip(column_values(r)) {
            *m = m.min(v);
        }
    }
    mins
}

fn csv_quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Render one row per condition with columns Acc/Pre/Rec/F1 at two
/// decimals. The minimum of each column is flagged: bolded in Markdown,
/// listed in a trailing `min_flags` column in CSV.
pub fn emit_report(reports: &[MetricsReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Precondition("no reports to render".into()));
    }
    let mins = column_minima(reports);
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str("| Condition | Acc | Pre | Rec | F1 |\n");
            out.push_str("|---|---|---|---|---|\n");
            for r in reports {
                out.push_str(&format!("| {} ", r.condition));
                for (v, m) in column_values(r).iter().zip(mins) {
                    let cell = format!("{v:.2}");
                    if *v == m {
                        out.push_str(&format!("| **{cell}** "));
                    } else {
                        out.push_str(&format!("| {cell} "));
                    }
                }
                out.push_str("|\n");
            }
        }
        ReportFormat::Csv => {
            out.push_str("condition,acc,pre,rec,f1,min_flags\n");
            for r in reports {
                let flags: Vec<&str> = COLUMNS
                    .iter()
                    .zip(column_values(r).iter().zip(mins))
                    .filter(|(_, (v, m))| *v == m)
                    .map(|(c, _)| *c)
                    .collect();
                let vals = r.row();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    csv_quote(&r.condition),
                    vals[0],
                    vals[1],
                    vals[2],
                    vals[3],
                    csv_quote(&flags.join(";")),
                ));
            }
        }
    }
    Ok(out)
}
