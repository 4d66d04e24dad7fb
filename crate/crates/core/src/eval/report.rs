//! Deterministic JSON / CSV / Markdown rendering of harness results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AblationGrid, EvalReport, SweepCurve};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
    #[value(name = "md", alias = "markdown")]
    Md,
}

#[derive(Debug, Clone, Copy)]
pub enum Emittable<'a> {
    Report(&'a EvalReport),
    Curve(&'a SweepCurve),
    Grid(&'a AblationGrid),
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(item: Emittable<'_>, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = match item {
                Emittable::Report(r) => serde_json::to_string_pretty(r)?,
                Emittable::Curve(c) => serde_json::to_string_pretty(c)?,
                Emittable::Grid(g) => serde_json::to_string_pretty(g)?,
            };
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => match item {
            Emittable::Report(r) => {
                let mut rows: Vec<Vec<String>> = r
                    .per_class_accuracy
                    .iter()
                    .map(|c| {
                        vec![
                            c.class.clone(),
                            c.correct.to_string(),
                            c.total.to_string(),
                            c.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                        ]
                    })
                    .collect();
                rows.push(vec![
                    "ALL".into(),
                    r.correct.to_string(),
                    r.total.to_string(),
                    r.overall_accuracy.to_string(),
                ]);
                csv_string(&["class", "correct", "total", "accuracy"], rows)
            }
            Emittable::Curve(c) => csv_string(
                &["value", "accuracy", "refined_count"],
                c.points
                    .iter()
                    .map(|p| vec![p.value.to_string(), p.accuracy.to_string(), p.refined_count.to_string()])
                    .collect(),
            ),
            Emittable::Grid(g) => csv_string(
                &[
                    "view_selection",
                    "hierarchical_prompts",
                    "accuracy",
                    "refined_count",
                    "corrected_count",
                    "broken_count",
                ],
                g.rows
                    .iter()
                    .map(|row| {
                        vec![
                            row.view_selection.to_string(),
                            row.hierarchical_prompts.to_string(),
                            row.report.overall_accuracy.to_string(),
                            row.report.refined_count.to_string(),
                            row.report.corrected_count.to_string(),
                            row.report.broken_count.to_string(),
                        ]
                    })
                    .collect(),
            ),
        },
        ReportFormat::Md => Ok(markdown(item)),
    }
}

fn markdown(item: Emittable<'_>) -> String {
    let mut s = String::new();
    match item {
        Emittable::Report(r) => {
            let c = &r.config_echo;
            let _ = writeln!(s, "## {}\n", r.dataset_name);
            let _ = writeln!(s, "Overall accuracy: {}% ({}/{})  ", pct(r.overall_accuracy), r.correct, r.total);
            let _ = writeln!(s, "Mean class accuracy: {}%  ", pct(r.macro_accuracy));
            let _ = writeln!(
                s,
                "Refined: {}, corrected: {}, broken: {}, deferred: {}  ",
                r.refined_count, r.corrected_count, r.broken_count, r.deferred_count
            );
            let _ = writeln!(
                s,
                "Config: delta={}, top_k={}, temperature={}, m_total={}, m_select={}, selection={:?}, hierarchical={}, aggregation={:?}\n",
                c.delta,
                c.top_k,
                c.temperature,
                c.selection.m_total,
                c.selection.m_select,
                c.selection.mode,
                c.hierarchical_enabled,
                c.aggregation
            );
            let _ = writeln!(s, "| Class | Correct | Total | Accuracy (%) |");
            let _ = writeln!(s, "|---|---:|---:|---:|");
            for class in &r.per_class_accuracy {
                let acc = class.accuracy.map(pct).unwrap_or_else(|| "-".into());
                let _ = writeln!(s, "| {} | {} | {} | {} |", class.class, class.correct, class.total, acc);
            }
        }
        Emittable::Grid(g) => {
            let _ = writeln!(s, "| View selection | Hierarchical prompts | Accuracy (%) |");
            let _ = writeln!(s, "|:---:|:---:|---:|");
            for row in &g.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} |",
                    mark(row.view_selection),
                    mark(row.hierarchical_prompts),
                    pct(row.report.overall_accuracy)
                );
            }
        }
        Emittable::Curve(c) => {
            let _ = writeln!(s, "| {} | Accuracy (%) | Refined |", c.parameter.name());
            let _ = writeln!(s, "|---:|---:|---:|");
            for p in &c.points {
                let _ = writeln!(s, "| {} | {} | {} |", p.value, pct(p.accuracy), p.refined_count);
            }
        }
    }
    s
}
