//! Figure tables and ANOVA summaries built from a finished run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use influence_core::loo::ValidationReport;
use influence_core::stats::{anova_oneway, interval95, quantile_sorted, IntervalMethod};
use serde::de::DeserializeOwned;

use crate::commands::{EigenRow, SummaryRow, EIGEN_FILE, REPORT_FILE, SUMMARY_FILE};
use crate::config::{Arm, Cell};
use crate::rundir::{write_atomic, RunDir};
use crate::CliError;

pub const FIG1: &str = "fig1.csv";
pub const FIG3: &str = "fig3.csv";
pub const FIG4: &str = "fig4.csv";
pub const FIG5: &str = "fig5.csv";
pub const ANOVA: &str = "anova.csv";

pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect::<Result<_, _>>().map_err(Into::into)
}

type Key = (String, usize, usize);

fn key(arm: &str, depth: usize, width: usize) -> Key {
    (arm.to_string(), depth, width)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Other(e.to_string()))
}

/// Median and 95% percentile interval per cell.
fn interval_table(groups: &BTreeMap<Key, Vec<f64>>) -> Result<Vec<Vec<String>>, CliError> {
    let mut rows = Vec::new();
    for ((arm, depth, width), v) in groups {
        if v.is_empty() {
            continue;
        }
        let (lo, hi) = if v.len() == 1 {
            (v[0], v[0])
        } else {
            let iv = interval95(v, IntervalMethod::Percentile).map_err(|e| CliError::Other(e.to_string()))?;
            (iv.low, iv.high)
        };
        rows.push(vec![
            arm.clone(),
            depth.to_string(),
            width.to_string(),
            v.len().to_string(),
            median(v).to_string(),
            lo.to_string(),
            hi.to_string(),
        ]);
    }
    Ok(rows)
}

/// One-way ANOVA rows across sizes within each arm, and across arms within
/// each size.
fn anova_rows(metric: &str, groups: &BTreeMap<Key, Vec<f64>>) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut emit = |factor: &str, arm: &str, size: &str, gs: Vec<Vec<f64>>| {
        let n = gs.len().to_string();
        let mut row = vec![metric.to_string(), factor.to_string(), arm.to_string(), size.to_string(), n];
        match anova_oneway(&gs) {
            // a degenerate table has an infinite F; the flag column says so
            Ok(a) => row.extend([
                if a.f_stat.is_finite() { a.f_stat.to_string() } else { String::new() },
                a.p_value.to_string(),
                a.df_between.to_string(),
                a.df_within.to_string(),
                a.degenerate.to_string(),
                "ok".into(),
                String::new(),
            ]),
            Err(e) => row.extend([String::new(), String::new(), String::new(), String::new(), String::new(), "skipped".into(), e.to_string()]),
        }
        out.push(row);
    };
    let mut by_arm: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    let mut by_size: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for ((arm, depth, width), v) in groups {
        by_arm.entry(arm).or_default().push(v.clone());
        by_size.entry((*depth, *width)).or_default().push(v.clone());
    }
    for (arm, gs) in by_arm {
        if gs.len() >= 2 {
            emit("size", arm, "all", gs);
        }
    }
    for ((d, w), gs) in by_size {
        if gs.len() >= 2 {
            emit("arm", "all", &format!("d{d}-w{w}"), gs);
        }
    }
    out
}

/// Reports of all successful validation rows, in summary order.
fn load_reports(run: &RunDir, rows: &[SummaryRow], missing: &mut Vec<String>) -> Vec<(SummaryRow, ValidationReport)> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        let Some(arm) = Arm::parse(&r.arm) else {
            missing.push(format!("known arm for summary row {}", r.arm));
            continue;
        };
        let cell = Cell {
            arm,
            depth: r.depth,
            width: r.width,
        };
        let p = run.cell_dir(cell, r.repetition).join(REPORT_FILE);
        match fs::read_to_string(&p).ok().and_then(|s| serde_json::from_str::<ValidationReport>(&s).ok()) {
            Some(rep) => out.push((r.clone(), rep)),
            None => missing.push(p.display().to_string()),
        }
    }
    out
}

pub fn cmd_report(run_path: &Path) -> Result<(), CliError> {
    let run = RunDir::open(run_path)?;
    let mut missing = Vec::new();
    for f in ["config.toml", SUMMARY_FILE, EIGEN_FILE] {
        if !run.join(f).exists() {
            missing.push(run.join(f).display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Incomplete(missing));
    }
    let summary: Vec<SummaryRow> = read_rows(&run.join(SUMMARY_FILE))?;
    let eigen: Vec<EigenRow> = read_rows(&run.join(EIGEN_FILE))?;
    let reports = load_reports(&run, &summary, &mut missing);
    if !missing.is_empty() {
        return Err(CliError::Incomplete(missing));
    }

    let mut rho: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in &summary {
        let e = rho.entry(key(&r.arm, r.depth, r.width)).or_default();
        if let Some(s) = r.spearman {
            e.push(s);
        }
    }
    let mut lambda: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in &eigen {
        let e = lambda.entry(key(&r.arm, r.depth, r.width)).or_default();
        if let Some(l) = r.lambda_max {
            e.push(l);
        }
    }
    let h1 = ["arm", "depth", "width", "n", "spearman_median", "lo95", "hi95"];
    let h3 = ["arm", "depth", "width", "n", "lambda_max_median", "lo95", "hi95"];
    write_atomic(&run.join(FIG1), &csv_bytes(&h1, &interval_table(&rho)?)?)?;
    write_atomic(&run.join(FIG3), &csv_bytes(&h3, &interval_table(&lambda)?)?)?;

    let mut fig4 = Vec::new();
    let mut fig5 = Vec::new();
    for (row, rep) in &reports {
        let mut recs: Vec<_> = rep.records.iter().collect();
        recs.sort_by(|a, b| b.approx_loss_diff.abs().total_cmp(&a.approx_loss_diff.abs()).then(a.train_index.cmp(&b.train_index)));
        for (rank, rec) in recs.iter().enumerate() {
            fig4.push(vec![
                row.arm.clone(),
                row.depth.to_string(),
                row.width.to_string(),
                row.repetition.to_string(),
                (rank + 1).to_string(),
                rec.train_index.to_string(),
                rec.approx_loss_diff.to_string(),
                rec.true_loss_diff.map_or(String::new(), |t| t.to_string()),
                rec.reason.clone().unwrap_or_default(),
            ]);
        }
        for rec in &rep.records {
            for s in &rec.trajectory {
                fig5.push(vec![
                    row.arm.clone(),
                    row.depth.to_string(),
                    row.width.to_string(),
                    row.repetition.to_string(),
                    rec.train_index.to_string(),
                    s.epoch.to_string(),
                    s.test_loss.to_string(),
                ]);
            }
        }
    }
    write_atomic(
        &run.join(FIG4),
        &csv_bytes(&["arm", "depth", "width", "rep", "rank", "train_index", "approx_diff", "true_diff", "reason"], &fig4)?,
    )?;
    write_atomic(&run.join(FIG5), &csv_bytes(&["arm", "depth", "width", "rep", "train_index", "epoch", "test_loss"], &fig5)?)?;

    let mut anova = anova_rows("spearman", &rho);
    anova.extend(anova_rows("lambda_max", &lambda));
    write_atomic(
        &run.join(ANOVA),
        &csv_bytes(
            &["metric", "factor", "arm", "size", "groups", "f_stat", "p_value", "df_between", "df_within", "degenerate", "status", "reason"],
            &anova,
        )?,
    )?;
    for r in anova.iter().filter(|r| r[10] == "ok") {
        println!("ANOVA {} across {} ({} {}): F = {}, p = {}", r[0], r[1], r[2], r[3], r[5], r[6]);
    }
    println!("figure tables written to {}", run.path().display());
    Ok(())
}
