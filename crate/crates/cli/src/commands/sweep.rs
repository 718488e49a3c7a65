//! sweep: run the configured learner over several conditions and emit a
//! comparison report.

use std::path::Path;

use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

use super::{write_json, write_text, Aggregate};

/// Conditions covered by a sweep: the primary condition followed by the
/// extras, de-duplicated in order.
pub fn sweep_conditions(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = vec![cfg.condition.clone()];
    for c in &cfg.conditions {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

fn run_learner(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.learner.as_str() {
        "ppo" => super::train::train_ppo(cfg),
        "bc" => super::train::train_bc(cfg),
        "cql" => super::train::train_cql(cfg),
        other => Err(CliError::Config(format!("unknown learner {other:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct ConditionRow {
    condition: String,
    rates: Vec<f64>,
    agg: Aggregate,
    random: Option<f64>,
}

fn load_condition_row(base: &Path, condition: &str) -> Result<ConditionRow> {
    let path = base.join(format!("cond-{condition}")).join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact {
        path: path.clone(),
        producer: "sweep",
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let rates: Vec<f64> = v["success_rates"]
        .as_array()
        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
        .unwrap_or_default();
    let agg = super::aggregate(&rates)?;
    Ok(ConditionRow {
        condition: condition.to_string(),
        rates,
        agg,
        random: v["random_aggregate"].as_f64(),
    })
}

/// Comparison tables over per-condition summaries. The stderr column only
/// exists when more than one seed was run.
pub fn emit_report(out: &Path, rows: &[ConditionRow]) -> Result<()> {
    let with_stderr = rows.iter().any(|r| r.agg.stderr.is_some());
    let mut csv = String::from("condition,n_seeds,success");
    if with_stderr {
        csv.push_str(",stderr");
    }
    csv.push('\n');
    for r in rows {
        csv.push_str(&format!("{},{},{:.6}", r.condition, r.agg.n, r.agg.center));
        if with_stderr {
            csv.push(',');
            csv.push_str(&r.agg.stderr_str());
        }
        csv.push('\n');
    }
    write_text(&out.join("report.csv"), &csv)?;

    let mut txt = String::new();
    let header = if with_stderr {
        format!("{:<18} {:>7} {:>10} {:>10}\n", "condition", "seeds", "success", "stderr")
    } else {
        format!("{:<18} {:>7} {:>10}\n", "condition", "seeds", "success")
    };
    txt.push_str(&header);
    txt.push_str(&"-".repeat(header.trim_end().len()));
    txt.push('\n');
    for r in rows {
        if with_stderr {
            txt.push_str(&format!(
                "{:<18} {:>7} {:>10.4} {:>10}\n",
                r.condition,
                r.agg.n,
                r.agg.center,
                r.agg.stderr.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into())
            ));
        } else {
            txt.push_str(&format!(
                "{:<18} {:>7} {:>10.4}\n",
                r.condition, r.agg.n, r.agg.center
            ));
        }
    }
    write_text(&out.join("report.txt"), &txt)?;
    print!("{txt}");
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let conditions = sweep_conditions(cfg);
    for name in &conditions {
        // Fail early on an unresolvable condition before spending compute.
        cfg.condition_for(name)?;
    }
    for name in &conditions {
        let mut sub = cfg.clone();
        sub.condition = name.clone();
        println!("sweep: condition {name} ({} seeds)", sub.seeds.len());
        run_learner(&sub)?;
    }
    let base = cfg.out.join(&cfg.learner);
    let rows: Vec<ConditionRow> = conditions
        .iter()
        .map(|c| load_condition_row(&base, c))
        .collect::<Result<_>>()?;
    emit_report(&base, &rows)?;
    write_json(
        &base.join("report.json"),
        &json!({
            "task": cfg.task,
            "learner": cfg.learner,
            "conditions": rows
                .iter()
                .map(|r| json!({
                    "condition": r.condition,
                    "success_rates": r.rates,
                    "aggregate": r.agg.center,
                    "aggregate_kind": r.agg.kind,
                    "stderr": r.agg.stderr,
                    "random_aggregate": r.random,
                }))
                .collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}
