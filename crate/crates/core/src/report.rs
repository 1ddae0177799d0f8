//! Report emission: a Brier table (epistemic level × model), one MMD curve
//! per (model, level) in a single table, a JSON summary and a Markdown
//! digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{paths, read_json, write_json, EvaluationSummary, Level, MetricEntry, MODELS};

pub const BRIER_TABLE: &str = "report/brier_table.csv";
pub const MMD_TABLE: &str = "report/mmd_curves.csv";
pub const SUMMARY: &str = "report/summary.json";
pub const DIGEST: &str = "report/report.md";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub brier: f64,
    pub mmd_mean: f64,
    pub mmd_final_quarter: f64,
    pub mean_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub config_hash: String,
    pub observed_success_rate: f64,
    /// level → model → metrics.
    pub levels: BTreeMap<String, BTreeMap<String, ModelSummary>>,
}

fn entry<'a>(s: &'a EvaluationSummary, level: Level, model: &str) -> Result<&'a MetricEntry> {
    s.entries
        .iter()
        .find(|e| e.level == level && e.model == model)
        .ok_or_else(|| {
            Error::MissingArtifact(format!(
                "{}: no entry for {model} at level {}",
                paths::EVALUATION,
                level.as_str()
            ))
        })
}

/// Writes the report files under `root/report` from the evaluation summary
/// and returns their paths relative to `root`.
pub fn emit_report(root: &Path) -> Result<Vec<String>> {
    let summary: EvaluationSummary = read_json(&root.join(paths::EVALUATION))?;
    std::fs::create_dir_all(root.join("report"))?;

    let mut brier = format!("level,{}\n", MODELS.join(","));
    for level in Level::ALL {
        brier.push_str(level.as_str());
        for model in MODELS {
            write!(brier, ",{:e}", entry(&summary, level, model)?.brier).expect("string write");
        }
        brier.push('\n');
    }
    std::fs::write(root.join(BRIER_TABLE), &brier)?;

    let series: Vec<(String, &MetricEntry)> = Level::ALL
        .iter()
        .flat_map(|&l| MODELS.iter().map(move |&m| (l, m)))
        .map(|(l, m)| Ok((format!("{m}/{}", l.as_str()), entry(&summary, l, m)?)))
        .collect::<Result<_>>()?;
    let t_len = series[0].1.mmd_curve.len();
    if series.iter().any(|(_, e)| e.mmd_curve.len() != t_len) {
        return Err(Error::dim("mmd curves disagree in horizon"));
    }
    let mut mmd = String::from("t");
    for (name, _) in &series {
        write!(mmd, ",{name}").expect("string write");
    }
    mmd.push('\n');
    for t in 0..t_len {
        write!(mmd, "{}", t + 1).expect("string write");
        for (_, e) in &series {
            write!(mmd, ",{:e}", e.mmd_curve[t]).expect("string write");
        }
        mmd.push('\n');
    }
    std::fs::write(root.join(MMD_TABLE), &mmd)?;

    let mut levels = BTreeMap::new();
    for level in Level::ALL {
        let mut per_model = BTreeMap::new();
        for model in MODELS {
            let e = entry(&summary, level, model)?;
            per_model.insert(
                model.to_string(),
                ModelSummary {
                    brier: e.brier,
                    mmd_mean: e.mmd_mean,
                    mmd_final_quarter: e.mmd_final_quarter,
                    mean_probability: e.mean_probability,
                },
            );
        }
        levels.insert(level.as_str().to_string(), per_model);
    }
    let report = ReportSummary {
        config_hash: summary.config_hash.clone(),
        observed_success_rate: summary.observed_success_rate,
        levels,
    };
    write_json(&root.join(SUMMARY), &report)?;

    let mut md = String::from("# Forecast evaluation\n\n");
    writeln!(md, "Config hash: `{}`\n", report.config_hash).expect("string write");
    writeln!(md, "Observed success rate: {:.4}\n", report.observed_success_rate).expect("string write");
    for (title, pick) in [
        ("Brier score", (|m: &ModelSummary| m.brier) as fn(&ModelSummary) -> f64),
        ("Mean squared MMD", |m| m.mmd_mean),
        ("Mean squared MMD, final quarter of the horizon", |m| {
            m.mmd_final_quarter
        }),
    ] {
        writeln!(md, "## {title}\n\n| epistemic level | {} |", MODELS.join(" | ")).expect("string write");
        writeln!(md, "|---|{}", "---|".repeat(MODELS.len())).expect("string write");
        for level in Level::ALL {
            let row = &report.levels[level.as_str()];
            let cells: Vec<String> = MODELS.iter().map(|m| format!("{:.4}", pick(&row[*m]))).collect();
            writeln!(md, "| {} | {} |", level.as_str(), cells.join(" | ")).expect("string write");
        }
        md.push('\n');
    }
    std::fs::write(root.join(DIGEST), &md)?;

    Ok([BRIER_TABLE, MMD_TABLE, SUMMARY, DIGEST].map(String::from).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        match emit_report(dir.path()) {
            Err(Error::MissingArtifact(msg)) => assert!(msg.contains("metrics.json"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
