use std::path::Path;

use serde::{Deserialize, Serialize};

use super::case::{accuracy_diff_report, CaseKind, CaseOutput, CaseSpec, Curve, DiffReport, FailureRecord};
use super::pipeline::ModelKind;
use crate::binio::write_atomic;
use crate::error::{Error, Result};

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub case_kind: CaseKind,
    pub train_session: String,
    pub test_session: String,
    pub model: ModelKind,
    pub model_seed: u64,
    pub failure_seed: Option<u64>,
    pub failure_pct: u32,
    pub accuracy: f64,
}

pub fn result_rows(outputs: &[CaseOutput]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for o in outputs {
        for r in &o.results {
            for v in &r.values {
                rows.push(ResultRow {
                    case_kind: r.kind,
                    train_session: r.train_session.clone(),
                    test_session: r.test_session.clone(),
                    model: r.model,
                    model_seed: v.model_seed,
                    failure_seed: v.failure_seed,
                    failure_pct: r.failure_pct,
                    accuracy: v.accuracy,
                });
            }
        }
    }
    rows
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub spec: CaseSpec,
    pub curve: Curve,
    pub test_leakage: usize,
    pub failures: Vec<FailureRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: Vec<CaseSummary>,
    /// Token pipeline minus CNN baseline for every case run with both.
    pub differences: Vec<DiffReport>,
}

pub fn summarize(outputs: &[CaseOutput]) -> Result<Summary> {
    let cases = outputs
        .iter()
        .map(|o| CaseSummary {
            spec: o.spec.clone(),
            curve: o.curve(),
            test_leakage: o.test_leakage(),
            failures: o.failures.clone(),
        })
        .collect();
    let mut differences = Vec::new();
    for a in outputs.iter().filter(|o| o.spec.model == ModelKind::TokenPipeline) {
        let twin = outputs.iter().find(|b| {
            b.spec.model == ModelKind::CnnBaseline
                && b.spec.kind == a.spec.kind
                && b.spec.train_session == a.spec.train_session
                && b.spec.test_session == a.spec.test_session
                && b.spec.failure_pcts == a.spec.failure_pcts
        });
        if let Some(b) = twin {
            differences.push(accuracy_diff_report(&a.results, &b.results)?);
        }
    }
    Ok(Summary { cases, differences })
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`, each atomically.
pub fn write_results(dir: &Path, stem: &str, outputs: &[CaseOutput]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(format!("{stem}.csv")), &rows_to_csv(&result_rows(outputs))?)?;
    let json = serde_json::to_vec_pretty(&summarize(outputs)?)?;
    write_atomic(&dir.join(format!("{stem}.json")), &json)
}
