//! Evaluation summaries: per-task MSE, mean, and 95% confidence interval.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// Mean and 95% half-width `1.96 · sd / sqrt(n)`, sample sd with `n − 1`.
///
/// A single value has half-width 0.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64), eeml_core::Error> {
    if values.is_empty() {
        return Err(eeml_core::Error::InvalidInput("confidence interval of an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        warn!("confidence interval from a single sample; reporting half-width 0");
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub shots: usize,
    pub q_query: usize,
    pub n_tasks: usize,
    pub mean: f64,
    pub ci_half_width: f64,
    /// Mean MSE per function family, keyed by family name.
    pub family_means: BTreeMap<String, f64>,
    pub config_hash: String,
    /// SHA-256 of each checkpoint the report was computed from.
    pub checkpoints: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub per_task: Vec<TaskResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub index: usize,
    pub family: &'static str,
    pub mse: f64,
}

impl MetricsReport {
    pub fn from_tasks(
        method: &str,
        shots: usize,
        q_query: usize,
        per_task: Vec<TaskResult>,
        config_hash: String,
    ) -> Result<Self, eeml_core::Error> {
        let mses: Vec<f64> = per_task.iter().map(|t| t.mse).collect();
        let (mean, ci_half_width) = confidence_interval(&mses)?;
        let mut warnings = Vec::new();
        if per_task.len() == 1 {
            warnings.push("single evaluation task: confidence half-width reported as 0".to_string());
        }
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for t in &per_task {
            let e = sums.entry(t.family.to_string()).or_default();
            e.0 += t.mse;
            e.1 += 1;
        }
        Ok(MetricsReport {
            method: method.to_string(),
            shots,
            q_query,
            n_tasks: per_task.len(),
            mean,
            ci_half_width,
            family_means: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            config_hash,
            checkpoints: BTreeMap::new(),
            warnings,
            per_task,
        })
    }

    pub fn mses(&self) -> Vec<f64> {
        self.per_task.iter().map(|t| t.mse).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,family,mse\n");
        for t in &self.per_task {
            writeln!(out, "{},{},{:?}", t.index, t.family, t.mse).unwrap();
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), HarnessError> {
        write_file(&dir.join(format!("{stem}.json")), &self.to_json())?;
        write_file(&dir.join(format!("{stem}.csv")), &self.to_csv())
    }
}

/// Paired EEML vs MAML summary over the same evaluation tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub eeml: MetricsReport,
    pub maml: MetricsReport,
    /// `eeml.mean / maml.mean`.
    pub ratio: f64,
    /// Tasks on which EEML had the lower MSE.
    pub eeml_wins: usize,
}

impl Comparison {
    pub fn new(eeml: MetricsReport, maml: MetricsReport) -> Self {
        let eeml_wins = eeml
            .per_task
            .iter()
            .zip(&maml.per_task)
            .filter(|(e, m)| e.mse < m.mse)
            .count();
        Comparison {
            ratio: eeml.mean / maml.mean,
            eeml_wins,
            eeml,
            maml,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }
}

/// `step,mean_query_loss` rows.
pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("step,mean_query_loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{i},{l:?}").unwrap();
    }
    out
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}
