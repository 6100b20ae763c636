use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores a hypothesis list against aligned reference sets.
pub trait CaptionScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, hypotheses: &[String], references: &[Vec<String>]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    /// Free-form context such as the layer mode.
    #[serde(default)]
    pub setting: String,
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(dataset: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            setting: String::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied()
    }

    /// Appends the report as one JSON line.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

pub fn caption_metrics(
    hypotheses: &[String],
    references: &[Vec<String>],
    scorers: &[&dyn CaptionScorer],
    dataset: &str,
    model: &str,
) -> Result<MetricReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::argument(format!(
            "{} hypotheses for {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut report = MetricReport::new(dataset, model);
    for s in scorers {
        let v = s.score(hypotheses, references)?;
        if !v.is_finite() {
            return Err(Error::Adapter(format!("{} returned {v}", s.name())));
        }
        report.values.insert(s.name().to_string(), v);
    }
    Ok(report)
}
