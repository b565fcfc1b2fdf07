//! Objective-metric versus subjective-score correlation tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::stats::{least_squares, pearson, spearman};
use super::{AnalysisError, CellTable};
use crate::dataset::DatasetError;
use crate::model::{ConditionId, Family, ItemId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveScoreTable {
    pub metric: String,
    pub orientation: Orientation,
    pub scores: BTreeMap<(ConditionId, ItemId), f64>,
}

#[derive(Debug, Deserialize)]
struct ObjectiveRecord {
    metric: String,
    condition_id: ConditionId,
    item_id: ItemId,
    score: f64,
    #[serde(default)]
    orientation: Option<Orientation>,
}

impl ObjectiveScoreTable {
    /// Reads a `metric,condition_id,item_id,score[,orientation]` table holding
    /// one or more metrics. Metrics without a declared orientation are
    /// higher-better; conflicting declarations for one metric are an error.
    pub fn read_csv<R: Read>(input: R) -> Result<Vec<Self>, AnalysisError> {
        let mut reader = csv::Reader::from_reader(input);
        let mut tables: BTreeMap<String, (Option<Orientation>, BTreeMap<(ConditionId, ItemId), f64>)> =
            BTreeMap::new();
        for rec in reader.deserialize::<ObjectiveRecord>() {
            let rec = rec.map_err(|e| AnalysisError::ObjectiveTable(e.to_string()))?;
            if !rec.score.is_finite() {
                return Err(AnalysisError::ObjectiveTable(format!(
                    "{}: non-finite score for ({}, {})",
                    rec.metric, rec.condition_id, rec.item_id
                )));
            }
            let entry = tables.entry(rec.metric.clone()).or_default();
            match (entry.0, rec.orientation) {
                (Some(a), Some(b)) if a != b => {
                    return Err(AnalysisError::ObjectiveTable(format!(
                        "{}: conflicting orientation",
                        rec.metric
                    )))
                }
                (None, Some(b)) => entry.0 = Some(b),
                _ => {}
            }
            if entry
                .1
                .insert((rec.condition_id.clone(), rec.item_id.clone()), rec.score)
                .is_some()
            {
                return Err(AnalysisError::ObjectiveTable(format!(
                    "{}: duplicate score for ({}, {})",
                    rec.metric, rec.condition_id, rec.item_id
                )));
            }
        }
        Ok(tables
            .into_iter()
            .map(|(metric, (o, scores))| Self {
                metric,
                orientation: o.unwrap_or_default(),
                scores,
            })
            .collect())
    }

    pub fn write_csv<W: Write>(tables: &[Self], out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "condition_id", "item_id", "score", "orientation"])?;
        for t in tables {
            let orientation = match t.orientation {
                Orientation::HigherBetter => "higher-better",
                Orientation::LowerBetter => "lower-better",
            };
            for ((c, i), s) in &t.scores {
                w.write_record([&t.metric, c.as_str(), i.as_str(), &s.to_string(), orientation])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Overall,
    Dsp,
    Dnn,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Overall => "overall",
            Group::Dsp => "dsp",
            Group::Dnn => "dnn",
        })
    }
}

impl Group {
    fn admits(self, family: Family) -> bool {
        match self {
            Group::Overall => true,
            Group::Dsp => family == Family::Dsp,
            Group::Dnn => family == Family::Dnn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub group: Group,
    /// `None` when the coefficient is undefined (fewer than three points or
    /// zero variance).
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub n_points: usize,
    /// Subjective cells in the group with no objective score.
    pub missing_cells: usize,
    pub insufficient_data: bool,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.6}"))
}

impl CorrelationReport {
    pub fn row(&self, metric: &str, group: Group) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.metric == metric && r.group == group)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "metric",
            "group",
            "pearson_r",
            "spearman_rho",
            "n_points",
            "missing_cells",
            "slope",
            "intercept",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.metric.clone(),
                r.group.to_string(),
                fmt_opt(r.pearson_r),
                fmt_opt(r.spearman_rho),
                r.n_points.to_string(),
                r.missing_cells.to_string(),
                fmt_opt(r.slope),
                fmt_opt(r.intercept),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Correlates per-(condition, item) subjective means with one objective
/// metric for all conditions and for each codec family. Signs are reported
/// as computed; lower-better metrics are expected to correlate negatively.
/// The regression line predicts the objective score from the subjective one.
pub fn correlate_objective(
    cells: &CellTable,
    table: &ObjectiveScoreTable,
    families: &BTreeMap<ConditionId, Family>,
) -> CorrelationReport {
    let rows = [Group::Overall, Group::Dsp, Group::Dnn]
        .into_iter()
        .map(|group| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut missing_cells = 0;
            for ((c, i), m) in cells {
                let family = families.get(c).copied().unwrap_or_default();
                if !group.admits(family) {
                    continue;
                }
                match table.scores.get(&(c.clone(), i.clone())) {
                    Some(&obj) => {
                        xs.push(m.mean);
                        ys.push(obj);
                    }
                    None => missing_cells += 1,
                }
            }
            let fit = least_squares(&xs, &ys);
            CorrelationRow {
                metric: table.metric.clone(),
                group,
                pearson_r: pearson(&xs, &ys).ok(),
                spearman_rho: spearman(&xs, &ys).ok(),
                n_points: xs.len(),
                missing_cells,
                insufficient_data: xs.len() < 3,
                slope: fit.map(|f| f.0),
                intercept: fit.map(|f| f.1),
            }
        })
        .collect();
    CorrelationReport { rows }
}
