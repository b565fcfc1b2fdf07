//! Plot-ready tables: per-condition means with intervals, and per-cell
//! subjective/objective scatter points.

use std::collections::BTreeMap;
use std::io::Write;

use super::correlation::{ObjectiveScoreTable, Orientation};
use super::{summarize_cells, CellTable};
use crate::dataset::DatasetError;
use crate::model::{ConditionId, Family, ItemId};

#[derive(Debug, Clone, PartialEq)]
pub struct MeanRow {
    pub condition_id: ConditionId,
    pub grand_mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_items: usize,
    pub n_scores: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub condition_id: ConditionId,
    pub item_id: ItemId,
    pub family: Family,
    pub subjective: f64,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FigureData {
    pub means: Vec<MeanRow>,
    pub scatter: Vec<ScatterRow>,
    pub metric: Option<String>,
    /// Plotters should reverse the objective axis (lower-better metric).
    pub reverse_objective_axis: bool,
}

const MEAN_HEADER: [&str; 6] = ["condition_id", "grand_mean", "ci_low", "ci_high", "n_items", "n_scores"];
const SCATTER_HEADER: [&str; 6] = ["condition_id", "item_id", "family", "subjective", "metric", "objective"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Builds figure tables from a (possibly merged) cell table. Mean rows follow
/// `order` first, then any remaining conditions by id.
pub fn emit_figure_data(
    cells: &CellTable,
    order: &[ConditionId],
    families: &BTreeMap<ConditionId, Family>,
    objective: Option<&ObjectiveScoreTable>,
) -> FigureData {
    let mut conditions: Vec<ConditionId> = order.to_vec();
    for (c, _) in cells.keys() {
        if !conditions.contains(c) {
            conditions.push(c.clone());
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    conditions.retain(|c| seen.insert(c.clone()));

    let means = conditions
        .iter()
        .filter_map(|c| summarize_cells(cells, c))
        .map(|s| MeanRow {
            condition_id: s.condition_id,
            grand_mean: s.grand_mean,
            ci_low: s.ci95.map(|c| c.0),
            ci_high: s.ci95.map(|c| c.1),
            n_items: s.n_items,
            n_scores: s.n_scores,
        })
        .collect();
    let scatter = cells
        .iter()
        .map(|((c, i), m)| ScatterRow {
            condition_id: c.clone(),
            item_id: i.clone(),
            family: families.get(c).copied().unwrap_or_default(),
            subjective: m.mean,
            objective: objective.and_then(|t| t.scores.get(&(c.clone(), i.clone())).copied()),
        })
        .collect();
    FigureData {
        means,
        scatter,
        metric: objective.map(|t| t.metric.clone()),
        reverse_objective_axis: objective.is_some_and(|t| t.orientation == Orientation::LowerBetter),
    }
}

impl FigureData {
    pub fn write_means_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(MEAN_HEADER)?;
        for r in &self.means {
            w.write_record([
                r.condition_id.to_string(),
                r.grand_mean.to_string(),
                cell(r.ci_low),
                cell(r.ci_high),
                r.n_items.to_string(),
                r.n_scores.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_scatter_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SCATTER_HEADER)?;
        let metric = self.metric.clone().unwrap_or_default();
        for r in &self.scatter {
            w.write_record([
                r.condition_id.to_string(),
                r.item_id.to_string(),
                r.family.to_string(),
                r.subjective.to_string(),
                metric.clone(),
                cell(r.objective),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::CellMean;

    fn cells(n_conditions: usize, n_items: usize) -> CellTable {
        let mut t = CellTable::new();
        for c in 0..n_conditions {
            for i in 0..n_items {
                t.insert(
                    (ConditionId(format!("c{c}")), ItemId(format!("i{i:02}"))),
                    CellMean { mean: 10.0 * c as f64 + i as f64, n: 3 },
                );
            }
        }
        t
    }

    #[test]
    fn row_counts() {
        let fig = emit_figure_data(&cells(6, 40), &[], &BTreeMap::new(), None);
        assert_eq!(fig.means.len(), 6);
        assert_eq!(fig.scatter.len(), 240);
        assert!(!fig.reverse_objective_axis);
    }

    #[test]
    fn order_respected_then_rest() {
        let fig = emit_figure_data(
            &cells(3, 2),
            &[ConditionId::new("c2"), ConditionId::new("missing")],
            &BTreeMap::new(),
            None,
        );
        let ids: Vec<&str> = fig.means.iter().map(|m| m.condition_id.as_str()).collect();
        assert_eq!(ids, ["c2", "c0", "c1"]);
    }

    #[test]
    fn empty_input_writes_headers_only() {
        let fig = emit_figure_data(&CellTable::new(), &[], &BTreeMap::new(), None);
        let mut m = Vec::new();
        fig.write_means_csv(&mut m).unwrap();
        assert_eq!(String::from_utf8(m).unwrap(), MEAN_HEADER.join(",") + "\n");
        let mut s = Vec::new();
        fig.write_scatter_csv(&mut s).unwrap();
        assert_eq!(String::from_utf8(s).unwrap(), SCATTER_HEADER.join(",") + "\n");
    }

    #[test]
    fn lower_better_metric_reverses_axis() {
        let c = cells(2, 3);
        let t = ObjectiveScoreTable {
            metric: "scoreq".into(),
            orientation: Orientation::LowerBetter,
            scores: c.iter().map(|(k, m)| (k.clone(), 1.0 - m.mean / 100.0)).collect(),
        };
        let fig = emit_figure_data(&c, &[], &BTreeMap::new(), Some(&t));
        assert!(fig.reverse_objective_axis);
        assert!(fig.scatter.iter().all(|r| r.objective.is_some()));
        let mut s = Vec::new();
        fig.write_scatter_csv(&mut s).unwrap();
        let text = String::from_utf8(s).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(1).unwrap().starts_with("c0,i00,none,0,scoreq,1"));
    }
}
