//! Aggregation of screened scores: per-condition summaries with confidence
//! intervals, cross-experiment merging, objective-metric correlation and
//! plot data.

pub mod correlation;
pub mod figures;
pub mod merge;
pub mod stats;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{ConditionId, ItemId};

pub use correlation::{correlate_objective, CorrelationReport, ObjectiveScoreTable, Orientation};
pub use merge::{merge_experiments, renormalize, MergeMember, MergeSpec, MergedTable, Renormalizer};
pub use stats::{pearson, spearman, CorrelationError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("experiment {experiment}: anchor mean {anchor} is not below reference mean {reference}")]
    DegenerateExperiment {
        experiment: String,
        reference: f64,
        anchor: f64,
    },
    #[error("merge needs at least one member experiment")]
    EmptyMerge,
    #[error("experiment {experiment} has no scores for shared condition {condition}")]
    MissingSharedCondition {
        experiment: String,
        condition: ConditionId,
    },
    #[error("objective table: {0}")]
    ObjectiveTable(String),
}

/// Mean score of one (condition, item) cell across listeners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub mean: f64,
    pub n: usize,
}

pub type CellTable = BTreeMap<(ConditionId, ItemId), CellMean>;

/// Per-cell means over the non-discarded rows of a screened dataset.
pub fn cell_means(clean: &Dataset) -> CellTable {
    let mut sums: BTreeMap<(ConditionId, ItemId), (f64, usize)> = BTreeMap::new();
    for r in clean.rows.iter().filter(|r| !r.discarded) {
        let e = sums
            .entry((r.condition_id.clone(), r.item_id.clone()))
            .or_default();
        e.0 += r.score as f64;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (sum, n))| (k, CellMean { mean: sum / n as f64, n }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition_id: ConditionId,
    pub per_item_means: BTreeMap<ItemId, f64>,
    /// Mean of the per-item means; items weigh equally regardless of votes.
    pub grand_mean: f64,
    /// 95% t-interval over per-item means, `None` with a single item.
    pub ci95: Option<(f64, f64)>,
    pub n_items: usize,
    pub n_scores: usize,
}

/// Summary from a cell table; `None` when the condition has no cells.
pub fn summarize_cells(cells: &CellTable, condition: &ConditionId) -> Option<ConditionSummary> {
    let per_item: BTreeMap<ItemId, (f64, usize)> = cells
        .iter()
        .filter(|((c, _), _)| c == condition)
        .map(|((_, i), m)| (i.clone(), (m.mean, m.n)))
        .collect();
    if per_item.is_empty() {
        return None;
    }
    let means: Vec<f64> = per_item.values().map(|v| v.0).collect();
    let grand_mean = means.iter().sum::<f64>() / means.len() as f64;
    Some(ConditionSummary {
        condition_id: condition.clone(),
        n_items: per_item.len(),
        n_scores: per_item.values().map(|v| v.1).sum(),
        per_item_means: per_item.into_iter().map(|(k, v)| (k, v.0)).collect(),
        grand_mean,
        ci95: stats::t_interval_95(&means),
    })
}

pub fn summarize_condition(clean: &Dataset, condition: &ConditionId) -> Option<ConditionSummary> {
    summarize_cells(&cell_means(clean), condition)
}

/// Summaries for every condition in `conditions` that has data, in that order.
pub fn summarize_all<'a>(
    cells: &CellTable,
    conditions: impl IntoIterator<Item = &'a ConditionId>,
) -> Vec<ConditionSummary> {
    conditions
        .into_iter()
        .filter_map(|c| summarize_cells(cells, c))
        .collect()
}

/// Condition ids ordered by descending grand mean (ties by id).
pub fn ranking(summaries: &[ConditionSummary]) -> Vec<ConditionId> {
    let mut v: Vec<&ConditionSummary> = summaries.iter().collect();
    v.sort_by(|a, b| {
        b.grand_mean
            .total_cmp(&a.grand_mean)
            .then_with(|| a.condition_id.cmp(&b.condition_id))
    });
    v.into_iter().map(|s| s.condition_id.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingStability {
    pub resamples: usize,
    pub unchanged: usize,
    pub unchanged_fraction: f64,
    /// Ranking unchanged in at least 95% of resamples.
    pub stable: bool,
}

/// Bootstrap over items: resample the item set with replacement, recompute
/// grand means per condition and count how often the ranking is unchanged.
pub fn ranking_stability(cells: &CellTable, resamples: usize, seed: u64) -> RankingStability {
    let mut items: Vec<&ItemId> = cells.keys().map(|(_, i)| i).collect();
    items.sort();
    items.dedup();
    let mut conditions: Vec<&ConditionId> = cells.keys().map(|(c, _)| c).collect();
    conditions.sort();
    conditions.dedup();

    let rank_for = |sample: &[&ItemId]| -> Vec<ConditionId> {
        let summaries: Vec<ConditionSummary> = conditions
            .iter()
            .filter_map(|c| {
                let vals: Vec<f64> = sample
                    .iter()
                    .filter_map(|i| cells.get(&((*c).clone(), (*i).clone())).map(|m| m.mean))
                    .collect();
                (!vals.is_empty()).then(|| ConditionSummary {
                    condition_id: (*c).clone(),
                    per_item_means: BTreeMap::new(),
                    grand_mean: vals.iter().sum::<f64>() / vals.len() as f64,
                    ci95: None,
                    n_items: vals.len(),
                    n_scores: 0,
                })
            })
            .collect();
        ranking(&summaries)
    };

    let full = rank_for(&items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unchanged = 0;
    for _ in 0..resamples {
        let sample: Vec<&ItemId> = (0..items.len())
            .map(|_| items[rng.random_range(0..items.len())])
            .collect();
        if rank_for(&sample) == full {
            unchanged += 1;
        }
    }
    let unchanged_fraction = if resamples == 0 {
        1.0
    } else {
        unchanged as f64 / resamples as f64
    };
    RankingStability {
        resamples,
        unchanged,
        unchanged_fraction,
        stable: unchanged_fraction >= 0.95,
    }
}
