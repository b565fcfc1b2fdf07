//! Renormalization onto a common reference/anchor scale and merging of
//! experiments that share the same reference and anchor conditions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{summarize_cells, AnalysisError, CellMean, CellTable};
use crate::model::{ConditionId, ItemId};

/// Affine map sending the experiment's reference mean to 100 and its anchor
/// mean to the target anchor level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Renormalizer {
    pub reference_mean: f64,
    pub anchor_mean: f64,
    pub target_anchor: f64,
}

impl Renormalizer {
    pub fn new(reference_mean: f64, anchor_mean: f64, target_anchor: f64) -> Result<Self, AnalysisError> {
        if !(anchor_mean < reference_mean) {
            return Err(AnalysisError::DegenerateExperiment {
                experiment: String::new(),
                reference: reference_mean,
                anchor: anchor_mean,
            });
        }
        Ok(Self {
            reference_mean,
            anchor_mean,
            target_anchor,
        })
    }

    pub fn slope(&self) -> f64 {
        (self.target_anchor - 100.0) / (self.anchor_mean - self.reference_mean)
    }

    /// The map before clamping.
    pub fn map_unclamped(&self, s: f64) -> f64 {
        100.0 + (s - self.reference_mean) * self.slope()
    }

    pub fn map(&self, s: f64) -> f64 {
        self.map_unclamped(s).clamp(0.0, 100.0)
    }
}

/// Maps every score of one experiment onto the common scale, clamped to [0, 100].
pub fn renormalize(
    scores: &[f64],
    reference_mean: f64,
    anchor_mean: f64,
    target_anchor: f64,
) -> Result<Vec<f64>, AnalysisError> {
    let r = Renormalizer::new(reference_mean, anchor_mean, target_anchor)?;
    Ok(scores.iter().map(|&s| r.map(s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeMember {
    pub experiment_id: String,
    pub cells: CellTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub members: Vec<MergeMember>,
    pub reference: ConditionId,
    pub anchor: ConditionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedTable {
    pub target_anchor: f64,
    pub renormalizers: Vec<(String, Renormalizer)>,
    /// Mapped per-(condition, item) means; `n` is the summed vote count.
    pub cells: CellTable,
}

/// Merges experiments onto one scale. The target anchor level is the
/// unweighted mean of the members' anchor grand means; cells present in
/// several members are averaged with weights equal to their vote counts.
pub fn merge_experiments(spec: &MergeSpec) -> Result<MergedTable, AnalysisError> {
    if spec.members.is_empty() {
        return Err(AnalysisError::EmptyMerge);
    }
    let grand = |m: &MergeMember, c: &ConditionId| {
        summarize_cells(&m.cells, c)
            .map(|s| s.grand_mean)
            .ok_or_else(|| AnalysisError::MissingSharedCondition {
                experiment: m.experiment_id.clone(),
                condition: c.clone(),
            })
    };
    let mut means = Vec::with_capacity(spec.members.len());
    for m in &spec.members {
        means.push((grand(m, &spec.reference)?, grand(m, &spec.anchor)?));
    }
    let target_anchor = means.iter().map(|(_, a)| a).sum::<f64>() / means.len() as f64;

    let mut renormalizers = Vec::new();
    let mut acc: BTreeMap<(ConditionId, ItemId), (f64, usize)> = BTreeMap::new();
    for (m, (r_t, a_t)) in spec.members.iter().zip(means) {
        let map = Renormalizer::new(r_t, a_t, target_anchor).map_err(|_| {
            AnalysisError::DegenerateExperiment {
                experiment: m.experiment_id.clone(),
                reference: r_t,
                anchor: a_t,
            }
        })?;
        for (key, cell) in &m.cells {
            let e = acc.entry(key.clone()).or_default();
            e.0 += map.map(cell.mean) * cell.n as f64;
            e.1 += cell.n;
        }
        renormalizers.push((m.experiment_id.clone(), map));
    }
    let cells = acc
        .into_iter()
        .map(|(k, (sum, n))| (k, CellMean { mean: sum / n as f64, n }))
        .collect();
    Ok(MergedTable {
        target_anchor,
        renormalizers,
        cells,
    })
}
