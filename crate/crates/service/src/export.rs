//! Campaign exports: raw scores, screened scores and the analysis report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crowdmushra_core::analysis::{
    cell_means, correlate_objective, ranking, ranking_stability, summarize_all, ConditionSummary,
    CorrelationReport, RankingStability,
};
use crowdmushra_core::dataset::{Dataset, ScoreRow};
use crowdmushra_core::model::{ConditionId, ExperimentId, Family};
use crowdmushra_core::screening::{post_screen, ScreeningReport};

use crate::engine::Engine;
use crate::error::ServiceError;

pub const STABILITY_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFlavor {
    Raw,
    Clean,
    Report,
}

impl std::str::FromStr for ExportFlavor {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(ExportFlavor::Raw),
            "clean" => Ok(ExportFlavor::Clean),
            "report" => Ok(ExportFlavor::Report),
            other => Err(ServiceError::NotFound(format!("export flavor {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub experiment_id: ExperimentId,
    pub screening: ScreeningReport,
    pub summaries: Vec<ConditionSummary>,
    pub ranking: Vec<ConditionId>,
    pub ranking_stability: RankingStability,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub correlations: Vec<CorrelationReport>,
}

/// Every submitted block rating, including blocks rejected in real time
/// (flagged `discarded`), in canonical row order.
pub fn raw_dataset(engine: &Engine, experiment_id: &ExperimentId) -> Result<Dataset, ServiceError> {
    engine.experiment(experiment_id)?;
    let mut rows = Vec::new();
    for s in engine.sessions.values().filter(|s| &s.experiment_id == experiment_id) {
        for block in &s.finished_blocks {
            for r in &block.ratings {
                for c in &r.scores {
                    rows.push(ScoreRow {
                        experiment_id: experiment_id.clone(),
                        listener_id: s.listener_id.clone(),
                        block_id: block.block_id,
                        question_id: r.question_id.clone(),
                        item_id: r.item_id.clone(),
                        condition_id: c.condition_id.clone(),
                        role: c.role,
                        score: c.score,
                        discarded: !block.accepted,
                    });
                }
            }
        }
    }
    let mut ds = Dataset::new(rows);
    ds.sort();
    Ok(ds)
}

pub fn clean_dataset(
    engine: &Engine,
    experiment_id: &ExperimentId,
) -> Result<(Dataset, ScreeningReport), ServiceError> {
    let raw = raw_dataset(engine, experiment_id)?;
    let cfg = &engine.experiment(experiment_id)?.config.screening;
    Ok(post_screen(&raw, cfg))
}

pub fn report(engine: &Engine, experiment_id: &ExperimentId) -> Result<CampaignReport, ServiceError> {
    let exp = engine.experiment(experiment_id)?;
    let (clean, screening) = clean_dataset(engine, experiment_id)?;
    let cells = cell_means(&clean);
    let ids: Vec<ConditionId> = exp.config.conditions.iter().map(|c| c.id.clone()).collect();
    let summaries = summarize_all(&cells, &ids);
    let families: BTreeMap<ConditionId, Family> =
        exp.config.conditions.iter().map(|c| (c.id.clone(), c.family)).collect();
    let correlations = exp
        .objective
        .iter()
        .map(|t| correlate_objective(&cells, t, &families))
        .collect();
    Ok(CampaignReport {
        experiment_id: experiment_id.clone(),
        ranking: ranking(&summaries),
        ranking_stability: ranking_stability(&cells, STABILITY_RESAMPLES, exp.config.seed),
        screening,
        summaries,
        correlations,
    })
}

/// Serialized export body and its media type.
pub fn export(
    engine: &Engine,
    experiment_id: &ExperimentId,
    flavor: ExportFlavor,
) -> Result<(Vec<u8>, &'static str), ServiceError> {
    let storage = |e: crowdmushra_core::dataset::DatasetError| ServiceError::Storage(e.to_string());
    let mut out = Vec::new();
    match flavor {
        ExportFlavor::Raw => {
            raw_dataset(engine, experiment_id)?.write_csv(&mut out).map_err(storage)?;
            Ok((out, "text/csv"))
        }
        ExportFlavor::Clean => {
            clean_dataset(engine, experiment_id)?.0.write_csv(&mut out).map_err(storage)?;
            Ok((out, "text/csv"))
        }
        ExportFlavor::Report => {
            let r = report(engine, experiment_id)?;
            out = serde_json::to_vec_pretty(&r).map_err(|e| ServiceError::Storage(e.to_string()))?;
            Ok((out, "application/json"))
        }
    }
}
