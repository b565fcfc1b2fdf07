//! Response screening.
//!
//! Two per-question checks drive everything here: the anchor rated above the
//! hidden reference, and zero variance across the non-anchor scores (hidden
//! reference included, anchor excluded). A block is rejected when the number
//! of failed questions exceeds `max(fraction * Q, min_failure_threshold)`.
//! The same rule runs in real time on each submitted block and offline over a
//! closed campaign, followed by a single pass of per-cell IQR outlier removal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, ScoreKey};
use crate::model::{
    BlockId, ConditionId, ItemId, ListenerId, ModelError, MushraQuestion, QuestionId, RatingSet,
    ResolvedRating, Role,
};
use crate::partition::TestBlock;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningConfig {
    /// Fraction of a block's questions that may fail before the listener is dropped.
    pub disqualify_fraction: f64,
    /// Floor applied to `disqualify_fraction * Q`.
    pub min_failure_threshold: u32,
    pub iqr_multiplier: f64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            disqualify_fraction: 0.20,
            min_failure_threshold: 1,
            iqr_multiplier: 1.5,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScreeningError {
    #[error("block {block} is incomplete, unrated items: {missing:?}")]
    IncompleteBlock { block: BlockId, missing: Vec<ItemId> },
    #[error("block {block} has ratings for items outside the block: {extra:?}")]
    ForeignRatings { block: BlockId, extra: Vec<ItemId> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    AnchorAboveReference,
    ZeroVariance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionCheck {
    pub question_id: QuestionId,
    pub listener_id: ListenerId,
    pub failed: bool,
    pub reasons: Vec<FailureReason>,
}

/// Runs both checks on an already resolved rating.
///
/// The anchor check needs both the reference and the anchor score; the
/// variance check needs at least two non-anchor scores. Integer scores have
/// zero variance exactly when they are all equal.
pub fn check_resolved(rating: &ResolvedRating) -> QuestionCheck {
    let mut reasons = Vec::new();
    if let (Some(anchor), Some(reference)) = (rating.anchor_score(), rating.reference_score()) {
        if anchor > reference {
            reasons.push(FailureReason::AnchorAboveReference);
        }
    }
    let mut non_anchor = rating
        .scores
        .iter()
        .filter(|s| s.role != Role::Anchor)
        .map(|s| s.score);
    if let Some(first) = non_anchor.next() {
        let mut count = 1;
        let mut all_equal = true;
        for s in non_anchor {
            count += 1;
            all_equal &= s == first;
        }
        if count >= 2 && all_equal {
            reasons.push(FailureReason::ZeroVariance);
        }
    }
    QuestionCheck {
        question_id: rating.question_id.clone(),
        listener_id: rating.listener_id.clone(),
        failed: !reasons.is_empty(),
        reasons,
    }
}

pub fn check_question(
    ratings: &RatingSet,
    question: &MushraQuestion,
) -> Result<QuestionCheck, ModelError> {
    Ok(check_resolved(&question.resolve(ratings)?))
}

/// `max(fraction * questions, floor)`, with products within 1e-9 of an
/// integer snapped to it so that e.g. 0.2 * 10 compares as exactly 2.
pub fn failure_threshold(questions: usize, fraction: f64, floor: u32) -> f64 {
    let raw = fraction * questions as f64;
    let snapped = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw
    };
    snapped.max(floor as f64)
}

/// Strict comparison: exactly `threshold` failures is still acceptable.
pub fn exceeds_threshold(failures: usize, questions: usize, cfg: &ScreeningConfig) -> bool {
    failures as f64 > failure_threshold(questions, cfg.disqualify_fraction, cfg.min_failure_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockVerdict {
    pub questions: usize,
    pub failures: usize,
    pub threshold: f64,
    pub rejected: bool,
    pub checks: Vec<QuestionCheck>,
}

pub fn verdict_from_checks(checks: Vec<QuestionCheck>, cfg: &ScreeningConfig) -> BlockVerdict {
    let questions = checks.len();
    let failures = checks.iter().filter(|c| c.failed).count();
    BlockVerdict {
        questions,
        failures,
        threshold: failure_threshold(questions, cfg.disqualify_fraction, cfg.min_failure_threshold),
        rejected: exceeds_threshold(failures, questions, cfg),
        checks,
    }
}

/// Screens one submitted block. Every item of the block must be rated exactly once.
pub fn realtime_screen(
    ratings: &[RatingSet],
    questions: &[MushraQuestion],
    block: &TestBlock,
    cfg: &ScreeningConfig,
) -> Result<BlockVerdict, ScreeningError> {
    let by_id: BTreeMap<&QuestionId, &MushraQuestion> =
        questions.iter().map(|q| (&q.question_id, q)).collect();
    let mut resolved: BTreeMap<ItemId, ResolvedRating> = BTreeMap::new();
    let mut extra = Vec::new();
    for r in ratings {
        let q = by_id
            .get(&r.question_id)
            .ok_or_else(|| ModelError::QuestionMismatch {
                expected: QuestionId::new("<question of this block>"),
                got: r.question_id.clone(),
            })?;
        let rr = q.resolve(r)?;
        if !block.contains_item(&rr.item_id) {
            extra.push(rr.item_id.clone());
            continue;
        }
        resolved.insert(rr.item_id.clone(), rr);
    }
    if !extra.is_empty() {
        return Err(ScreeningError::ForeignRatings {
            block: block.block_id,
            extra,
        });
    }
    let missing: Vec<ItemId> = block
        .questions
        .iter()
        .filter(|q| !resolved.contains_key(&q.item_id))
        .map(|q| q.item_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ScreeningError::IncompleteBlock {
            block: block.block_id,
            missing,
        });
    }
    let checks = block
        .questions
        .iter()
        .map(|q| check_resolved(&resolved[&q.item_id]))
        .collect();
    Ok(verdict_from_checks(checks, cfg))
}

/// Distinct condition count per experiment; questions with fewer scores were
/// trimmed by a previous IQR pass and are no longer checkable as screens.
fn complete_question_size(dataset: &Dataset) -> BTreeMap<&str, usize> {
    let mut per_exp: BTreeMap<&str, BTreeSet<&ConditionId>> = BTreeMap::new();
    for r in &dataset.rows {
        per_exp
            .entry(r.experiment_id.as_str())
            .or_default()
            .insert(&r.condition_id);
    }
    per_exp.into_iter().map(|(k, v)| (k, v.len())).collect()
}

fn experiment_of<'a>(dataset: &'a Dataset, listener: &ListenerId, block: BlockId) -> &'a str {
    dataset
        .rows
        .iter()
        .find(|r| &r.listener_id == listener && r.block_id == block)
        .map(|r| r.experiment_id.as_str())
        .unwrap_or_default()
}

/// Per-block verdicts for an offline dataset, keyed by (listener, block).
pub fn offline_block_verdicts(
    dataset: &Dataset,
    cfg: &ScreeningConfig,
) -> BTreeMap<(ListenerId, BlockId), BlockVerdict> {
    let sizes = complete_question_size(dataset);
    dataset
        .block_ratings()
        .into_iter()
        .map(|b| {
            let expected = sizes
                .get(experiment_of(dataset, &b.listener_id, b.block_id))
                .copied()
                .unwrap_or(0);
            let checks = b
                .ratings
                .iter()
                .map(|r| {
                    if r.scores.len() < expected {
                        QuestionCheck {
                            question_id: r.question_id.clone(),
                            listener_id: r.listener_id.clone(),
                            failed: false,
                            reasons: Vec::new(),
                        }
                    } else {
                        check_resolved(r)
                    }
                })
                .collect();
            ((b.listener_id, b.block_id), verdict_from_checks(checks, cfg))
        })
        .collect()
}

/// Listeners with at least one block over the failure threshold. Blocks are
/// judged independently; failures do not accumulate across blocks.
pub fn disqualify_listeners(dataset: &Dataset, cfg: &ScreeningConfig) -> BTreeSet<ListenerId> {
    offline_block_verdicts(dataset, cfg)
        .into_iter()
        .filter(|(_, v)| v.rejected)
        .map(|((listener, _), _)| listener)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqrBounds {
    pub q1: f64,
    pub q3: f64,
    pub low: f64,
    pub high: f64,
}

impl IqrBounds {
    pub fn is_outlier(&self, x: f64) -> bool {
        x < self.low || x > self.high
    }
}

/// Minimum group size for IQR removal.
pub const IQR_MIN_SCORES: usize = 4;

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Tukey-hinge quartiles: Q1 and Q3 are the medians of the lower and upper
/// halves, each half including the median element when n is odd.
/// Returns `None` below four scores.
pub fn iqr_outlier_bounds(scores: &[f64], multiplier: f64) -> Option<IqrBounds> {
    if scores.len() < IQR_MIN_SCORES {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let half = n.div_ceil(2);
    let q1 = median_sorted(&sorted[..half]);
    let q3 = median_sorted(&sorted[n - half..]);
    let iqr = q3 - q1;
    Some(IqrBounds {
        q1,
        q3,
        low: q1 - multiplier * iqr,
        high: q3 + multiplier * iqr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalReason {
    ListenerDq,
    QuestionFail,
    IqrOutlier,
}

impl fmt::Display for RemovalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemovalReason::ListenerDq => "listener-dq",
            RemovalReason::QuestionFail => "question-fail",
            RemovalReason::IqrOutlier => "iqr-outlier",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedScore {
    pub listener_id: ListenerId,
    pub block_id: BlockId,
    pub question_id: QuestionId,
    pub item_id: ItemId,
    pub condition_id: ConditionId,
    pub score: u8,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub disqualified_listeners: BTreeSet<ListenerId>,
    pub removed_scores: Vec<RemovedScore>,
    pub raw_count: usize,
    pub retained_count: usize,
    /// Whether this run performed the IQR stage (false when the input had it already).
    pub iqr_stage_run: bool,
}

impl ScreeningReport {
    pub fn count(&self, reason: RemovalReason) -> usize {
        self.removed_scores.iter().filter(|r| r.reason == reason).count()
    }

    /// Audit table, one row per removed score.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "listener_id",
            "block_id",
            "question_id",
            "item_id",
            "condition_id",
            "score",
            "reason",
        ])?;
        for r in &self.removed_scores {
            w.write_record([
                r.listener_id.as_str(),
                &r.block_id.0.to_string(),
                r.question_id.as_str(),
                r.item_id.as_str(),
                r.condition_id.as_str(),
                &r.score.to_string(),
                &r.reason.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Offline screening of a closed campaign.
///
/// Stages run in a fixed order and each removed score is attributed to the
/// first stage that removes it: (1) every score of a disqualified listener,
/// including listeners with a block already discarded in real time, (2)
/// every score of a question that failed a check, (3) scores strictly
/// outside the IQR bounds of their (condition, item) cell. Stage 3 runs once
/// and is skipped when the input is already marked as IQR-screened.
pub fn post_screen(dataset: &Dataset, cfg: &ScreeningConfig) -> (Dataset, ScreeningReport) {
    let mut report = ScreeningReport {
        raw_count: dataset.len(),
        ..ScreeningReport::default()
    };
    if dataset.is_empty() {
        return (
            Dataset {
                rows: Vec::new(),
                iqr_applied: dataset.iqr_applied,
            },
            report,
        );
    }

    let verdicts = offline_block_verdicts(dataset, cfg);
    let disqualified: BTreeSet<ListenerId> = verdicts
        .iter()
        .filter(|(_, v)| v.rejected)
        .map(|((l, _), _)| l.clone())
        .chain(
            dataset
                .rows
                .iter()
                .filter(|r| r.discarded)
                .map(|r| r.listener_id.clone()),
        )
        .collect();
    let failed_questions: BTreeSet<(ListenerId, QuestionId)> = verdicts
        .values()
        .flat_map(|v| v.checks.iter())
        .filter(|c| c.failed)
        .map(|c| (c.listener_id.clone(), c.question_id.clone()))
        .collect();

    let mut removed: BTreeMap<ScoreKey, RemovalReason> = BTreeMap::new();
    for row in &dataset.rows {
        let reason = if disqualified.contains(&row.listener_id) {
            Some(RemovalReason::ListenerDq)
        } else if failed_questions.contains(&(row.listener_id.clone(), row.question_id.clone())) {
            Some(RemovalReason::QuestionFail)
        } else {
            None
        };
        if let Some(reason) = reason {
            removed.insert(row.key(), reason);
        }
    }

    if !dataset.iqr_applied {
        let mut cells: BTreeMap<(&ConditionId, &ItemId), Vec<usize>> = BTreeMap::new();
        for (i, row) in dataset.rows.iter().enumerate() {
            if !removed.contains_key(&row.key()) {
                cells.entry((&row.condition_id, &row.item_id)).or_default().push(i);
            }
        }
        for idxs in cells.values() {
            let scores: Vec<f64> = idxs.iter().map(|&i| dataset.rows[i].score as f64).collect();
            if let Some(bounds) = iqr_outlier_bounds(&scores, cfg.iqr_multiplier) {
                for (&i, &s) in idxs.iter().zip(&scores) {
                    if bounds.is_outlier(s) {
                        removed.insert(dataset.rows[i].key(), RemovalReason::IqrOutlier);
                    }
                }
            }
        }
        report.iqr_stage_run = true;
    }

    let mut clean = Vec::with_capacity(dataset.len());
    for row in &dataset.rows {
        match removed.get(&row.key()) {
            Some(&reason) => report.removed_scores.push(RemovedScore {
                listener_id: row.listener_id.clone(),
                block_id: row.block_id,
                question_id: row.question_id.clone(),
                item_id: row.item_id.clone(),
                condition_id: row.condition_id.clone(),
                score: row.score,
                reason,
            }),
            None => clean.push(row.clone()),
        }
    }
    report.disqualified_listeners = disqualified;
    report.retained_count = clean.len();
    (
        Dataset {
            rows: clean,
            iqr_applied: true,
        },
        report,
    )
}
