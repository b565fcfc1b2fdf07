//! Flat score tables: one row per (listener, question, condition) score.
//!
//! The same row layout is used for raw exports, screened (clean) exports and
//! as input to the offline screening and analysis passes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    BlockId, ConditionId, ConditionScore, ExperimentId, ItemId, ListenerId, QuestionId,
    ResolvedRating, Role,
};

/// Marker line written at the top of a screened table.
const IQR_APPLIED_MARKER: &str = "# iqr_applied=true";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("score table: {0}")]
    Csv(#[from] csv::Error),
    #[error("score table: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub experiment_id: ExperimentId,
    pub listener_id: ListenerId,
    pub block_id: BlockId,
    pub question_id: QuestionId,
    pub item_id: ItemId,
    pub condition_id: ConditionId,
    pub role: Role,
    pub score: u8,
    /// Set when the block was rejected by real-time screening.
    pub discarded: bool,
}

impl ScoreRow {
    /// Key identifying this score uniquely within a dataset.
    pub fn key(&self) -> ScoreKey {
        ScoreKey {
            listener_id: self.listener_id.clone(),
            question_id: self.question_id.clone(),
            condition_id: self.condition_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScoreKey {
    pub listener_id: ListenerId,
    pub question_id: QuestionId,
    pub condition_id: ConditionId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<ScoreRow>,
    /// Whether score-level IQR removal has already run on these rows.
    #[serde(default)]
    pub iqr_applied: bool,
}

/// One listener's ratings for one block, in question order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRatings {
    pub listener_id: ListenerId,
    pub block_id: BlockId,
    pub ratings: Vec<ResolvedRating>,
}

impl Dataset {
    pub fn new(rows: Vec<ScoreRow>) -> Self {
        Self {
            rows,
            iqr_applied: false,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorts rows into the canonical export order.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.experiment_id, &a.listener_id, a.block_id, &a.question_id, &a.condition_id).cmp(&(
                &b.experiment_id,
                &b.listener_id,
                b.block_id,
                &b.question_id,
                &b.condition_id,
            ))
        });
    }

    /// Groups rows back into per-question ratings, grouped per (listener, block).
    pub fn block_ratings(&self) -> Vec<BlockRatings> {
        let mut blocks: BTreeMap<(ListenerId, BlockId), BTreeMap<QuestionId, ResolvedRating>> =
            BTreeMap::new();
        for row in &self.rows {
            let questions = blocks
                .entry((row.listener_id.clone(), row.block_id))
                .or_default();
            questions
                .entry(row.question_id.clone())
                .or_insert_with(|| ResolvedRating {
                    question_id: row.question_id.clone(),
                    listener_id: row.listener_id.clone(),
                    item_id: row.item_id.clone(),
                    scores: Vec::new(),
                })
                .scores
                .push(ConditionScore {
                    condition_id: row.condition_id.clone(),
                    role: row.role,
                    score: row.score,
                });
        }
        blocks
            .into_iter()
            .map(|((listener_id, block_id), qs)| BlockRatings {
                listener_id,
                block_id,
                ratings: qs.into_values().collect(),
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut out = out;
        if self.iqr_applied {
            writeln!(out, "{IQR_APPLIED_MARKER}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "experiment_id",
                "listener_id",
                "block_id",
                "question_id",
                "item_id",
                "condition_id",
                "role",
                "score",
                "discarded",
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DatasetError> {
        let mut text = String::new();
        let mut input = input;
        input.read_to_string(&mut text)?;
        let iqr_applied = text
            .lines()
            .next()
            .is_some_and(|l| l.trim() == IQR_APPLIED_MARKER);
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<Result<Vec<ScoreRow>, _>>()?;
        Ok(Self { rows, iqr_applied })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(listener: &str, block: u32, q: &str, item: &str, cond: &str, role: Role, score: u8) -> ScoreRow {
        ScoreRow {
            experiment_id: ExperimentId::new("e"),
            listener_id: ListenerId::new(listener),
            block_id: BlockId(block),
            question_id: QuestionId::new(q),
            item_id: ItemId::new(item),
            condition_id: ConditionId::new(cond),
            role,
            score,
            discarded: false,
        }
    }

    #[test]
    fn csv_round_trip_keeps_marker() {
        let mut ds = Dataset::new(vec![
            row("w1", 1, "q1", "i1", "ref", Role::Reference, 100),
            row("w1", 1, "q1", "i1", "anc", Role::Anchor, 20),
        ]);
        ds.iqr_applied = true;
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(IQR_APPLIED_MARKER));
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_table_has_header() {
        let mut buf = Vec::new();
        Dataset::default().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("experiment_id,listener_id"));
        assert!(Dataset::read_csv(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn groups_by_listener_block_question() {
        let ds = Dataset::new(vec![
            row("w1", 1, "q1", "i1", "ref", Role::Reference, 100),
            row("w1", 1, "q1", "i1", "anc", Role::Anchor, 20),
            row("w1", 1, "q2", "i2", "ref", Role::Reference, 90),
            row("w1", 2, "q3", "i3", "ref", Role::Reference, 90),
            row("w2", 1, "q4", "i1", "ref", Role::Reference, 95),
        ]);
        let blocks = ds.block_ratings();
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[0].ratings.len(), 2);
        assert_eq!(blocks[0].ratings[0].scores.len(), 2);
        assert_eq!(blocks[0].ratings[0].anchor_score(), Some(20));
    }
}
