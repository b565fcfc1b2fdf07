//! Splitting the stimulus matrix into sub-test blocks and handing blocks out
//! to listeners.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::model::{BlockId, ConditionId, ItemId, ListenerId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("{conditions} conditions per question exceed max_stimuli_per_block={cap}")]
    QuestionTooLarge { conditions: usize, cap: usize },
    #[error("experiment has no conditions")]
    NoConditions,
    #[error("unknown listener {0}")]
    UnknownListener(ListenerId),
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("listener {listener} is not assigned block {block}")]
    NotAssigned { listener: ListenerId, block: BlockId },
    #[error("listener {listener} already has block {block} outstanding")]
    AlreadyAssigned { listener: ListenerId, block: BlockId },
}

/// One MUSHRA screen in a block: an item rated under every condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub item_id: ItemId,
    pub conditions: Vec<ConditionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestBlock {
    pub block_id: BlockId,
    pub questions: Vec<QuestionSpec>,
    /// Presented stimuli including hidden references and anchors.
    pub stimulus_count: usize,
}

impl TestBlock {
    fn new(block_id: BlockId, items: &[ItemId], conditions: &[ConditionId]) -> Self {
        Self {
            block_id,
            questions: items
                .iter()
                .map(|i| QuestionSpec {
                    item_id: i.clone(),
                    conditions: conditions.to_vec(),
                })
                .collect(),
            stimulus_count: items.len() * conditions.len(),
        }
    }

    pub fn contains_item(&self, item: &ItemId) -> bool {
        self.questions.iter().any(|q| &q.item_id == item)
    }

    pub fn items(&self) -> impl Iterator<Item = &ItemId> {
        self.questions.iter().map(|q| &q.item_id)
    }
}

/// Questions that fit in a block of `cap` stimuli with `conditions` per question.
pub fn questions_per_block(conditions: usize, cap: usize) -> Result<usize, PartitionError> {
    if conditions == 0 {
        return Err(PartitionError::NoConditions);
    }
    if conditions > cap {
        return Err(PartitionError::QuestionTooLarge { conditions, cap });
    }
    Ok(cap / conditions)
}

/// Shuffles items with `seed` and chunks them into blocks of
/// `floor(max_stimuli_per_block / conditions)` questions.
///
/// A trailing single-question block borrows one question from its
/// predecessor when that predecessor has at least three, so no block is left
/// with a lone question while every block stays under the stimulus cap.
pub fn partition_stimuli(config: &ExperimentConfig, seed: u64) -> Result<Vec<TestBlock>, PartitionError> {
    let conditions: Vec<ConditionId> = config.conditions.iter().map(|c| c.id.clone()).collect();
    let per_block = questions_per_block(conditions.len(), config.limits.max_stimuli_per_block)?;

    let mut items = config.items.clone();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut chunks: Vec<Vec<ItemId>> = items.chunks(per_block).map(<[ItemId]>::to_vec).collect();
    let n = chunks.len();
    if n >= 2 && chunks[n - 1].len() == 1 && chunks[n - 2].len() >= 3 {
        let moved = chunks[n - 2].pop().expect("non-empty");
        chunks[n - 1].insert(0, moved);
    }

    Ok(chunks
        .iter()
        .enumerate()
        .map(|(i, chunk)| TestBlock::new(BlockId(i as u32 + 1), chunk, &conditions))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct ListenerRecord {
    completed: BTreeSet<BlockId>,
    outstanding: Option<BlockId>,
}

/// Who has rated what, and how many accepted votes each block has.
///
/// All mutation goes through `&mut self`; callers that share a ledger between
/// concurrent sessions must hold it behind a single writer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentLedger {
    blocks: BTreeMap<BlockId, TestBlock>,
    votes: BTreeMap<BlockId, u32>,
    outstanding: BTreeMap<BlockId, u32>,
    listeners: BTreeMap<ListenerId, ListenerRecord>,
    target_votes: u32,
}

impl AssignmentLedger {
    pub fn new(blocks: Vec<TestBlock>, target_votes: u32) -> Self {
        let votes = blocks.iter().map(|b| (b.block_id, 0)).collect();
        let outstanding = blocks.iter().map(|b| (b.block_id, 0)).collect();
        Self {
            blocks: blocks.into_iter().map(|b| (b.block_id, b)).collect(),
            votes,
            outstanding,
            listeners: BTreeMap::new(),
            target_votes,
        }
    }

    pub fn register(&mut self, listener: &ListenerId) {
        self.listeners.entry(listener.clone()).or_default();
    }

    pub fn block(&self, id: BlockId) -> Option<&TestBlock> {
        self.blocks.get(&id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TestBlock> {
        self.blocks.values()
    }

    pub fn block_votes(&self, id: BlockId) -> u32 {
        self.votes.get(&id).copied().unwrap_or(0)
    }

    /// Accepted votes per item (each item lives in exactly one block).
    pub fn item_votes(&self) -> BTreeMap<ItemId, u32> {
        self.blocks
            .values()
            .flat_map(|b| b.items().map(move |i| (i.clone(), self.block_votes(b.block_id))))
            .collect()
    }

    pub fn completed_by(&self, listener: &ListenerId) -> Option<&BTreeSet<BlockId>> {
        self.listeners.get(listener).map(|r| &r.completed)
    }

    pub fn outstanding_for(&self, listener: &ListenerId) -> Option<BlockId> {
        self.listeners.get(listener).and_then(|r| r.outstanding)
    }

    /// Picks the least-voted block this listener has not rated, counting
    /// outstanding assignments as votes and breaking ties by block id. Blocks
    /// already at the response target are skipped.
    pub fn next_block_for(
        &self,
        listener: &ListenerId,
        max_blocks: usize,
    ) -> Result<Option<&TestBlock>, PartitionError> {
        let record = self
            .listeners
            .get(listener)
            .ok_or_else(|| PartitionError::UnknownListener(listener.clone()))?;
        if record.completed.len() >= max_blocks {
            return Ok(None);
        }
        Ok(self
            .blocks
            .values()
            .filter(|b| !record.completed.contains(&b.block_id))
            .filter(|b| record.outstanding != Some(b.block_id))
            .map(|b| (self.votes[&b.block_id] + self.outstanding[&b.block_id], b))
            .filter(|(load, _)| *load < self.target_votes)
            .min_by_key(|(load, b)| (*load, b.block_id))
            .map(|(_, b)| b))
    }

    /// Reserves `block` for `listener` until it is completed or released.
    pub fn assign(&mut self, listener: &ListenerId, block: BlockId) -> Result<(), PartitionError> {
        if !self.blocks.contains_key(&block) {
            return Err(PartitionError::UnknownBlock(block));
        }
        let record = self
            .listeners
            .get_mut(listener)
            .ok_or_else(|| PartitionError::UnknownListener(listener.clone()))?;
        if let Some(current) = record.outstanding {
            return Err(PartitionError::AlreadyAssigned {
                listener: listener.clone(),
                block: current,
            });
        }
        record.outstanding = Some(block);
        *self.outstanding.get_mut(&block).expect("known block") += 1;
        Ok(())
    }

    /// Closes the listener's outstanding block. Accepted blocks count as a
    /// vote; rejected ones only free the reservation. Either way the listener
    /// never receives this block again.
    pub fn complete(
        &mut self,
        listener: &ListenerId,
        block: BlockId,
        accepted: bool,
    ) -> Result<(), PartitionError> {
        let record = self
            .listeners
            .get_mut(listener)
            .ok_or_else(|| PartitionError::UnknownListener(listener.clone()))?;
        if record.outstanding != Some(block) {
            return Err(PartitionError::NotAssigned {
                listener: listener.clone(),
                block,
            });
        }
        record.outstanding = None;
        record.completed.insert(block);
        *self.outstanding.get_mut(&block).expect("known block") -= 1;
        if accepted {
            *self.votes.get_mut(&block).expect("known block") += 1;
        }
        Ok(())
    }

    /// Drops an outstanding reservation without recording a vote (timeouts).
    pub fn release(&mut self, listener: &ListenerId) {
        if let Some(record) = self.listeners.get_mut(listener) {
            if let Some(block) = record.outstanding.take() {
                *self.outstanding.get_mut(&block).expect("known block") -= 1;
            }
        }
    }
}
