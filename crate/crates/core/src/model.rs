//! Shared domain types: identifiers, conditions, stimuli, questions and ratings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a test condition (codec + bitrate, reference or anchor).
    ConditionId
);
string_id!(
    /// Identifier of a source utterance.
    ItemId
);
string_id!(
    /// Platform-provided worker identity.
    ListenerId
);
string_id!(QuestionId);
string_id!(
    /// Opaque per-listener label under which a stimulus is presented.
    SlotLabel
);
string_id!(ExperimentId);

/// Index of a sub-test block within an experiment's partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u32);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// What a condition is for inside a MUSHRA screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Reference,
    Anchor,
    SystemUnderTest,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Reference => "reference",
            Role::Anchor => "anchor",
            Role::SystemUnderTest => "system-under-test",
        })
    }
}

/// Codec family used to group objective-metric correlations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Dsp,
    Dnn,
    #[default]
    None,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Dsp => "dsp",
            Family::Dnn => "dnn",
            Family::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: ConditionId,
    pub label: String,
    pub role: Role,
    #[serde(default)]
    pub family: Family,
}

impl Condition {
    pub fn new(id: &str, label: &str, role: Role, family: Family) -> Self {
        Self {
            id: ConditionId::new(id),
            label: label.to_owned(),
            role,
            family,
        }
    }
}

/// One audio file: a source item processed by one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub item_id: ItemId,
    pub condition_id: ConditionId,
    pub audio_uri: String,
    pub duration_s: f64,
}

/// Lowest and highest score a slider can produce.
pub const SCORE_MIN: u8 = 0;
pub const SCORE_MAX: u8 = 100;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("conditions contain no reference")]
    MissingReference,
    #[error("conditions contain no anchor")]
    MissingAnchor,
    #[error("more than one {0} condition")]
    DuplicateRole(Role),
    #[error("ratings are for question {got}, expected {expected}")]
    QuestionMismatch { expected: QuestionId, got: QuestionId },
    #[error("slot {0} was presented but not rated")]
    MissingSlot(SlotLabel),
    #[error("slot {0} was not presented in this question")]
    UnknownSlot(SlotLabel),
    #[error("score {score} for slot {slot} is outside [0, 100]")]
    ScoreOutOfRange { slot: SlotLabel, score: u8 },
}

/// A stimulus as presented on one MUSHRA screen: hidden condition behind a nonce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentedStimulus {
    pub slot: SlotLabel,
    pub condition_id: ConditionId,
    pub role: Role,
}

/// One multi-stimulus rating screen as generated for one listener.
///
/// `presented` is in display order. The open (disclosed) reference is served
/// under its own nonce so that no URL leaks which slot hides the reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MushraQuestion {
    pub question_id: QuestionId,
    pub item_id: ItemId,
    pub presented: Vec<PresentedStimulus>,
    pub open_reference: ConditionId,
    pub open_reference_slot: SlotLabel,
}

impl MushraQuestion {
    pub fn slots(&self) -> impl Iterator<Item = &SlotLabel> {
        self.presented.iter().map(|p| &p.slot)
    }

    pub fn condition_for(&self, slot: &SlotLabel) -> Option<&ConditionId> {
        if slot == &self.open_reference_slot {
            return Some(&self.open_reference);
        }
        self.presented
            .iter()
            .find(|p| &p.slot == slot)
            .map(|p| &p.condition_id)
    }

    /// Maps a listener's slot scores back onto conditions.
    pub fn resolve(&self, ratings: &RatingSet) -> Result<ResolvedRating, ModelError> {
        if ratings.question_id != self.question_id {
            return Err(ModelError::QuestionMismatch {
                expected: self.question_id.clone(),
                got: ratings.question_id.clone(),
            });
        }
        for slot in ratings.scores.keys() {
            if !self.presented.iter().any(|p| &p.slot == slot) {
                return Err(ModelError::UnknownSlot(slot.clone()));
            }
        }
        let mut scores = Vec::with_capacity(self.presented.len());
        for p in &self.presented {
            let score = *ratings
                .scores
                .get(&p.slot)
                .ok_or_else(|| ModelError::MissingSlot(p.slot.clone()))?;
            if score > SCORE_MAX {
                return Err(ModelError::ScoreOutOfRange {
                    slot: p.slot.clone(),
                    score,
                });
            }
            scores.push(ConditionScore {
                condition_id: p.condition_id.clone(),
                role: p.role,
                score,
            });
        }
        Ok(ResolvedRating {
            question_id: self.question_id.clone(),
            listener_id: ratings.listener_id.clone(),
            item_id: self.item_id.clone(),
            scores,
        })
    }
}

/// One listener's slider scores for one question, keyed by slot label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSet {
    pub question_id: QuestionId,
    pub listener_id: ListenerId,
    pub scores: BTreeMap<SlotLabel, u8>,
    #[serde(default)]
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub condition_id: ConditionId,
    pub role: Role,
    pub score: u8,
}

/// A rating with slot labels replaced by the conditions they hid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedRating {
    pub question_id: QuestionId,
    pub listener_id: ListenerId,
    pub item_id: ItemId,
    pub scores: Vec<ConditionScore>,
}

impl ResolvedRating {
    fn score_with_role(&self, role: Role) -> Option<u8> {
        self.scores.iter().find(|s| s.role == role).map(|s| s.score)
    }

    pub fn reference_score(&self) -> Option<u8> {
        self.score_with_role(Role::Reference)
    }

    pub fn anchor_score(&self) -> Option<u8> {
        self.score_with_role(Role::Anchor)
    }
}

/// Deterministically derives a child seed from a base seed and a path of labels.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Random 64-bit nonce rendered as lowercase hex.
pub fn nonce<R: Rng + ?Sized>(rng: &mut R) -> String {
    format!("{:016x}", rng.random::<u64>())
}

/// Checks that exactly one reference and one anchor are present.
pub fn check_roles(conditions: &[Condition]) -> Result<(), ModelError> {
    let count = |role| conditions.iter().filter(|c| c.role == role).count();
    match count(Role::Reference) {
        0 => return Err(ModelError::MissingReference),
        1 => {}
        _ => return Err(ModelError::DuplicateRole(Role::Reference)),
    }
    match count(Role::Anchor) {
        0 => Err(ModelError::MissingAnchor),
        1 => Ok(()),
        _ => Err(ModelError::DuplicateRole(Role::Anchor)),
    }
}

/// Builds one hidden-reference MUSHRA screen for `item_id`.
///
/// The slot order is a uniform permutation of `conditions` and every label
/// (slots, open reference, question id) is a fresh nonce drawn from the same
/// seeded stream, so the result is a pure function of its arguments.
pub fn shuffle_question(
    item_id: &ItemId,
    conditions: &[Condition],
    seed: u64,
) -> Result<MushraQuestion, ModelError> {
    check_roles(conditions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&Condition> = conditions.iter().collect();
    order.shuffle(&mut rng);

    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let label = nonce(rng);
        if used.insert(label.clone()) {
            return label;
        }
    };

    let question_id = QuestionId(format!("q{}", fresh(&mut rng)));
    let open_reference_slot = SlotLabel(fresh(&mut rng));
    let presented = order
        .into_iter()
        .map(|c| PresentedStimulus {
            slot: SlotLabel(fresh(&mut rng)),
            condition_id: c.id.clone(),
            role: c.role,
        })
        .collect();
    let open_reference = conditions
        .iter()
        .find(|c| c.role == Role::Reference)
        .map(|c| c.id.clone())
        .expect("roles checked");

    Ok(MushraQuestion {
        question_id,
        item_id: item_id.clone(),
        presented,
        open_reference,
        open_reference_slot,
    })
}
