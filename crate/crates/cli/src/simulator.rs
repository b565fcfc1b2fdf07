//! Synthetic raters.
//!
//! Each archetype turns a latent quality per condition into slider scores
//! for a MUSHRA screen. The rules are deliberately simple; they exist to
//! stress screening and aggregation, not to model human hearing.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crowdmushra_core::config::ExperimentConfig;
use crowdmushra_core::model::{ConditionId, ItemId, ListenerId, MushraQuestion, RatingSet, Role};

/// Spread of the small downward jitter on a pinned reference, as a fraction of `noise_sd`.
pub const REFERENCE_JITTER_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("archetype {kind}: {field} = {value} is outside {range}")]
    Parameter {
        kind: ArchetypeKind,
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("ground truth: {0}")]
    GroundTruth(String),
    #[error("population has no listeners")]
    EmptyCampaign,
    #[error("service: {0}")]
    Service(#[from] crowdmushra_service::ServiceError),
    #[error("analysis: {0}")]
    Analysis(#[from] crowdmushra_core::analysis::AnalysisError),
    #[error("simulated listener {listener} stalled in state {state}")]
    Stalled { listener: String, state: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchetypeKind {
    Diligent,
    Noisy,
    RandomClicker,
    AnchorConfuser,
    CeilingRater,
}

impl std::fmt::Display for ArchetypeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchetypeKind::Diligent => "diligent",
            ArchetypeKind::Noisy => "noisy",
            ArchetypeKind::RandomClicker => "random-clicker",
            ArchetypeKind::AnchorConfuser => "anchor-confuser",
            ArchetypeKind::CeilingRater => "ceiling-rater",
        })
    }
}

fn default_noise_sd() -> f64 {
    10.0
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterArchetype {
    pub kind: ArchetypeKind,
    /// Standard deviation of per-score Gaussian noise, in score points.
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    /// Fraction of the distance to 100 that survives; 1 means no compression.
    #[serde(default = "one")]
    pub ceiling_compression: f64,
    /// Probability per question of swapping reference and anchor scores.
    #[serde(default)]
    pub attention_lapse_rate: f64,
}

impl RaterArchetype {
    pub fn new(kind: ArchetypeKind) -> Self {
        Self {
            kind,
            noise_sd: default_noise_sd(),
            ceiling_compression: 1.0,
            attention_lapse_rate: 0.0,
        }
    }

    pub fn diligent(noise_sd: f64) -> Self {
        Self {
            noise_sd,
            ..Self::new(ArchetypeKind::Diligent)
        }
    }

    pub fn random_clicker() -> Self {
        Self::new(ArchetypeKind::RandomClicker)
    }

    pub fn ceiling(noise_sd: f64, compression: f64) -> Self {
        Self {
            noise_sd,
            ceiling_compression: compression,
            ..Self::new(ArchetypeKind::CeilingRater)
        }
    }

    pub fn anchor_confuser(noise_sd: f64, lapse: f64) -> Self {
        Self {
            noise_sd,
            attention_lapse_rate: lapse,
            ..Self::new(ArchetypeKind::AnchorConfuser)
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |field, value, range| SimulationError::Parameter {
            kind: self.kind,
            field,
            value,
            range,
        };
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(bad("noise_sd", self.noise_sd, "[0, inf)"));
        }
        if !(self.ceiling_compression > 0.0 && self.ceiling_compression <= 1.0) {
            return Err(bad("ceiling_compression", self.ceiling_compression, "(0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.attention_lapse_rate) {
            return Err(bad("attention_lapse_rate", self.attention_lapse_rate, "[0, 1]"));
        }
        Ok(())
    }

    /// Whether this archetype reads the training feedback and rates the
    /// training screen by its latent ordering.
    pub fn follows_instructions(&self) -> bool {
        self.kind != ArchetypeKind::RandomClicker
    }

    fn compress(&self, s: f64) -> f64 {
        if self.kind == ArchetypeKind::CeilingRater {
            100.0 - self.ceiling_compression * (100.0 - s)
        } else {
            s
        }
    }
}

/// Latent quality per condition, optionally perturbed per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_quality: BTreeMap<ConditionId, f64>,
    /// Additive per-(condition, item) deviations from `true_quality`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub item_offsets: BTreeMap<ConditionId, BTreeMap<ItemId, f64>>,
}

impl GroundTruth {
    pub fn new(true_quality: BTreeMap<ConditionId, f64>) -> Self {
        Self {
            true_quality,
            item_offsets: BTreeMap::new(),
        }
    }

    /// Reference at 100, anchor at 20 and the systems under test evenly
    /// spaced between them in config order, best first.
    pub fn evenly_spaced(config: &ExperimentConfig) -> Self {
        let systems: Vec<_> = config
            .conditions
            .iter()
            .filter(|c| c.role == Role::SystemUnderTest)
            .collect();
        let n = systems.len() as f64;
        let mut q = BTreeMap::new();
        for c in &config.conditions {
            match c.role {
                Role::Reference => {
                    q.insert(c.id.clone(), 100.0);
                }
                Role::Anchor => {
                    q.insert(c.id.clone(), 20.0);
                }
                Role::SystemUnderTest => {}
            }
        }
        for (i, c) in systems.iter().enumerate() {
            q.insert(c.id.clone(), (100.0 - 80.0 * (i as f64 + 1.0) / (n + 1.0)).round());
        }
        Self::new(q)
    }

    /// Adds zero-mean Gaussian per-item offsets with spread `sd` to every
    /// system under test. Offsets are centred per condition so the
    /// condition-level latent stays exact.
    pub fn with_item_spread<R: Rng + ?Sized>(
        mut self,
        config: &ExperimentConfig,
        sd: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, sd).expect("finite spread");
        for c in config.conditions.iter().filter(|c| c.role == Role::SystemUnderTest) {
            let raw: Vec<f64> = config.items.iter().map(|_| normal.sample(rng)).collect();
            let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
            let offsets = config
                .items
                .iter()
                .zip(raw)
                .map(|(i, x)| (i.clone(), x - mean))
                .collect();
            self.item_offsets.insert(c.id.clone(), offsets);
        }
        self
    }

    pub fn quality(&self, condition: &ConditionId, item: &ItemId) -> f64 {
        let base = self.true_quality.get(condition).copied().unwrap_or(0.0);
        let offset = self
            .item_offsets
            .get(condition)
            .and_then(|m| m.get(item))
            .copied()
            .unwrap_or(0.0);
        base + offset
    }

    pub fn validate(&self, config: &ExperimentConfig) -> Result<(), SimulationError> {
        for c in &config.conditions {
            let q = self
                .true_quality
                .get(&c.id)
                .ok_or_else(|| SimulationError::GroundTruth(format!("no latent quality for {}", c.id)))?;
            if !(0.0..=100.0).contains(q) {
                return Err(SimulationError::GroundTruth(format!("{} = {q} is outside [0, 100]", c.id)));
            }
        }
        let of = |role| config.with_role(role).map(|c| self.true_quality[&c.id]);
        let (Some(r), Some(a)) = (of(Role::Reference), of(Role::Anchor)) else {
            return Err(SimulationError::GroundTruth("config lacks a reference or anchor".into()));
        };
        for c in config.conditions.iter().filter(|c| c.role == Role::SystemUnderTest) {
            let q = self.true_quality[&c.id];
            if q >= r || q <= a {
                return Err(SimulationError::GroundTruth(format!(
                    "{} = {q} must lie strictly between anchor {a} and reference {r}",
                    c.id
                )));
            }
        }
        Ok(())
    }

    /// Conditions ordered best first.
    pub fn ranking(&self) -> Vec<ConditionId> {
        let mut ids: Vec<_> = self.true_quality.iter().collect();
        ids.sort_by(|a, b| b.1.total_cmp(a.1).then_with(|| a.0.cmp(b.0)));
        ids.into_iter().map(|(id, _)| id.clone()).collect()
    }
}

fn to_score(x: f64) -> u8 {
    x.clamp(0.0, 100.0).round() as u8
}

/// Generates one listener's slider scores for `question`.
///
/// The question carries the hidden conditions, which is how a simulated
/// listener "hears" them; see the campaign driver for how it obtains them
/// without reading server state.
pub fn simulate_rating<R: Rng + ?Sized>(
    archetype: &RaterArchetype,
    truth: &GroundTruth,
    question: &MushraQuestion,
    listener: &ListenerId,
    rng: &mut R,
) -> RatingSet {
    let mut scores = BTreeMap::new();
    if archetype.kind == ArchetypeKind::RandomClicker {
        for p in &question.presented {
            scores.insert(p.slot.clone(), rng.random_range(0..=100u8));
        }
    } else {
        let noise = Normal::new(0.0, archetype.noise_sd).expect("validated noise_sd");
        let pinned = archetype.kind != ArchetypeKind::Noisy;
        for p in &question.presented {
            let latent = truth.quality(&p.condition_id, &question.item_id);
            let raw = if p.role == Role::Reference && pinned {
                latent - (noise.sample(rng) * REFERENCE_JITTER_FRACTION).abs()
            } else {
                latent + noise.sample(rng)
            };
            scores.insert(p.slot.clone(), to_score(archetype.compress(raw.clamp(0.0, 100.0))));
        }
        if archetype.kind == ArchetypeKind::AnchorConfuser && rng.random_bool(archetype.attention_lapse_rate) {
            swap_reference_and_anchor(question, &mut scores);
        }
    }
    RatingSet {
        question_id: question.question_id.clone(),
        listener_id: listener.clone(),
        scores,
        elapsed_ms: 0,
    }
}

/// Scores a training screen by latent ordering alone, the way an attentive
/// listener who read the instructions would.
pub fn rate_training(
    archetype: &RaterArchetype,
    truth: &GroundTruth,
    question: &MushraQuestion,
    listener: &ListenerId,
) -> RatingSet {
    let scores = question
        .presented
        .iter()
        .map(|p| {
            let q = truth.quality(&p.condition_id, &question.item_id);
            (p.slot.clone(), to_score(archetype.compress(q)).max(1))
        })
        .collect();
    RatingSet {
        question_id: question.question_id.clone(),
        listener_id: listener.clone(),
        scores,
        elapsed_ms: 0,
    }
}

fn swap_reference_and_anchor(question: &MushraQuestion, scores: &mut BTreeMap<crowdmushra_core::model::SlotLabel, u8>) {
    let slot = |role| question.presented.iter().find(|p| p.role == role).map(|p| p.slot.clone());
    if let (Some(r), Some(a)) = (slot(Role::Reference), slot(Role::Anchor)) {
        let (sr, sa) = (scores[&r], scores[&a]);
        scores.insert(r, sa);
        scores.insert(a, sr);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationGroup {
    #[serde(flatten)]
    pub archetype: RaterArchetype,
    pub count: usize,
}

/// Who shows up to a simulated campaign, and what the world looks like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    #[serde(rename = "group")]
    pub groups: Vec<PopulationGroup>,
    /// Latent qualities; evenly spaced between anchor and reference when absent.
    #[serde(default)]
    pub ground_truth: Option<GroundTruth>,
    /// Per-item spread of latent qualities around each condition's value.
    #[serde(default)]
    pub item_spread_sd: f64,
    /// Synthetic objective metrics to correlate against.
    #[serde(default, rename = "metric")]
    pub metrics: Vec<crate::objective::SyntheticMetric>,
}

impl PopulationSpec {
    pub fn new(groups: Vec<PopulationGroup>) -> Self {
        Self {
            groups,
            ground_truth: None,
            item_spread_sd: 0.0,
            metrics: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml_string(&self) -> Result<String, toml::ser::Error> {
        toml::to_string_pretty(self)
    }

    /// `diligent` careful listeners plus random clickers making up
    /// `clicker_share` of the whole population.
    pub fn with_clickers(diligent: usize, noise_sd: f64, clicker_share: f64) -> Self {
        let clickers = (diligent as f64 * clicker_share / (1.0 - clicker_share)).round() as usize;
        Self::new(vec![
            PopulationGroup {
                archetype: RaterArchetype::diligent(noise_sd),
                count: diligent,
            },
            PopulationGroup {
                archetype: RaterArchetype::random_clicker(),
                count: clickers,
            },
        ])
    }
}
