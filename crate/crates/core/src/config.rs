//! Experiment definition files and stimulus manifests.
//!
//! An experiment is described by one TOML file (conditions, items, limits,
//! qualification material, screening thresholds) plus a CSV manifest mapping
//! every (item, condition) pair to an audio file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Condition, ConditionId, ExperimentId, Family, ItemId, Role, Stimulus};
use crate::qualification::{GatingPolicy, HearingTestSpec, HearingTrial};
use crate::screening::ScreeningConfig;

/// Hard ceilings on the configurable limits.
pub const MAX_CONDITIONS_PER_QUESTION: usize = 6;
pub const MAX_STIMULI_PER_BLOCK: usize = 26;
pub const MAX_BLOCKS_PER_LISTENER: usize = 3;
/// Stimuli longer than this draw a warning; crowd listeners do better with short files.
pub const LONG_STIMULUS_S: f64 = 12.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{what}, line {line} column {column}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot serialize experiment config: {0}")]
    Emit(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub max_conditions_per_question: usize,
    pub max_stimuli_per_block: usize,
    pub max_blocks_per_listener: usize,
    /// Accepted votes wanted per item before its block stops being handed out.
    pub responses_target_per_item: u32,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_conditions_per_question: MAX_CONDITIONS_PER_QUESTION,
            max_stimuli_per_block: MAX_STIMULI_PER_BLOCK,
            max_blocks_per_listener: MAX_BLOCKS_PER_LISTENER,
            responses_target_per_item: 15,
        }
    }
}

/// Platform-side participant filters. They are applied on the crowd platform
/// when publishing the task; the record here documents what was used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrescreenRecord {
    pub min_approval_rate: f64,
    pub min_completed_tasks: u32,
    pub platform_filters: Vec<String>,
}

impl Default for PrescreenRecord {
    fn default() -> Self {
        Self {
            min_approval_rate: 0.97,
            min_completed_tasks: 100,
            platform_filters: Vec::new(),
        }
    }
}

/// The training screen: one item with clearly separated conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub item_id: ItemId,
    /// Conditions shown in training. Empty means reference, anchor and the
    /// first system under test.
    #[serde(default)]
    pub conditions: Vec<ConditionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: ExperimentId,
    #[serde(default)]
    pub title: String,
    /// Root of every derived random stream (partitioning, shuffles, nonces).
    #[serde(default)]
    pub seed: u64,
    /// Shown to listeners who finish, for submission on the crowd platform.
    #[serde(default)]
    pub completion_code: String,
    /// Require a dsp/dnn family on every system under test.
    #[serde(default)]
    pub objective_analysis: bool,
    #[serde(default = "default_session_timeout_s")]
    pub session_timeout_s: u64,
    pub items: Vec<ItemId>,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub screening: ScreeningConfig,
    #[serde(default)]
    pub prescreen: PrescreenRecord,
    #[serde(default)]
    pub gating: GatingPolicy,
    pub training: TrainingSpec,
    pub hearing_test: HearingTestSpec,
    pub conditions: Vec<Condition>,
}

fn default_session_timeout_s() -> u64 {
    2 * 60 * 60
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse {
                what: "experiment config",
                line,
                column,
                message: e.message().to_owned(),
            }
        })
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn condition(&self, id: &ConditionId) -> Option<&Condition> {
        self.conditions.iter().find(|c| &c.id == id)
    }

    pub fn with_role(&self, role: Role) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.role == role)
    }

    pub fn reference(&self) -> Option<&Condition> {
        self.with_role(Role::Reference)
    }

    pub fn anchor(&self) -> Option<&Condition> {
        self.with_role(Role::Anchor)
    }

    /// Conditions shown on the training screen, in config order.
    pub fn training_conditions(&self) -> Vec<Condition> {
        if self.training.conditions.is_empty() {
            let mut out: Vec<Condition> = self
                .conditions
                .iter()
                .filter(|c| c.role != Role::SystemUnderTest)
                .cloned()
                .collect();
            if let Some(sut) = self.with_role(Role::SystemUnderTest) {
                out.push(sut.clone());
            }
            out
        } else {
            self.conditions
                .iter()
                .filter(|c| self.training.conditions.contains(&c.id))
                .cloned()
                .collect()
        }
    }
}

/// The (item, condition) → audio file table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stimuli: Vec<Stimulus>,
}

impl Manifest {
    pub fn read_csv<R: Read>(input: R) -> Result<Self, ConfigError> {
        let mut r = csv::Reader::from_reader(input);
        let mut stimuli = Vec::new();
        for rec in r.deserialize() {
            let s: Stimulus = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                ConfigError::Parse {
                    what: "stimulus manifest",
                    line,
                    column: 0,
                    message: e.to_string(),
                }
            })?;
            stimuli.push(s);
        }
        Ok(Self { stimuli })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ConfigError> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.stimuli {
            w.serialize(s).map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn lookup(&self, item: &ItemId, condition: &ConditionId) -> Option<&Stimulus> {
        self.stimuli
            .iter()
            .find(|s| &s.item_id == item && &s.condition_id == condition)
    }

    /// Index keyed by (item, condition) for repeated lookups.
    pub fn index(&self) -> BTreeMap<(ItemId, ConditionId), Stimulus> {
        self.stimuli
            .iter()
            .map(|s| ((s.item_id.clone(), s.condition_id.clone()), s.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoItems,
    NoConditions,
    MissingReference,
    MissingAnchor,
    DuplicateRole(Role),
    DuplicateCondition(ConditionId),
    DuplicateItem(ItemId),
    TooManyConditions { count: usize, max: usize },
    ConditionLimitAboveCeiling(usize),
    BlockLimitAboveCeiling(usize),
    BlockCountAboveCeiling(usize),
    QuestionExceedsBlock { conditions: usize, max_stimuli: usize },
    DisqualifyFractionOutOfRange(f64),
    NonPositiveIqrMultiplier(f64),
    ZeroResponsesTarget,
    MissingFamily(ConditionId),
    DuplicateStimulus { item: ItemId, condition: ConditionId },
    MissingStimulus { item: ItemId, condition: ConditionId },
    UnknownCondition(ConditionId),
    UnknownItem(ItemId),
    InvalidDuration { item: ItemId, condition: ConditionId },
    HearingTest(String),
    TrainingUnknownCondition(ConditionId),
    TrainingNeedsReferenceAndAnchor,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NoItems => write!(f, "no items"),
            NoConditions => write!(f, "no conditions"),
            MissingReference => write!(f, "missing reference condition"),
            MissingAnchor => write!(f, "missing anchor condition"),
            DuplicateRole(r) => write!(f, "more than one {r} condition"),
            DuplicateCondition(c) => write!(f, "duplicate condition id {c}"),
            DuplicateItem(i) => write!(f, "duplicate item id {i}"),
            TooManyConditions { count, max } => {
                write!(f, "exceeds max_conditions_per_question={max} ({count} conditions)")
            }
            ConditionLimitAboveCeiling(n) => write!(
                f,
                "max_conditions_per_question={n} is above {MAX_CONDITIONS_PER_QUESTION}"
            ),
            BlockLimitAboveCeiling(n) => {
                write!(f, "max_stimuli_per_block={n} is above {MAX_STIMULI_PER_BLOCK}")
            }
            BlockCountAboveCeiling(n) => write!(
                f,
                "max_blocks_per_listener={n} is above {MAX_BLOCKS_PER_LISTENER}"
            ),
            QuestionExceedsBlock {
                conditions,
                max_stimuli,
            } => write!(
                f,
                "{conditions} conditions per question do not fit max_stimuli_per_block={max_stimuli}"
            ),
            DisqualifyFractionOutOfRange(x) => {
                write!(f, "disqualify_fraction={x} must lie strictly between 0 and 1")
            }
            NonPositiveIqrMultiplier(x) => write!(f, "iqr_multiplier={x} must be positive"),
            ZeroResponsesTarget => write!(f, "responses_target_per_item must be at least 1"),
            MissingFamily(c) => write!(
                f,
                "condition {c} needs a dsp/dnn family for objective analysis"
            ),
            DuplicateStimulus { item, condition } => {
                write!(f, "duplicate stimulus for item {item}, condition {condition}")
            }
            MissingStimulus { item, condition } => {
                write!(f, "missing stimulus for item {item}, condition {condition}")
            }
            UnknownCondition(c) => write!(f, "manifest references unknown condition {c}"),
            UnknownItem(i) => write!(f, "manifest references unknown item {i}"),
            InvalidDuration { item, condition } => write!(
                f,
                "stimulus for item {item}, condition {condition} has a non-positive duration"
            ),
            HearingTest(msg) => write!(f, "{msg}"),
            TrainingUnknownCondition(c) => write!(f, "training lists unknown condition {c}"),
            TrainingNeedsReferenceAndAnchor => {
                write!(f, "training conditions must include the reference and the anchor")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    LongStimulus {
        item: ItemId,
        condition: ConditionId,
        duration_s: f64,
    },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::LongStimulus {
                item,
                condition,
                duration_s,
            } => write!(
                f,
                "stimulus {item}/{condition} lasts {duration_s:.1} s (above {LONG_STIMULUS_S} s)"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Warning>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a parsed config and its manifest against the protocol limits.
/// Problems are collected, not raised.
pub fn validate_experiment_config(config: &ExperimentConfig, manifest: &Manifest) -> ValidationResult {
    let mut v = Vec::new();
    let mut warnings = Vec::new();

    if config.items.is_empty() {
        v.push(Violation::NoItems);
    }
    if config.conditions.is_empty() {
        v.push(Violation::NoConditions);
    }
    let mut seen = BTreeSet::new();
    for c in &config.conditions {
        if !seen.insert(&c.id) {
            v.push(Violation::DuplicateCondition(c.id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for i in &config.items {
        if !seen.insert(i) {
            v.push(Violation::DuplicateItem(i.clone()));
        }
    }
    if !config.conditions.is_empty() {
        match crate::model::check_roles(&config.conditions) {
            Ok(()) => {}
            Err(crate::model::ModelError::MissingReference) => v.push(Violation::MissingReference),
            Err(crate::model::ModelError::MissingAnchor) => v.push(Violation::MissingAnchor),
            Err(crate::model::ModelError::DuplicateRole(r)) => v.push(Violation::DuplicateRole(r)),
            Err(_) => {}
        }
        // A missing anchor masks a duplicate reference and vice versa; report both.
        if config.anchor().is_none() && !v.contains(&Violation::MissingAnchor) {
            v.push(Violation::MissingAnchor);
        }
    }

    let limits = &config.limits;
    if limits.max_conditions_per_question > MAX_CONDITIONS_PER_QUESTION {
        v.push(Violation::ConditionLimitAboveCeiling(limits.max_conditions_per_question));
    }
    if limits.max_stimuli_per_block > MAX_STIMULI_PER_BLOCK {
        v.push(Violation::BlockLimitAboveCeiling(limits.max_stimuli_per_block));
    }
    if limits.max_blocks_per_listener > MAX_BLOCKS_PER_LISTENER {
        v.push(Violation::BlockCountAboveCeiling(limits.max_blocks_per_listener));
    }
    let max_conditions = limits.max_conditions_per_question.min(MAX_CONDITIONS_PER_QUESTION);
    if config.conditions.len() > max_conditions {
        v.push(Violation::TooManyConditions {
            count: config.conditions.len(),
            max: max_conditions,
        });
    }
    if config.conditions.len() > limits.max_stimuli_per_block {
        v.push(Violation::QuestionExceedsBlock {
            conditions: config.conditions.len(),
            max_stimuli: limits.max_stimuli_per_block,
        });
    }
    if limits.responses_target_per_item == 0 {
        v.push(Violation::ZeroResponsesTarget);
    }
    let fraction = config.screening.disqualify_fraction;
    if !(fraction > 0.0 && fraction < 1.0) {
        v.push(Violation::DisqualifyFractionOutOfRange(fraction));
    }
    if !(config.screening.iqr_multiplier > 0.0) {
        v.push(Violation::NonPositiveIqrMultiplier(config.screening.iqr_multiplier));
    }
    if config.objective_analysis {
        for c in &config.conditions {
            if c.role == Role::SystemUnderTest && c.family == Family::None {
                v.push(Violation::MissingFamily(c.id.clone()));
            }
        }
    }

    v.extend(config.hearing_test.problems().into_iter().map(Violation::HearingTest));

    for c in &config.training.conditions {
        if config.condition(c).is_none() {
            v.push(Violation::TrainingUnknownCondition(c.clone()));
        }
    }
    let training = config.training_conditions();
    let has = |role| training.iter().any(|c| c.role == role);
    if !config.conditions.is_empty() && !(has(Role::Reference) && has(Role::Anchor)) {
        v.push(Violation::TrainingNeedsReferenceAndAnchor);
    }

    // manifest: complete, duplicate-free matrix over items (+ training item)
    let condition_ids: BTreeSet<&ConditionId> = config.conditions.iter().map(|c| &c.id).collect();
    let mut items: BTreeSet<&ItemId> = config.items.iter().collect();
    items.insert(&config.training.item_id);
    let mut cells: BTreeMap<(&ItemId, &ConditionId), usize> = BTreeMap::new();
    let mut unknown_conditions = BTreeSet::new();
    let mut unknown_items = BTreeSet::new();
    for s in &manifest.stimuli {
        if !condition_ids.contains(&s.condition_id) {
            unknown_conditions.insert(s.condition_id.clone());
            continue;
        }
        if !items.contains(&s.item_id) {
            unknown_items.insert(s.item_id.clone());
            continue;
        }
        *cells.entry((&s.item_id, &s.condition_id)).or_default() += 1;
        if !(s.duration_s > 0.0) {
            v.push(Violation::InvalidDuration {
                item: s.item_id.clone(),
                condition: s.condition_id.clone(),
            });
        } else if s.duration_s > LONG_STIMULUS_S {
            warnings.push(Warning::LongStimulus {
                item: s.item_id.clone(),
                condition: s.condition_id.clone(),
                duration_s: s.duration_s,
            });
        }
    }
    v.extend(unknown_conditions.into_iter().map(Violation::UnknownCondition));
    v.extend(unknown_items.into_iter().map(Violation::UnknownItem));
    for ((item, condition), n) in &cells {
        if *n > 1 {
            v.push(Violation::DuplicateStimulus {
                item: (*item).clone(),
                condition: (*condition).clone(),
            });
        }
    }
    for item in &config.items {
        for c in &config.conditions {
            if !cells.contains_key(&(item, &c.id)) {
                v.push(Violation::MissingStimulus {
                    item: item.clone(),
                    condition: c.id.clone(),
                });
            }
        }
    }
    for c in &training {
        if !cells.contains_key(&(&config.training.item_id, &c.id)) {
            v.push(Violation::MissingStimulus {
                item: config.training.item_id.clone(),
                condition: c.id.clone(),
            });
        }
    }

    ValidationResult {
        violations: v,
        warnings,
    }
}

/// A ready-to-run example: six conditions (reference, anchor, two DSP and two
/// DNN codecs), `n_items` items, a training item and a six-set hearing test.
pub fn sample_experiment(n_items: usize) -> (ExperimentConfig, Manifest) {
    let conditions = vec![
        Condition::new("cond-ref", "Reference", Role::Reference, Family::None),
        Condition::new("cond-anchor", "Opus 6 kbps (anchor)", Role::Anchor, Family::Dsp),
        Condition::new("cond-opus16", "Opus 16 kbps", Role::SystemUnderTest, Family::Dsp),
        Condition::new("cond-evs", "EVS", Role::SystemUnderTest, Family::Dsp),
        Condition::new("cond-encodec", "EnCodec 6 kbps", Role::SystemUnderTest, Family::Dnn),
        Condition::new("cond-webexai", "Webex AI 6 kbps", Role::SystemUnderTest, Family::Dnn),
    ];
    let items: Vec<ItemId> = (1..=n_items).map(|i| ItemId(format!("item{i:02}"))).collect();
    let training_item = ItemId::new("training01");
    let keys = ["482", "105", "937", "260", "814", "573"];
    let config = ExperimentConfig {
        experiment_id: ExperimentId::new("sample"),
        title: "Speech codec comparison".into(),
        seed: 2025,
        completion_code: "C0MPL3TE".into(),
        objective_analysis: true,
        session_timeout_s: default_session_timeout_s(),
        items: items.clone(),
        limits: Limits::default(),
        screening: ScreeningConfig::default(),
        prescreen: PrescreenRecord {
            platform_filters: vec![
                "first-language=English".into(),
                "hearing-difficulties=no".into(),
                "cochlear-implant=no".into(),
            ],
            ..PrescreenRecord::default()
        },
        gating: GatingPolicy::default(),
        training: TrainingSpec {
            item_id: training_item.clone(),
            conditions: conditions.iter().map(|c| c.id.clone()).collect(),
        },
        hearing_test: HearingTestSpec {
            sets: keys
                .iter()
                .enumerate()
                .map(|(i, k)| HearingTrial {
                    audio_uri: format!("hearing/din{:02}.wav", i + 1),
                    answer_key: k.parse().expect("valid digits"),
                })
                .collect(),
            pass_min_correct_sets: 5,
        },
        conditions,
    };
    let mut stimuli = Vec::new();
    for (n, item) in std::iter::once(&training_item).chain(&items).enumerate() {
        for c in &config.conditions {
            stimuli.push(Stimulus {
                item_id: item.clone(),
                condition_id: c.id.clone(),
                audio_uri: format!("audio/{item}/{}.wav", c.id),
                // 4.9 .. 7.9 s, centred near 6.4 s
                duration_s: 4.9 + (n % 7) as f64 * 0.5,
            });
        }
    }
    (config, Manifest { stimuli })
}
