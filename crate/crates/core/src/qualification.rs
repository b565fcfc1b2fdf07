//! Qualification phase: eligibility questionnaire, digits-in-noise hearing
//! screen and the training question with corrective feedback.
//!
//! Every function here is pure. The service serializes calls per listener.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, MushraQuestion, RatingSet, Role};

/// Number of training attempts a listener gets before being turned away.
pub const MAX_TRAINING_ATTEMPTS: u8 = 3;
/// Digit triplets played in the hearing screen.
pub const HEARING_SETS: usize = 6;
pub const DIGITS_PER_SET: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QualificationError {
    #[error("incomplete questionnaire, missing: {}", .0.join(", "))]
    IncompleteResponse(Vec<&'static str>),
    #[error("malformed hearing-test submission: {0}")]
    MalformedSubmission(String),
    #[error(transparent)]
    Mismatch(#[from] ModelError),
    #[error("training is already {0}")]
    TrainingClosed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ListeningDevice {
    WiredHeadphones,
    WirelessHeadphones,
    Loudspeaker,
    PhoneSpeaker,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LastListeningTest {
    #[serde(rename = "never")]
    Never,
    #[serde(rename = ">6mo")]
    OverSixMonths,
    #[serde(rename = "1-6mo")]
    OneToSixMonths,
    #[serde(rename = "<1mo")]
    UnderOneMonth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HearingSelfReport {
    Normal,
    Impaired,
    Unsure,
}

/// Recorded for reporting; never gates participation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Option<String>,
    pub age_bracket: Option<String>,
    pub english_level: Option<String>,
}

/// Answers as submitted by the client. Fields are optional so that an
/// incomplete form can be reported back instead of failing to parse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionnaireResponse {
    pub listening_device: Option<ListeningDevice>,
    /// 1 (fresh) to 5 (exhausted).
    pub tiredness: Option<u8>,
    pub last_listening_test: Option<LastListeningTest>,
    pub hearing_self_report: Option<HearingSelfReport>,
    #[serde(default)]
    pub demographics: Demographics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingPolicy {
    pub rejected_devices: Vec<ListeningDevice>,
    pub rejected_hearing: Vec<HearingSelfReport>,
    /// Reject when tiredness is above this level. `None` records tiredness only.
    pub max_tiredness: Option<u8>,
}

impl Default for GatingPolicy {
    fn default() -> Self {
        Self {
            rejected_devices: vec![ListeningDevice::Loudspeaker, ListeningDevice::PhoneSpeaker],
            rejected_hearing: vec![HearingSelfReport::Impaired],
            max_tiredness: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Device,
    Hearing,
    Tiredness,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Device => "device",
            RejectReason::Hearing => "hearing",
            RejectReason::Tiredness => "tiredness",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reasons", rename_all = "kebab-case")]
pub enum EligibilityVerdict {
    Eligible,
    Rejected(Vec<RejectReason>),
}

impl EligibilityVerdict {
    pub fn is_eligible(&self) -> bool {
        matches!(self, EligibilityVerdict::Eligible)
    }
}

pub fn evaluate_questionnaire(
    resp: &QuestionnaireResponse,
    policy: &GatingPolicy,
) -> Result<EligibilityVerdict, QualificationError> {
    let mut missing = Vec::new();
    if resp.listening_device.is_none() {
        missing.push("listening_device");
    }
    match resp.tiredness {
        Some(1..=5) => {}
        _ => missing.push("tiredness"),
    }
    if resp.last_listening_test.is_none() {
        missing.push("last_listening_test");
    }
    if resp.hearing_self_report.is_none() {
        missing.push("hearing_self_report");
    }
    let d = &resp.demographics;
    for (name, value) in [
        ("gender", &d.gender),
        ("age_bracket", &d.age_bracket),
        ("english_level", &d.english_level),
    ] {
        if value.as_deref().is_none_or(|v| v.trim().is_empty()) {
            missing.push(name);
        }
    }
    if !missing.is_empty() {
        return Err(QualificationError::IncompleteResponse(missing));
    }

    let mut reasons = Vec::new();
    if policy
        .rejected_devices
        .contains(&resp.listening_device.expect("checked"))
    {
        reasons.push(RejectReason::Device);
    }
    if policy
        .rejected_hearing
        .contains(&resp.hearing_self_report.expect("checked"))
    {
        reasons.push(RejectReason::Hearing);
    }
    if let Some(max) = policy.max_tiredness {
        if resp.tiredness.expect("checked") > max {
            reasons.push(RejectReason::Tiredness);
        }
    }
    Ok(if reasons.is_empty() {
        EligibilityVerdict::Eligible
    } else {
        EligibilityVerdict::Rejected(reasons)
    })
}

/// Three spoken digits, serialized as a three-character string such as `"482"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DigitTriplet(pub [u8; DIGITS_PER_SET]);

impl std::str::FromStr for DigitTriplet {
    type Err = QualificationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bytes = s.as_bytes();
        if bytes.len() != DIGITS_PER_SET || !bytes.iter().all(u8::is_ascii_digit) {
            return Err(QualificationError::MalformedSubmission(format!(
                "expected {DIGITS_PER_SET} digits, got {s:?}"
            )));
        }
        Ok(Self([bytes[0] - b'0', bytes[1] - b'0', bytes[2] - b'0']))
    }
}

impl TryFrom<String> for DigitTriplet {
    type Error = QualificationError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DigitTriplet> for String {
    fn from(d: DigitTriplet) -> Self {
        d.to_string()
    }
}

impl fmt::Display for DigitTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HearingTrial {
    pub audio_uri: String,
    /// Kept server-side; never part of a client payload.
    pub answer_key: DigitTriplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HearingTestSpec {
    pub sets: Vec<HearingTrial>,
    #[serde(default = "default_pass_min_correct_sets")]
    pub pass_min_correct_sets: usize,
}

fn default_pass_min_correct_sets() -> usize {
    5
}

impl HearingTestSpec {
    /// Problems with the spec itself, empty when it is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.sets.len() != HEARING_SETS {
            out.push(format!(
                "hearing test needs exactly {HEARING_SETS} digit sets, found {}",
                self.sets.len()
            ));
        }
        if self.pass_min_correct_sets == 0 || self.pass_min_correct_sets > self.sets.len() {
            out.push(format!(
                "pass_min_correct_sets={} must be within 1..={}",
                self.pass_min_correct_sets,
                self.sets.len()
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HearingVerdict {
    pub correct_sets: usize,
    pub total_sets: usize,
    pub passed: bool,
}

/// Set-level all-or-nothing scoring: a set counts only when every digit
/// matches the key in order.
pub fn score_hearing_test(
    answers: &[DigitTriplet],
    spec: &HearingTestSpec,
) -> Result<HearingVerdict, QualificationError> {
    if answers.len() != spec.sets.len() {
        return Err(QualificationError::MalformedSubmission(format!(
            "expected {} answers, got {}",
            spec.sets.len(),
            answers.len()
        )));
    }
    let correct_sets = answers
        .iter()
        .zip(&spec.sets)
        .filter(|(a, t)| **a == t.answer_key)
        .count();
    Ok(HearingVerdict {
        correct_sets,
        total_sets: spec.sets.len(),
        passed: correct_sets >= spec.pass_min_correct_sets,
    })
}

/// Parses raw string answers, e.g. as typed into the client form.
pub fn parse_hearing_answers(raw: &[String]) -> Result<Vec<DigitTriplet>, QualificationError> {
    raw.iter().map(|s| s.parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingCriterion {
    ZeroScore,
    ReferenceNotHighest,
    AnchorNotLowest,
}

impl TrainingCriterion {
    pub fn feedback(self) -> &'static str {
        match self {
            TrainingCriterion::ZeroScore => "scores cannot be equal to 0",
            TrainingCriterion::ReferenceNotHighest => "reference must be ranked highest",
            TrainingCriterion::AnchorNotLowest => "the anchor must be ranked lowest",
        }
    }
}

impl fmt::Display for TrainingCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.feedback())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingVerdict {
    pub violations: Vec<TrainingCriterion>,
}

impl TrainingVerdict {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn feedback(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.feedback().to_owned()).collect()
    }
}

/// Checks a training attempt against the three validation criteria.
///
/// Rankings use weak inequality: the hidden reference may tie with other
/// systems and the anchor may tie with other systems, but a reference tied
/// with the anchor violates both.
pub fn validate_training_attempt(
    ratings: &RatingSet,
    question: &MushraQuestion,
) -> Result<TrainingVerdict, QualificationError> {
    let resolved = question.resolve(ratings)?;
    let reference = resolved.reference_score().ok_or(ModelError::MissingReference)?;
    let anchor = resolved.anchor_score().ok_or(ModelError::MissingAnchor)?;

    let mut violations = Vec::new();
    if resolved.scores.iter().any(|s| s.score == 0) {
        violations.push(TrainingCriterion::ZeroScore);
    }
    let others = || resolved.scores.iter().filter(|s| s.role != Role::Reference);
    if others().any(|s| s.score > reference) || reference == anchor {
        violations.push(TrainingCriterion::ReferenceNotHighest);
    }
    let others = || resolved.scores.iter().filter(|s| s.role != Role::Anchor);
    if others().any(|s| s.score < anchor) || reference == anchor {
        violations.push(TrainingCriterion::AnchorNotLowest);
    }
    Ok(TrainingVerdict { violations })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    pub attempts_used: u8,
    pub passed: bool,
    pub last_feedback: Vec<TrainingCriterion>,
}

impl TrainingState {
    pub fn exhausted(&self) -> bool {
        !self.passed && self.attempts_used >= MAX_TRAINING_ATTEMPTS
    }

    pub fn attempts_remaining(&self) -> u8 {
        MAX_TRAINING_ATTEMPTS.saturating_sub(self.attempts_used)
    }
}

pub fn advance_training(
    state: &TrainingState,
    verdict: &TrainingVerdict,
) -> Result<TrainingState, QualificationError> {
    if state.passed {
        return Err(QualificationError::TrainingClosed("passed"));
    }
    if state.exhausted() {
        return Err(QualificationError::TrainingClosed("exhausted"));
    }
    Ok(TrainingState {
        attempts_used: state.attempts_used + 1,
        passed: verdict.passed(),
        last_feedback: verdict.violations.clone(),
    })
}
