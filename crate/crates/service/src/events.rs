//! The append-only event vocabulary. Every state change of the service is
//! one event; replaying the log in order rebuilds the full state.

use serde::{Deserialize, Serialize};

use crowdmushra_core::config::{ExperimentConfig, Manifest};
use crowdmushra_core::model::{BlockId, ExperimentId, RatingSet};
use crowdmushra_core::qualification::{
    DigitTriplet, EligibilityVerdict, HearingVerdict, QuestionnaireResponse, TrainingVerdict,
};
use crowdmushra_core::screening::BlockVerdict;

use crate::engine::SessionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum AdminAction {
    CloseExperiment,
    BanWorker { worker: String },
    /// Objective scores as a delimited table, parsed when applied.
    LoadObjective { table: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum Event {
    ExperimentCreated {
        config: ExperimentConfig,
        manifest: Manifest,
    },
    AdminAction {
        experiment_id: ExperimentId,
        action: AdminAction,
    },
    SessionCreated {
        experiment_id: ExperimentId,
        worker: String,
    },
    Questionnaire {
        response: QuestionnaireResponse,
        verdict: EligibilityVerdict,
    },
    HearingResult {
        answers: Vec<DigitTriplet>,
        verdict: HearingVerdict,
    },
    TrainingAttempt {
        rating: RatingSet,
        verdict: TrainingVerdict,
    },
    RatingsSubmitted {
        block_id: BlockId,
        ratings: Vec<RatingSet>,
        verdict: BlockVerdict,
        continue_rating: bool,
    },
    SessionExpired,
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::ExperimentCreated { .. } => "experiment-created",
            Event::AdminAction { .. } => "admin-action",
            Event::SessionCreated { .. } => "session-created",
            Event::Questionnaire { .. } => "questionnaire",
            Event::HearingResult { .. } => "hearing-result",
            Event::TrainingAttempt { .. } => "training-attempt",
            Event::RatingsSubmitted { .. } => "ratings-submitted",
            Event::SessionExpired => "session-expired",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    /// Unix seconds.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    #[serde(flatten)]
    pub event: Event,
}
