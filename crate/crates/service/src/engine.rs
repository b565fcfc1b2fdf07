//! Session state machine and campaign state, rebuilt purely from events.
//!
//! Each mutating request is handled in two steps: a `decide_*` method checks
//! the request against the current state and produces exactly one event (or
//! an error, leaving the state untouched), and [`Engine::apply`] folds that
//! event into the state. Replay runs `apply` alone, so `apply` never consults
//! anything that is not in the event or the state built from earlier events.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crowdmushra_core::analysis::ObjectiveScoreTable;
use crowdmushra_core::config::{validate_experiment_config, ExperimentConfig, Manifest};
use crowdmushra_core::model::{
    derive_seed, shuffle_question, BlockId, Condition, ExperimentId, ListenerId, MushraQuestion,
    QuestionId, RatingSet, ResolvedRating, SlotLabel,
};
use crowdmushra_core::partition::{partition_stimuli, AssignmentLedger, TestBlock};
use crowdmushra_core::qualification::{
    advance_training, evaluate_questionnaire, parse_hearing_answers, score_hearing_test,
    validate_training_attempt, EligibilityVerdict, QualificationError, QuestionnaireResponse,
    RejectReason, TrainingState, DIGITS_PER_SET,
};
use crowdmushra_core::screening::realtime_screen;

use crate::error::ServiceError;
use crate::events::{AdminAction, Event, EventRecord};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum RejectionReason {
    Ineligible { reasons: Vec<RejectReason> },
    HearingTestFailed,
    TrainingExhausted,
    ScreeningFailed,
    Timeout,
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectionReason::Ineligible { reasons } => {
                let r: Vec<String> = reasons.iter().map(|r| r.to_string()).collect();
                write!(f, "ineligible ({})", r.join(", "))
            }
            RejectionReason::HearingTestFailed => f.write_str("hearing-test-failed"),
            RejectionReason::TrainingExhausted => f.write_str("training-exhausted"),
            RejectionReason::ScreeningFailed => f.write_str("screening-failed"),
            RejectionReason::Timeout => f.write_str("timeout"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum SessionState {
    Created,
    QuestionnaireDone,
    HearingPassed,
    /// Failed training attempts so far.
    Training { attempts: u8 },
    Rating { block_index: usize },
    Completed,
    Rejected { reason: RejectionReason },
}

impl SessionState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionState::Completed | SessionState::Rejected { .. })
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionState::Created => f.write_str("created"),
            SessionState::QuestionnaireDone => f.write_str("questionnaire-done"),
            SessionState::HearingPassed => f.write_str("hearing-passed"),
            SessionState::Training { attempts } => write!(f, "training({attempts})"),
            SessionState::Rating { block_index } => write!(f, "rating({block_index})"),
            SessionState::Completed => f.write_str("completed"),
            SessionState::Rejected { reason } => write!(f, "rejected({reason})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveBlock {
    pub block_id: BlockId,
    pub questions: Vec<MushraQuestion>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinishedBlock {
    pub block_id: BlockId,
    pub accepted: bool,
    pub ratings: Vec<ResolvedRating>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: SessionId,
    pub experiment_id: ExperimentId,
    pub listener_id: ListenerId,
    pub state: SessionState,
    pub training: TrainingState,
    pub training_question: Option<MushraQuestion>,
    pub current_block: Option<ActiveBlock>,
    pub finished_blocks: Vec<FinishedBlock>,
    pub created_at: u64,
    pub updated_at: u64,
    idempotent: BTreeMap<String, Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub manifest: Manifest,
    pub open: bool,
    pub ledger: AssignmentLedger,
    pub banned: BTreeSet<String>,
    pub workers: BTreeMap<String, SessionId>,
    pub objective: Vec<ObjectiveScoreTable>,
}

/// What the client has to render next. Carries only opaque labels and
/// session-scoped URIs, never condition identities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "kebab-case")]
pub enum Step {
    Questionnaire {
        title: String,
    },
    HearingTest {
        trials: Vec<HearingTrialView>,
        digits_per_set: usize,
    },
    Training {
        attempts_remaining: u8,
        feedback: Vec<String>,
        question: QuestionView,
    },
    Rating {
        block_index: usize,
        max_blocks: usize,
        questions: Vec<QuestionView>,
    },
    Completed {
        completion_code: String,
        blocks_completed: usize,
    },
    Rejected {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HearingTrialView {
    pub index: usize,
    pub audio_uri: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotView {
    pub slot: SlotLabel,
    pub audio_uri: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionView {
    pub question_id: QuestionId,
    pub reference_uri: String,
    pub slots: Vec<SlotView>,
}

/// Slider scores for one question as sent by the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRating {
    pub question_id: QuestionId,
    pub scores: BTreeMap<SlotLabel, u8>,
    #[serde(default)]
    pub elapsed_ms: u64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "kebab-case")]
pub enum StepPayload {
    Questionnaire(QuestionnaireResponse),
    HearingTest {
        answers: Vec<String>,
    },
    Training {
        rating: ClientRating,
    },
    Rating {
        ratings: Vec<ClientRating>,
        /// Ask for another block after this one, if any is available.
        #[serde(default = "yes")]
        continue_rating: bool,
    },
}

impl StepPayload {
    fn name(&self) -> &'static str {
        match self {
            StepPayload::Questionnaire(_) => "questionnaire",
            StepPayload::HearingTest { .. } => "hearing-test",
            StepPayload::Training { .. } => "training",
            StepPayload::Rating { .. } => "rating",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub state: String,
    pub step: Step,
}

/// Outcome of a `decide_*` call.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    /// Append and apply this event.
    Append {
        session_id: Option<SessionId>,
        idempotency_key: Option<String>,
        event: Event,
    },
    /// Nothing to record; answer with the current view of this session.
    Existing(SessionId),
    /// A retried request; answer with the response recorded the first time.
    Replayed(SessionView),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Engine {
    pub experiments: BTreeMap<ExperimentId, Experiment>,
    pub sessions: BTreeMap<SessionId, Session>,
    pub last_seq: u64,
}

fn invalid(e: impl fmt::Display) -> ServiceError {
    ServiceError::Invalid(e.to_string())
}

pub fn stimulus_uri(session: &SessionId, slot: &SlotLabel) -> String {
    format!("/sessions/{session}/stimuli/{slot}")
}

pub fn hearing_uri(session: &SessionId, index: usize) -> String {
    format!("/sessions/{session}/hearing/{index}")
}

fn question_view(session: &SessionId, q: &MushraQuestion) -> QuestionView {
    QuestionView {
        question_id: q.question_id.clone(),
        reference_uri: stimulus_uri(session, &q.open_reference_slot),
        slots: q
            .presented
            .iter()
            .map(|p| SlotView {
                slot: p.slot.clone(),
                audio_uri: stimulus_uri(session, &p.slot),
            })
            .collect(),
    }
}

fn to_rating_set(listener: &ListenerId, r: &ClientRating) -> RatingSet {
    RatingSet {
        question_id: r.question_id.clone(),
        listener_id: listener.clone(),
        scores: r.scores.clone(),
        elapsed_ms: r.elapsed_ms,
    }
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn experiment(&self, id: &ExperimentId) -> Result<&Experiment, ServiceError> {
        self.experiments
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("experiment {id}")))
    }

    pub fn session(&self, id: &SessionId) -> Result<&Session, ServiceError> {
        self.sessions
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn decide_create_experiment(
        &self,
        config: ExperimentConfig,
        manifest: Manifest,
    ) -> Result<Decision, ServiceError> {
        if self.experiments.contains_key(&config.experiment_id) {
            return Err(ServiceError::Conflict(format!(
                "experiment {} already exists",
                config.experiment_id
            )));
        }
        let result = validate_experiment_config(&config, &manifest);
        if !result.is_ok() {
            let v: Vec<String> = result.violations.iter().map(|v| v.to_string()).collect();
            return Err(ServiceError::Invalid(v.join("; ")));
        }
        partition_stimuli(&config, partition_seed(&config)).map_err(invalid)?;
        Ok(Decision::Append {
            session_id: None,
            idempotency_key: None,
            event: Event::ExperimentCreated { config, manifest },
        })
    }

    pub fn decide_admin(
        &self,
        experiment_id: &ExperimentId,
        action: AdminAction,
    ) -> Result<Decision, ServiceError> {
        self.experiment(experiment_id)?;
        if let AdminAction::LoadObjective { table } = &action {
            ObjectiveScoreTable::read_csv(table.as_bytes()).map_err(invalid)?;
        }
        Ok(Decision::Append {
            session_id: None,
            idempotency_key: None,
            event: Event::AdminAction {
                experiment_id: experiment_id.clone(),
                action,
            },
        })
    }

    pub fn decide_create_session(
        &self,
        experiment_id: &ExperimentId,
        worker: &str,
    ) -> Result<Decision, ServiceError> {
        let exp = self.experiment(experiment_id)?;
        if worker.trim().is_empty() {
            return Err(ServiceError::Invalid("empty worker token".into()));
        }
        if exp.banned.contains(worker) {
            return Err(ServiceError::Forbidden(format!("worker {worker} is banned")));
        }
        if let Some(sid) = exp.workers.get(worker) {
            return match &self.sessions[sid].state {
                SessionState::Rejected { reason } => Err(ServiceError::Forbidden(format!(
                    "worker {worker} was rejected ({reason})"
                ))),
                _ => Ok(Decision::Existing(sid.clone())),
            };
        }
        if !exp.open {
            return Err(ServiceError::Gone(format!("experiment {experiment_id} is closed")));
        }
        Ok(Decision::Append {
            session_id: Some(session_id_for(&exp.config, worker, &self.sessions)),
            idempotency_key: None,
            event: Event::SessionCreated {
                experiment_id: experiment_id.clone(),
                worker: worker.to_owned(),
            },
        })
    }

    /// Sessions idle for longer than their experiment's timeout at `now`.
    pub fn idle_sessions(&self, now: u64) -> Vec<SessionId> {
        self.sessions
            .values()
            .filter(|s| self.is_idle(s, now))
            .map(|s| s.session_id.clone())
            .collect()
    }

    pub fn is_idle(&self, s: &Session, now: u64) -> bool {
        let timeout = self.experiments[&s.experiment_id].config.session_timeout_s;
        !s.state.is_terminal() && now.saturating_sub(s.updated_at) > timeout
    }

    pub fn decide_submit(
        &self,
        session_id: &SessionId,
        idempotency_key: Option<String>,
        payload: StepPayload,
    ) -> Result<Decision, ServiceError> {
        let s = self.session(session_id)?;
        if let Some(view) = idempotency_key.as_ref().and_then(|k| s.idempotent.get(k)) {
            return Ok(Decision::Replayed(SessionView {
                session_id: session_id.clone(),
                state: s.state.to_string(),
                step: view.clone(),
            }));
        }
        if s.state.is_terminal() {
            return Err(ServiceError::Gone(format!("session {session_id} is {}", s.state)));
        }
        let exp = &self.experiments[&s.experiment_id];
        let event = match (&s.state, payload) {
            (SessionState::Created, StepPayload::Questionnaire(response)) => {
                let verdict = evaluate_questionnaire(&response, &exp.config.gating).map_err(invalid)?;
                Event::Questionnaire { response, verdict }
            }
            (SessionState::QuestionnaireDone, StepPayload::HearingTest { answers }) => {
                let answers = parse_hearing_answers(&answers).map_err(invalid)?;
                let verdict = score_hearing_test(&answers, &exp.config.hearing_test).map_err(invalid)?;
                Event::HearingResult { answers, verdict }
            }
            (
                SessionState::HearingPassed | SessionState::Training { .. },
                StepPayload::Training { rating },
            ) => {
                let question = s.training_question.as_ref().expect("training question set");
                let rating = to_rating_set(&s.listener_id, &rating);
                let verdict = validate_training_attempt(&rating, question).map_err(|e| match e {
                    QualificationError::Mismatch(m) => invalid(m),
                    other => invalid(other),
                })?;
                Event::TrainingAttempt { rating, verdict }
            }
            (
                SessionState::Rating { .. },
                StepPayload::Rating {
                    ratings,
                    continue_rating,
                },
            ) => {
                let active = s.current_block.as_ref().expect("rating state has a block");
                let ratings: Vec<RatingSet> =
                    ratings.iter().map(|r| to_rating_set(&s.listener_id, r)).collect();
                let mut seen = BTreeSet::new();
                if let Some(dup) = ratings.iter().find(|r| !seen.insert(&r.question_id)) {
                    return Err(ServiceError::Invalid(format!(
                        "question {} rated twice",
                        dup.question_id
                    )));
                }
                let block = exp.ledger.block(active.block_id).expect("assigned block exists");
                let verdict = realtime_screen(&ratings, &active.questions, block, &exp.config.screening)
                    .map_err(invalid)?;
                Event::RatingsSubmitted {
                    block_id: active.block_id,
                    ratings,
                    verdict,
                    continue_rating,
                }
            }
            (state, payload) => {
                return Err(ServiceError::Conflict(format!(
                    "{} payload does not match session state {state}",
                    payload.name()
                )))
            }
        };
        Ok(Decision::Append {
            session_id: Some(session_id.clone()),
            idempotency_key,
            event,
        })
    }

    /// Folds one event into the state. Events are trusted: they were either
    /// produced by a `decide_*` call against this same state or read back
    /// from a log that was written that way.
    pub fn apply(&mut self, record: &EventRecord) -> Result<(), ServiceError> {
        if record.seq <= self.last_seq {
            return Err(ServiceError::Storage(format!(
                "event {} out of order after {}",
                record.seq, self.last_seq
            )));
        }
        let now = record.timestamp;
        match &record.event {
            Event::ExperimentCreated { config, manifest } => {
                let blocks = partition_stimuli(config, partition_seed(config)).map_err(invalid)?;
                let ledger = AssignmentLedger::new(blocks, config.limits.responses_target_per_item);
                self.experiments.insert(
                    config.experiment_id.clone(),
                    Experiment {
                        config: config.clone(),
                        manifest: manifest.clone(),
                        open: true,
                        ledger,
                        banned: BTreeSet::new(),
                        workers: BTreeMap::new(),
                        objective: Vec::new(),
                    },
                );
            }
            Event::AdminAction {
                experiment_id,
                action,
            } => {
                let exp = self
                    .experiments
                    .get_mut(experiment_id)
                    .ok_or_else(|| ServiceError::Storage(format!("unknown experiment {experiment_id}")))?;
                match action {
                    AdminAction::CloseExperiment => exp.open = false,
                    AdminAction::BanWorker { worker } => {
                        exp.banned.insert(worker.clone());
                    }
                    AdminAction::LoadObjective { table } => {
                        exp.objective = ObjectiveScoreTable::read_csv(table.as_bytes()).map_err(invalid)?;
                    }
                }
            }
            Event::SessionCreated {
                experiment_id,
                worker,
            } => {
                let sid = session_of(record)?;
                let exp = self
                    .experiments
                    .get_mut(experiment_id)
                    .ok_or_else(|| ServiceError::Storage(format!("unknown experiment {experiment_id}")))?;
                let listener_id = ListenerId::new(worker.as_str());
                exp.ledger.register(&listener_id);
                exp.workers.insert(worker.clone(), sid.clone());
                self.sessions.insert(
                    sid.clone(),
                    Session {
                        session_id: sid,
                        experiment_id: experiment_id.clone(),
                        listener_id,
                        state: SessionState::Created,
                        training: TrainingState::default(),
                        training_question: None,
                        current_block: None,
                        finished_blocks: Vec::new(),
                        created_at: now,
                        updated_at: now,
                        idempotent: BTreeMap::new(),
                    },
                );
            }
            Event::Questionnaire { verdict, .. } => {
                let s = self.session_mut(record)?;
                s.state = match verdict {
                    EligibilityVerdict::Eligible => SessionState::QuestionnaireDone,
                    EligibilityVerdict::Rejected(reasons) => SessionState::Rejected {
                        reason: RejectionReason::Ineligible {
                            reasons: reasons.clone(),
                        },
                    },
                };
            }
            Event::HearingResult { verdict, .. } => {
                let passed = verdict.passed;
                let sid = session_of(record)?;
                if passed {
                    self.sessions.get_mut(&sid).expect("checked").state = SessionState::HearingPassed;
                    self.new_training_question(&sid)?;
                } else {
                    self.session_mut(record)?.state = SessionState::Rejected {
                        reason: RejectionReason::HearingTestFailed,
                    };
                }
            }
            Event::TrainingAttempt { verdict, .. } => {
                let sid = session_of(record)?;
                let s = self.session_mut(record)?;
                s.training = advance_training(&s.training, verdict).map_err(invalid)?;
                if s.training.passed {
                    s.training_question = None;
                    self.start_next_block(&sid)?;
                } else if s.training.exhausted() {
                    s.training_question = None;
                    s.state = SessionState::Rejected {
                        reason: RejectionReason::TrainingExhausted,
                    };
                } else {
                    s.state = SessionState::Training {
                        attempts: s.training.attempts_used,
                    };
                    self.new_training_question(&sid)?;
                }
            }
            Event::RatingsSubmitted {
                block_id,
                ratings,
                verdict,
                continue_rating,
            } => {
                let sid = session_of(record)?;
                let s = self.sessions.get_mut(&sid).ok_or_else(|| unknown_session(&sid))?;
                let active = s
                    .current_block
                    .take()
                    .filter(|b| b.block_id == *block_id)
                    .ok_or_else(|| ServiceError::Storage(format!("{sid} has no active block {block_id}")))?;
                let resolved = ratings
                    .iter()
                    .map(|r| {
                        active
                            .questions
                            .iter()
                            .find(|q| q.question_id == r.question_id)
                            .ok_or_else(|| ServiceError::Storage(format!("unknown question {}", r.question_id)))
                            .and_then(|q| q.resolve(r).map_err(|e| ServiceError::Storage(e.to_string())))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let accepted = !verdict.rejected;
                s.finished_blocks.push(FinishedBlock {
                    block_id: *block_id,
                    accepted,
                    ratings: resolved,
                });
                let listener = s.listener_id.clone();
                let exp = self.experiments.get_mut(&s.experiment_id).expect("session experiment");
                exp.ledger
                    .complete(&listener, *block_id, accepted)
                    .map_err(|e| ServiceError::Storage(e.to_string()))?;
                if !accepted {
                    s.state = SessionState::Rejected {
                        reason: RejectionReason::ScreeningFailed,
                    };
                } else if *continue_rating {
                    self.start_next_block(&sid)?;
                } else {
                    s.state = SessionState::Completed;
                }
            }
            Event::SessionExpired => {
                let s = self.session_mut(record)?;
                s.state = SessionState::Rejected {
                    reason: RejectionReason::Timeout,
                };
                s.current_block = None;
                s.training_question = None;
                let listener = s.listener_id.clone();
                let exp_id = s.experiment_id.clone();
                self.experiments
                    .get_mut(&exp_id)
                    .expect("session experiment")
                    .ledger
                    .release(&listener);
            }
        }
        if let Some(sid) = &record.session_id {
            if let Some(s) = self.sessions.get_mut(sid) {
                s.updated_at = now;
            }
            if let Some(key) = &record.idempotency_key {
                let step = self.step(sid)?;
                self.sessions
                    .get_mut(sid)
                    .expect("present")
                    .idempotent
                    .insert(key.clone(), step);
            }
        }
        self.last_seq = record.seq;
        Ok(())
    }

    fn session_mut(&mut self, record: &EventRecord) -> Result<&mut Session, ServiceError> {
        let sid = session_of(record)?;
        self.sessions.get_mut(&sid).ok_or_else(|| unknown_session(&sid))
    }

    fn new_training_question(&mut self, sid: &SessionId) -> Result<(), ServiceError> {
        let s = self.sessions.get_mut(sid).ok_or_else(|| unknown_session(sid))?;
        let config = &self.experiments[&s.experiment_id].config;
        let attempt = (s.training.attempts_used + 1).to_string();
        let seed = derive_seed(config.seed, &[sid.as_str(), "training", &attempt]);
        let q = shuffle_question(&config.training.item_id, &config.training_conditions(), seed)
            .map_err(|e| ServiceError::Storage(e.to_string()))?;
        s.training_question = Some(q);
        Ok(())
    }

    /// Hands the listener the least-voted block they have not rated, or
    /// completes the session when the block quota or the pool is exhausted.
    fn start_next_block(&mut self, sid: &SessionId) -> Result<(), ServiceError> {
        let s = self.sessions.get_mut(sid).ok_or_else(|| unknown_session(sid))?;
        let exp = self.experiments.get_mut(&s.experiment_id).expect("session experiment");
        let block_index = s.finished_blocks.len();
        let next = exp
            .ledger
            .next_block_for(&s.listener_id, exp.config.limits.max_blocks_per_listener)
            .map_err(|e| ServiceError::Storage(e.to_string()))?
            .cloned();
        let Some(block) = next else {
            s.state = SessionState::Completed;
            return Ok(());
        };
        exp.ledger
            .assign(&s.listener_id, block.block_id)
            .map_err(|e| ServiceError::Storage(e.to_string()))?;
        let questions = block_questions(&exp.config, sid, &block)?;
        s.current_block = Some(ActiveBlock {
            block_id: block.block_id,
            questions,
        });
        s.state = SessionState::Rating { block_index };
        Ok(())
    }

    /// The client view of a session's current step.
    pub fn step(&self, sid: &SessionId) -> Result<Step, ServiceError> {
        let s = self.session(sid)?;
        let config = &self.experiments[&s.experiment_id].config;
        Ok(match &s.state {
            SessionState::Created => Step::Questionnaire {
                title: config.title.clone(),
            },
            SessionState::QuestionnaireDone => Step::HearingTest {
                trials: (0..config.hearing_test.sets.len())
                    .map(|index| HearingTrialView {
                        index,
                        audio_uri: hearing_uri(sid, index),
                    })
                    .collect(),
                digits_per_set: DIGITS_PER_SET,
            },
            SessionState::HearingPassed | SessionState::Training { .. } => Step::Training {
                attempts_remaining: s.training.attempts_remaining(),
                feedback: s
                    .training
                    .last_feedback
                    .iter()
                    .map(|c| c.feedback().to_owned())
                    .collect(),
                question: question_view(sid, s.training_question.as_ref().expect("training question")),
            },
            SessionState::Rating { block_index } => Step::Rating {
                block_index: *block_index,
                max_blocks: config.limits.max_blocks_per_listener,
                questions: s
                    .current_block
                    .as_ref()
                    .expect("active block")
                    .questions
                    .iter()
                    .map(|q| question_view(sid, q))
                    .collect(),
            },
            SessionState::Completed => Step::Completed {
                completion_code: config.completion_code.clone(),
                blocks_completed: s.finished_blocks.iter().filter(|b| b.accepted).count(),
            },
            SessionState::Rejected { reason } => Step::Rejected {
                reason: reason.to_string(),
            },
        })
    }

    pub fn view(&self, sid: &SessionId) -> Result<SessionView, ServiceError> {
        Ok(SessionView {
            session_id: sid.clone(),
            state: self.session(sid)?.state.to_string(),
            step: self.step(sid)?,
        })
    }

    /// Manifest-relative audio path behind a slot of the session's current
    /// training question or rating block.
    pub fn stimulus_path(&self, sid: &SessionId, slot: &SlotLabel) -> Result<String, ServiceError> {
        let s = self.session(sid)?;
        let not_found = || ServiceError::NotFound(format!("stimulus {slot}"));
        if s.state.is_terminal() {
            return Err(not_found());
        }
        let questions = s
            .training_question
            .iter()
            .chain(s.current_block.iter().flat_map(|b| b.questions.iter()));
        for q in questions {
            if let Some(cond) = q.condition_for(slot) {
                let exp = &self.experiments[&s.experiment_id];
                return exp
                    .manifest
                    .lookup(&q.item_id, cond)
                    .map(|st| st.audio_uri.clone())
                    .ok_or_else(not_found);
            }
        }
        Err(not_found())
    }

    pub fn hearing_path(&self, sid: &SessionId, index: usize) -> Result<String, ServiceError> {
        let s = self.session(sid)?;
        let not_found = || ServiceError::NotFound(format!("hearing trial {index}"));
        if s.state != SessionState::QuestionnaireDone {
            return Err(not_found());
        }
        self.experiments[&s.experiment_id]
            .config
            .hearing_test
            .sets
            .get(index)
            .map(|t| t.audio_uri.clone())
            .ok_or_else(not_found)
    }
}

fn unknown_session(sid: &SessionId) -> ServiceError {
    ServiceError::Storage(format!("unknown session {sid}"))
}

fn session_of(record: &EventRecord) -> Result<SessionId, ServiceError> {
    record
        .session_id
        .clone()
        .ok_or_else(|| ServiceError::Storage(format!("event {} lacks a session id", record.seq)))
}

pub fn partition_seed(config: &ExperimentConfig) -> u64 {
    derive_seed(config.seed, &["partition"])
}

/// Session ids are derived from the experiment seed and the worker token so
/// that seeded simulations are reproducible byte for byte.
fn session_id_for(
    config: &ExperimentConfig,
    worker: &str,
    existing: &BTreeMap<SessionId, Session>,
) -> SessionId {
    (0u32..)
        .map(|salt| {
            let seed = derive_seed(
                config.seed,
                &["session", config.experiment_id.as_str(), worker, &salt.to_string()],
            );
            SessionId(format!("s{seed:016x}"))
        })
        .find(|id| !existing.contains_key(id))
        .expect("unbounded salts")
}

fn block_questions(
    config: &ExperimentConfig,
    sid: &SessionId,
    block: &TestBlock,
) -> Result<Vec<MushraQuestion>, ServiceError> {
    let block_label = block.block_id.to_string();
    block
        .questions
        .iter()
        .map(|spec| {
            let conditions: Vec<Condition> = spec
                .conditions
                .iter()
                .filter_map(|c| config.condition(c).cloned())
                .collect();
            let seed = derive_seed(
                config.seed,
                &[sid.as_str(), "block", &block_label, spec.item_id.as_str()],
            );
            shuffle_question(&spec.item_id, &conditions, seed)
                .map_err(|e| ServiceError::Storage(e.to_string()))
        })
        .collect()
}
