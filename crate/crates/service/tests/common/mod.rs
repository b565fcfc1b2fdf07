#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use crowdmushra_core::config::{sample_experiment, ExperimentConfig, Manifest};
use crowdmushra_core::model::{MushraQuestion, Role, SlotLabel};
use crowdmushra_core::qualification::{
    Demographics, HearingSelfReport, LastListeningTest, ListeningDevice, QuestionnaireResponse,
};
use crowdmushra_service::{ClientRating, ManualClock, Service, SessionId, SessionView, Step, StepPayload};

pub const T0: u64 = 1_700_000_000;

pub struct Fixture {
    pub service: Service,
    pub config: ExperimentConfig,
    pub manifest: Manifest,
    pub clock: Arc<ManualClock>,
}

pub fn fixture(n_items: usize) -> Fixture {
    let (config, manifest) = sample_experiment(n_items);
    let clock = Arc::new(ManualClock::new(T0));
    let service = Service::in_memory(clock.clone(), "/nonexistent");
    service
        .create_experiment(config.clone(), manifest.clone())
        .unwrap();
    Fixture {
        service,
        config,
        manifest,
        clock,
    }
}

pub fn questionnaire(device: ListeningDevice) -> StepPayload {
    StepPayload::Questionnaire(QuestionnaireResponse {
        listening_device: Some(device),
        tiredness: Some(2),
        last_listening_test: Some(LastListeningTest::Never),
        hearing_self_report: Some(HearingSelfReport::Normal),
        demographics: Demographics {
            gender: Some("undisclosed".into()),
            age_bracket: Some("25-34".into()),
            english_level: Some("native".into()),
        },
    })
}

pub fn hearing(config: &ExperimentConfig, correct_sets: usize) -> StepPayload {
    StepPayload::HearingTest {
        answers: config
            .hearing_test
            .sets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i < correct_sets {
                    t.answer_key.to_string()
                } else {
                    "999".to_owned()
                }
            })
            .collect(),
    }
}

/// Scores a question by its hidden roles: reference 100, anchor 10, systems
/// spread over 40..=80. With `invert`, reference and anchor swap.
pub fn score(q: &MushraQuestion, invert: bool) -> ClientRating {
    let mut scores = BTreeMap::new();
    let mut k = 0u8;
    for p in &q.presented {
        let s = match (p.role, invert) {
            (Role::Reference, false) | (Role::Anchor, true) => 100,
            (Role::Anchor, false) | (Role::Reference, true) => 10,
            _ => {
                k += 1;
                40 + 10 * k
            }
        };
        scores.insert(p.slot.clone(), s);
    }
    ClientRating {
        question_id: q.question_id.clone(),
        scores,
        elapsed_ms: 1000,
    }
}

pub fn training_question(service: &Service, sid: &SessionId) -> MushraQuestion {
    service.with_engine(|e| e.sessions[sid].training_question.clone().unwrap())
}

pub fn block_questions(service: &Service, sid: &SessionId) -> Vec<MushraQuestion> {
    service.with_engine(|e| e.sessions[sid].current_block.clone().unwrap().questions)
}

pub fn rate_block(service: &Service, sid: &SessionId, invert: bool, continue_rating: bool) -> SessionView {
    let ratings = block_questions(service, sid)
        .iter()
        .map(|q| score(q, invert))
        .collect();
    service
        .submit(
            sid,
            None,
            StepPayload::Rating {
                ratings,
                continue_rating,
            },
        )
        .unwrap()
}

/// Enters a fresh worker and walks them to their first rating block.
pub fn qualified(service: &Service, config: &ExperimentConfig, worker: &str) -> SessionId {
    let view = service.create_session(&config.experiment_id, worker).unwrap();
    let sid = view.session_id;
    service
        .submit(&sid, None, questionnaire(ListeningDevice::WiredHeadphones))
        .unwrap();
    service.submit(&sid, None, hearing(config, 6)).unwrap();
    let q = training_question(service, &sid);
    let view = service
        .submit(&sid, None, StepPayload::Training { rating: score(&q, false) })
        .unwrap();
    assert!(matches!(view.step, Step::Rating { .. }), "{view:?}");
    sid
}

pub fn slots(q: &MushraQuestion) -> Vec<SlotLabel> {
    q.slots().cloned().collect()
}
