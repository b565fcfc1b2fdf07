mod common;

use common::*;
use crowdmushra_core::model::{ListenerId, SlotLabel};
use crowdmushra_core::qualification::ListeningDevice;
use crowdmushra_service::{AdminAction, ExportFlavor, ServiceError, Step, StepPayload};

#[test]
fn full_flow_to_completion() {
    let f = fixture(40);
    let view = f.service.create_session(&f.config.experiment_id, "w1").unwrap();
    assert_eq!(view.state, "created");
    assert!(matches!(view.step, Step::Questionnaire { .. }));
    let sid = view.session_id;

    let view = f
        .service
        .submit(&sid, None, questionnaire(ListeningDevice::WiredHeadphones))
        .unwrap();
    assert_eq!(view.state, "questionnaire-done");
    match &view.step {
        Step::HearingTest { trials, digits_per_set } => {
            assert_eq!(trials.len(), 6);
            assert_eq!(*digits_per_set, 3);
        }
        other => panic!("{other:?}"),
    }

    let view = f.service.submit(&sid, None, hearing(&f.config, 5)).unwrap();
    assert_eq!(view.state, "hearing-passed");
    let Step::Training { attempts_remaining, feedback, question } = &view.step else {
        panic!("{view:?}")
    };
    assert_eq!(*attempts_remaining, 3);
    assert!(feedback.is_empty());
    assert_eq!(question.slots.len(), 6);

    let q = training_question(&f.service, &sid);
    let view = f
        .service
        .submit(&sid, None, StepPayload::Training { rating: score(&q, false) })
        .unwrap();
    assert_eq!(view.state, "rating(0)");

    for k in 0..3 {
        let Step::Rating { block_index, max_blocks, questions } = &view_of(&f, &sid).step else {
            panic!()
        };
        assert_eq!((*block_index, *max_blocks), (k, 3));
        // 6 conditions per question, 26 stimuli per block
        assert_eq!(questions.len(), 4);
        rate_block(&f.service, &sid, false, true);
    }
    let view = view_of(&f, &sid);
    assert_eq!(view.state, "completed");
    assert_eq!(
        view.step,
        Step::Completed {
            completion_code: "C0MPL3TE".into(),
            blocks_completed: 3
        }
    );
    let listener = ListenerId::new("w1");
    f.service.with_engine(|e| {
        let exp = &e.experiments[&f.config.experiment_id];
        assert_eq!(exp.ledger.completed_by(&listener).unwrap().len(), 3);
    });
}

fn view_of(f: &Fixture, sid: &crowdmushra_service::SessionId) -> crowdmushra_service::SessionView {
    f.service.current_step(sid).unwrap()
}

#[test]
fn listener_may_stop_after_one_block() {
    let f = fixture(40);
    let sid = qualified(&f.service, &f.config, "w1");
    let view = rate_block(&f.service, &sid, false, false);
    assert_eq!(view.state, "completed");
    assert!(matches!(view.step, Step::Completed { blocks_completed: 1, .. }));
}

#[test]
fn ineligible_device_is_rejected_and_cannot_reenter() {
    let f = fixture(4);
    let sid = f.service.create_session(&f.config.experiment_id, "w1").unwrap().session_id;
    let view = f
        .service
        .submit(&sid, None, questionnaire(ListeningDevice::Loudspeaker))
        .unwrap();
    assert_eq!(view.state, "rejected(ineligible (device))");
    assert!(matches!(
        f.service.create_session(&f.config.experiment_id, "w1"),
        Err(ServiceError::Forbidden(_))
    ));
    assert!(matches!(
        f.service.submit(&sid, None, hearing(&f.config, 6)),
        Err(ServiceError::Gone(_))
    ));
}

#[test]
fn incomplete_questionnaire_changes_nothing() {
    let f = fixture(4);
    let sid = f.service.create_session(&f.config.experiment_id, "w1").unwrap().session_id;
    let before = f.service.event_count();
    let err = f
        .service
        .submit(&sid, None, StepPayload::Questionnaire(Default::default()))
        .unwrap_err();
    assert!(matches!(err, ServiceError::Invalid(_)), "{err}");
    assert_eq!(f.service.event_count(), before);
    assert_eq!(f.service.current_step(&sid).unwrap().state, "created");
}

#[test]
fn hearing_test_boundary() {
    let f = fixture(4);
    let a = f.service.create_session(&f.config.experiment_id, "a").unwrap().session_id;
    let b = f.service.create_session(&f.config.experiment_id, "b").unwrap().session_id;
    for sid in [&a, &b] {
        f.service
            .submit(sid, None, questionnaire(ListeningDevice::WirelessHeadphones))
            .unwrap();
    }
    assert_eq!(f.service.submit(&a, None, hearing(&f.config, 5)).unwrap().state, "hearing-passed");
    let view = f.service.submit(&b, None, hearing(&f.config, 4)).unwrap();
    assert_eq!(view.state, "rejected(hearing-test-failed)");
}

#[test]
fn three_failed_training_attempts_reject() {
    let f = fixture(4);
    let sid = f.service.create_session(&f.config.experiment_id, "w").unwrap().session_id;
    f.service
        .submit(&sid, None, questionnaire(ListeningDevice::WiredHeadphones))
        .unwrap();
    f.service.submit(&sid, None, hearing(&f.config, 6)).unwrap();
    for attempt in 1..=3u8 {
        let q = training_question(&f.service, &sid);
        let view = f
            .service
            .submit(&sid, None, StepPayload::Training { rating: score(&q, true) })
            .unwrap();
        if attempt < 3 {
            assert_eq!(view.state, format!("training({attempt})"));
            let Step::Training { attempts_remaining, feedback, .. } = view.step else { panic!() };
            assert_eq!(attempts_remaining, 3 - attempt);
            assert_eq!(
                feedback,
                vec!["reference must be ranked highest", "the anchor must be ranked lowest"]
            );
        } else {
            assert_eq!(view.state, "rejected(training-exhausted)");
        }
    }
}

#[test]
fn training_reshuffles_between_attempts_and_can_recover() {
    let f = fixture(4);
    let sid = f.service.create_session(&f.config.experiment_id, "w").unwrap().session_id;
    f.service
        .submit(&sid, None, questionnaire(ListeningDevice::WiredHeadphones))
        .unwrap();
    f.service.submit(&sid, None, hearing(&f.config, 6)).unwrap();
    let first = training_question(&f.service, &sid);
    f.service
        .submit(&sid, None, StepPayload::Training { rating: score(&first, true) })
        .unwrap();
    let second = training_question(&f.service, &sid);
    assert_ne!(first.question_id, second.question_id);
    // answers to the stale question are refused
    let stale = f
        .service
        .submit(&sid, None, StepPayload::Training { rating: score(&first, false) });
    assert!(matches!(stale, Err(ServiceError::Invalid(_))));
    let view = f
        .service
        .submit(&sid, None, StepPayload::Training { rating: score(&second, false) })
        .unwrap();
    assert_eq!(view.state, "rating(0)");
}

#[test]
fn out_of_order_payload_is_a_conflict() {
    let f = fixture(4);
    let sid = f.service.create_session(&f.config.experiment_id, "w").unwrap().session_id;
    let err = f.service.submit(&sid, None, hearing(&f.config, 6)).unwrap_err();
    assert!(matches!(err, ServiceError::Conflict(_)), "{err}");
}

#[test]
fn failing_block_rejects_session_and_keeps_discarded_rows() {
    let f = fixture(40);
    let sid = qualified(&f.service, &f.config, "bad");
    let view = rate_block(&f.service, &sid, true, true);
    assert_eq!(view.state, "rejected(screening-failed)");
    assert!(matches!(view.step, Step::Rejected { .. }));

    let (raw, _) = f.service.export(&f.config.experiment_id, ExportFlavor::Raw).unwrap();
    let raw = crowdmushra_core::dataset::Dataset::read_csv(raw.as_slice()).unwrap();
    assert_eq!(raw.len(), 4 * 6);
    assert!(raw.rows.iter().all(|r| r.discarded));
    let (clean, _) = f.service.export(&f.config.experiment_id, ExportFlavor::Clean).unwrap();
    assert!(crowdmushra_core::dataset::Dataset::read_csv(clean.as_slice()).unwrap().is_empty());
}

#[test]
fn resume_returns_same_session() {
    let f = fixture(40);
    let sid = qualified(&f.service, &f.config, "w1");
    let again = f.service.create_session(&f.config.experiment_id, "w1").unwrap();
    assert_eq!(again.session_id, sid);
    assert_eq!(again.state, "rating(0)");
}

#[test]
fn closed_experiment_and_banned_worker() {
    let f = fixture(4);
    let id = &f.config.experiment_id;
    f.service
        .admin(id, AdminAction::BanWorker { worker: "bot".into() })
        .unwrap();
    assert!(matches!(f.service.create_session(id, "bot"), Err(ServiceError::Forbidden(_))));
    let early = f.service.create_session(id, "early").unwrap().session_id;
    f.service.admin(id, AdminAction::CloseExperiment).unwrap();
    assert!(matches!(f.service.create_session(id, "late"), Err(ServiceError::Gone(_))));
    // a session opened before closing can still proceed
    f.service
        .submit(&early, None, questionnaire(ListeningDevice::WiredHeadphones))
        .unwrap();
}

#[test]
fn idempotent_resubmission_assigns_once() {
    let f = fixture(40);
    let sid = qualified(&f.service, &f.config, "w1");
    let ratings: Vec<_> = block_questions(&f.service, &sid).iter().map(|q| score(q, false)).collect();
    let payload = StepPayload::Rating {
        ratings,
        continue_rating: true,
    };
    let first = f.service.submit(&sid, Some("k1".into()), payload.clone()).unwrap();
    let events = f.service.event_count();
    let second = f.service.submit(&sid, Some("k1".into()), payload.clone()).unwrap();
    assert_eq!(first, second);
    assert_eq!(f.service.event_count(), events);
    // without the key the stale block is refused rather than double counted
    assert!(f.service.submit(&sid, None, payload).is_err());
    let listener = ListenerId::new("w1");
    f.service.with_engine(|e| {
        let exp = &e.experiments[&f.config.experiment_id];
        assert_eq!(exp.ledger.completed_by(&listener).unwrap().len(), 1);
        let votes: u32 = exp.ledger.blocks().map(|b| exp.ledger.block_votes(b.block_id)).sum();
        assert_eq!(votes, 1);
    });
}

#[test]
fn idle_sessions_time_out_and_release_their_block() {
    let f = fixture(40);
    let sid = qualified(&f.service, &f.config, "slow");
    let listener = ListenerId::new("slow");
    f.service.with_engine(|e| {
        assert!(e.experiments[&f.config.experiment_id].ledger.outstanding_for(&listener).is_some());
    });
    f.clock.advance(2 * 60 * 60);
    assert_eq!(f.service.current_step(&sid).unwrap().state, "rating(0)");
    f.clock.advance(1);
    let view = f.service.current_step(&sid).unwrap();
    assert_eq!(view.state, "rejected(timeout)");
    f.service.with_engine(|e| {
        assert!(e.experiments[&f.config.experiment_id].ledger.outstanding_for(&listener).is_none());
    });
    assert!(matches!(
        f.service.submit(&sid, None, StepPayload::Rating { ratings: vec![], continue_rating: false }),
        Err(ServiceError::Gone(_))
    ));
}

#[test]
fn expiry_sweep() {
    let f = fixture(4);
    f.service.create_session(&f.config.experiment_id, "a").unwrap();
    f.service.create_session(&f.config.experiment_id, "b").unwrap();
    f.clock.advance(7201);
    assert_eq!(f.service.expire_idle().unwrap(), 2);
    assert_eq!(f.service.expire_idle().unwrap(), 0);
}

#[test]
fn stimuli_are_scoped_to_the_session() {
    let f = fixture(40);
    let a = qualified(&f.service, &f.config, "a");
    let b = qualified(&f.service, &f.config, "b");
    let qa = &block_questions(&f.service, &a)[0];
    for slot in slots(qa) {
        assert!(f.service.stimulus_file(&a, &slot).is_ok());
        assert!(matches!(f.service.stimulus_file(&b, &slot), Err(ServiceError::NotFound(_))));
    }
    assert!(f.service.stimulus_file(&a, &qa.open_reference_slot).is_ok());
    assert!(matches!(
        f.service.stimulus_file(&a, &SlotLabel::new("cond-ref")),
        Err(ServiceError::NotFound(_))
    ));
    // hearing audio is only available during the hearing test
    assert!(f.service.hearing_file(&a, 0).is_err());
}

#[test]
fn completion_code_only_when_completed() {
    let f = fixture(40);
    let sid = qualified(&f.service, &f.config, "w");
    let json = serde_json::to_string(&f.service.current_step(&sid).unwrap()).unwrap();
    assert!(!json.contains(&f.config.completion_code));
    let view = rate_block(&f.service, &sid, false, false);
    assert!(serde_json::to_string(&view).unwrap().contains(&f.config.completion_code));
}

#[test]
fn export_accounting_and_report_without_objective() {
    let f = fixture(40);
    for w in 0..6 {
        let sid = qualified(&f.service, &f.config, &format!("w{w}"));
        rate_block(&f.service, &sid, false, true);
        rate_block(&f.service, &sid, false, false);
    }
    let id = &f.config.experiment_id;
    let raw = crowdmushra_core::dataset::Dataset::read_csv(
        f.service.export(id, ExportFlavor::Raw).unwrap().0.as_slice(),
    )
    .unwrap();
    assert_eq!(raw.len(), 6 * 2 * 4 * 6);
    let clean = crowdmushra_core::dataset::Dataset::read_csv(
        f.service.export(id, ExportFlavor::Clean).unwrap().0.as_slice(),
    )
    .unwrap();
    let (report, media) = f.service.export(id, ExportFlavor::Report).unwrap();
    assert_eq!(media, "application/json");
    let report: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let removed = report["screening"]["removed_scores"].as_array().unwrap().len();
    assert_eq!(clean.len(), raw.len() - removed);
    assert_eq!(report["summaries"].as_array().unwrap().len(), 6);
    assert!(report.get("correlations").is_none());
}

#[test]
fn report_includes_loaded_objective_scores() {
    let f = fixture(40);
    for w in 0..4 {
        let sid = qualified(&f.service, &f.config, &format!("w{w}"));
        rate_block(&f.service, &sid, false, false);
    }
    let id = &f.config.experiment_id;
    let mut table = String::from("metric,condition_id,item_id,score\n");
    for item in &f.config.items {
        for (k, c) in f.config.conditions.iter().enumerate() {
            table.push_str(&format!("pesq,{},{},{}\n", c.id, item, 1.0 + k as f64 * 0.5));
        }
    }
    assert!(f
        .service
        .admin(id, AdminAction::LoadObjective { table: "not,a,table\n1".into() })
        .is_err());
    f.service.admin(id, AdminAction::LoadObjective { table }).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&f.service.export(id, ExportFlavor::Report).unwrap().0).unwrap();
    let rows = report["correlations"][0]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["group"], "overall");
}
