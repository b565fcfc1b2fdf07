mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use common::*;
use crowdmushra_core::config::sample_experiment;
use crowdmushra_service::http::{router, AppState};
use crowdmushra_service::{ManualClock, Service, SessionView, Step};

const ADMIN: &str = "secret";

struct Api {
    app: Router,
    service: Arc<Service>,
    _dir: tempfile::TempDir,
}

fn api() -> Api {
    let dir = tempfile::tempdir().unwrap();
    let (config, manifest) = sample_experiment(8);
    for s in &manifest.stimuli {
        let path = dir.path().join(&s.audio_uri);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, vec![7u8; 4000]).unwrap();
    }
    for t in &config.hearing_test.sets {
        let path = dir.path().join(&t.audio_uri);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, b"RIFFdigits").unwrap();
    }
    let service = Arc::new(Service::open(
        &dir.path().join("events.jsonl"),
        Arc::new(ManualClock::new(T0)),
        dir.path(),
    ).unwrap());
    let app = router(AppState {
        service: service.clone(),
        admin_token: ADMIN.into(),
    });
    Api { app, service, _dir: dir }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn admin_post(uri: &str, body: String) -> Request<Body> {
    Request::post(uri)
        .header(header::AUTHORIZATION, format!("Bearer {ADMIN}"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))
        .unwrap()
}

fn json_post(uri: &str, body: String) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))
        .unwrap()
}

async fn create_experiment(api: &Api) {
    let (config, manifest) = sample_experiment(8);
    let body = serde_json::json!({ "config": config, "manifest": manifest }).to_string();
    let (status, _, _) = send(&api.app, admin_post("/admin/experiments", body.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _, _) = send(&api.app, admin_post("/admin/experiments", body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn admin_routes_require_the_token() {
    let api = api();
    let (config, manifest) = sample_experiment(8);
    let body = serde_json::json!({ "config": config, "manifest": manifest }).to_string();
    let (status, _, _) = send(&api.app, json_post("/admin/experiments", body)).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let req = Request::get("/admin/experiments/sample/export/raw")
        .header(header::AUTHORIZATION, "Bearer wrong")
        .body(Body::empty())
        .unwrap();
    assert_eq!(send(&api.app, req).await.0, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn session_over_http_with_range_requests() {
    let api = api();
    create_experiment(&api).await;
    let (config, _) = sample_experiment(8);
    let id = config.experiment_id.as_str();

    let (status, _, body) = send(&api.app, json_post(&format!("/experiments/{id}/sessions?worker=W1"), String::new())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let view: SessionView = serde_json::from_slice(&body).unwrap();
    let sid = view.session_id.clone();

    let (status, _, body) = send(
        &api.app,
        json_post("/experiments/nope/sessions?worker=W1", String::new()),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{}", String::from_utf8_lossy(&body));

    let q = serde_json::to_string(&questionnaire(crowdmushra_core::qualification::ListeningDevice::WiredHeadphones)).unwrap();
    let (status, _, body) = send(&api.app, json_post(&format!("/sessions/{sid}"), q.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let view: SessionView = serde_json::from_slice(&body).unwrap();
    let Step::HearingTest { trials, .. } = view.step else { panic!() };

    let (status, headers, body) = send(&api.app, Request::get(&trials[0].audio_uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"RIFFdigits");
    assert_eq!(headers[header::CONTENT_TYPE], "audio/wav");

    // replaying the questionnaire now is out of order
    let (status, _, _) = send(&api.app, json_post(&format!("/sessions/{sid}"), q)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let h = serde_json::to_string(&hearing(&config, 6)).unwrap();
    send(&api.app, json_post(&format!("/sessions/{sid}"), h)).await;
    let tq = training_question(&api.service, &sid);
    let t = serde_json::json!({ "step": "training", "rating": score(&tq, false) }).to_string();
    let (status, _, body) = send(&api.app, json_post(&format!("/sessions/{sid}"), t)).await;
    assert_eq!(status, StatusCode::OK);
    let view: SessionView = serde_json::from_slice(&body).unwrap();
    let Step::Rating { questions, .. } = view.step else { panic!("{view:?}") };
    let uri = &questions[0].slots[0].audio_uri;

    let (status, _, body) = send(&api.app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!((status, body.len()), (StatusCode::OK, 4000));
    let ranged = Request::get(uri).header(header::RANGE, "bytes=0-999").body(Body::empty()).unwrap();
    let (status, headers, body) = send(&api.app, ranged).await;
    assert_eq!(status, StatusCode::PARTIAL_CONTENT);
    assert_eq!(body.len(), 1000);
    assert_eq!(headers[header::CONTENT_RANGE], "bytes 0-999/4000");

    // another session cannot fetch this slot
    let (_, _, body) = send(&api.app, json_post(&format!("/experiments/{id}/sessions?worker=W2"), String::new())).await;
    let other: SessionView = serde_json::from_slice(&body).unwrap();
    let foreign = uri.replace(sid.as_str(), other.session_id.as_str());
    let (status, _, _) = send(&api.app, Request::get(&foreign).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // idempotent block submission via header
    let ratings: Vec<_> = block_questions(&api.service, &sid).iter().map(|q| score(q, false)).collect();
    let r = serde_json::json!({ "step": "rating", "ratings": ratings, "continue_rating": false }).to_string();
    let mut bodies = Vec::new();
    for _ in 0..2 {
        let req = Request::post(format!("/sessions/{sid}"))
            .header(header::CONTENT_TYPE, "application/json")
            .header("idempotency-key", "abc")
            .body(Body::from(r.clone()))
            .unwrap();
        let (status, _, body) = send(&api.app, req).await;
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert_eq!(bodies[0], bodies[1]);
    let view: SessionView = serde_json::from_slice(&bodies[0]).unwrap();
    assert_eq!(view.state, "completed");

    // completed sessions no longer serve audio
    let (status, _, _) = send(&api.app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let req = Request::get(format!("/admin/experiments/{id}/export/raw"))
        .header(header::AUTHORIZATION, format!("Bearer {ADMIN}"))
        .body(Body::empty())
        .unwrap();
    let (status, headers, body) = send(&api.app, req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "text/csv");
    assert_eq!(String::from_utf8(body).unwrap().lines().count(), 1 + 4 * 6);

    let req = Request::get(format!("/admin/experiments/{id}/export/pdf"))
        .header(header::AUTHORIZATION, format!("Bearer {ADMIN}"))
        .body(Body::empty())
        .unwrap();
    assert_eq!(send(&api.app, req).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn closed_experiment_is_gone() {
    let api = api();
    create_experiment(&api).await;
    let (status, _, _) = send(&api.app, admin_post("/admin/experiments/sample/close", String::new())).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _, _) = send(&api.app, json_post("/experiments/sample/sessions?worker=x", String::new())).await;
    assert_eq!(status, StatusCode::GONE);
}
