mod common;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use common::scripted_campaign;
use http_body_util::BodyExt;
use naegen_core::harness::CampaignReport;
use naegen_review::{router, ReviewStore};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path) -> Router {
    let mut store = ReviewStore::open(dir).unwrap();
    store.enqueue_campaign(false).unwrap();
    router(store)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    (status, ctype, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, _, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap())
}

async fn post(app: &Router, body: &str) -> (StatusCode, Value) {
    let req = Request::post("/api/labels")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, _, body) = call(app, req).await;
    (status, serde_json::from_slice(&body).unwrap())
}

#[tokio::test]
async fn queue_and_candidate_views() {
    let dir = tempfile::tempdir().unwrap();
    scripted_campaign(dir.path(), 3, 3, 4);
    let app = app(dir.path());
    let (status, q) = get(&app, "/api/queue?status=pending").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(q["schema_version"], 1);
    assert_eq!(q["total"], 4);
    let (_, by_class) = get(&app, "/api/queue?class=class001").await;
    assert_eq!(by_class["total"], 1);
    let (_, labeled) = get(&app, "/api/queue?status=labeled").await;
    assert_eq!(labeled["total"], 0);
    let (status, bad) = get(&app, "/api/queue?status=maybe").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(bad["error"]["kind"], "validation_error");

    let item = &q["items"][0];
    let id = item["candidate_id"].as_str().unwrap();
    let (status, c) = get(&app, &format!("/api/candidates/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(c["schema_version"], 1);
    assert_eq!(c["item"]["status"], "pending");
    assert_eq!(c["run"]["strict_success"], "pending");
    assert_eq!(c["labels"], json!([]));

    let (status, _, png) =
        call(&app, Request::get(item["candidate_image_url"].as_str().unwrap()).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(png.starts_with(b"\x89PNG"));
    let (_, ctype, _) = call(&app, Request::get(item["init_image_url"].as_str().unwrap()).body(Body::empty()).unwrap()).await;
    assert_eq!(ctype.as_deref(), Some("image/png"));

    let run = item["run_id"].as_str().unwrap();
    let (status, trace) = get(&app, &format!("/api/runs/{run}/trace")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(trace["schema_version"], 1);
    assert_eq!(trace["run_id"], run);
    assert_eq!(trace["first_adversarial_step"], item["step"]);

    let (status, missing) = get(&app, "/api/candidates/nope@1").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(missing["error"]["kind"], "not_found");
    assert_eq!(get(&app, "/api/runs/nope/trace").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, &format!("/api/runs/{run}/images/99")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn labeling_through_the_api_drains_the_queue() {
    let dir = tempfile::tempdir().unwrap();
    scripted_campaign(dir.path(), 4, 5, 6);
    let app = app(dir.path());
    let (_, q) = get(&app, "/api/queue?status=pending").await;
    for (i, item) in q["items"].as_array().unwrap().iter().enumerate() {
        let assigned = if i % 2 == 0 { item["expected_class"].clone() } else { json!("none") };
        let body = json!({
            "candidate_id": item["candidate_id"],
            "reviewer": "ann",
            "ground_truth_preserved": i % 2 == 0,
            "natural": true,
            "assigned_label": assigned,
        });
        let (status, receipt) = post(&app, &body.to_string()).await;
        assert_eq!(status, StatusCode::OK, "{receipt}");
        assert_eq!(receipt["schema_version"], 1);
        assert_eq!(receipt["relaxed_success"], "success");
    }
    let (_, report) = get(&app, "/api/report").await;
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["pending_reviews"], 0);
    assert_eq!(report["strict_successes"], 3);
    assert_eq!(report["relaxed_successes"], 6);
    assert_eq!(report["fooling_rate"], 0.15);
    assert_eq!(get(&app, "/api/queue?status=pending").await.1["total"], 0);

    // Served report is the store's report, recomputed from disk.
    let fresh = ReviewStore::open(dir.path()).unwrap();
    let expected: Value = serde_json::from_str(&fresh.report().to_json().unwrap()).unwrap();
    assert_eq!(report, expected);
    let parsed: CampaignReport = serde_json::from_value(report).unwrap();
    assert_eq!(parsed.overall.total_runs, 20);
}

#[tokio::test]
async fn bad_label_bodies_get_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    scripted_campaign(dir.path(), 2, 2, 1);
    let app = app(dir.path());
    let (_, q) = get(&app, "/api/queue").await;
    let id = q["items"][0]["candidate_id"].as_str().unwrap().to_string();

    for body in [
        "{not json".to_string(),
        "[1, 2]".to_string(),
        json!({"candidate_id": id, "reviewer": "ann"}).to_string(),
        json!({"candidate_id": id, "reviewer": "ann", "ground_truth_preserved": false, "natural": true, "assigned_label": "cat"}).to_string(),
        json!({"candidate_id": id, "reviewer": "ann", "ground_truth_preserved": false, "natural": true, "assigned_label": 7}).to_string(),
    ] {
        let (status, err) = post(&app, &body).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(err["schema_version"], 1);
        assert_eq!(err["error"]["kind"], "validation_error", "{body}");
    }
    let body = json!({"candidate_id": "x@1", "reviewer": "ann", "ground_truth_preserved": false, "natural": true, "assigned_label": "none"});
    let (status, err) = post(&app, &body.to_string()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["kind"], "not_found");
}
