use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use deco_annotate::*;
use deco_core::mesh::{BrushCache, Stroke, StrokeMode, TemplateMesh};
use serde_json::{json, Value};
use tower::ServiceExt;

fn icosphere() -> (TemplateMesh, BrushCache) {
    let mesh = TemplateMesh::icosphere(1, 1.0, 4).unwrap();
    let cache = BrushCache::precompute(&mesh.edge_graph(), &[0.0, 0.3, 0.6]).unwrap();
    (mesh, cache)
}

fn config(tasks: &[(&str, &str, &[&str])]) -> ServiceConfig {
    ServiceConfig {
        tasks: tasks
            .iter()
            .map(|(t, i, labels)| TaskSpec {
                task_id: t.to_string(),
                image_id: i.to_string(),
                image_path: format!("images/{i}.png"),
                labels: labels.iter().map(|s| s.to_string()).collect(),
            })
            .collect(),
        qualified: vec!["ann".into(), "bob".into()],
        reviewers: vec!["rev".into()],
        qualification: vec![QualificationItem {
            image_id: "q1".into(),
            vertices: vec![1, 2, 3, 4],
        }],
        ..ServiceConfig::default()
    }
}

fn app(cfg: ServiceConfig) -> Router {
    let (mesh, cache) = icosphere();
    build(mesh, cache, cfg, None).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn stroke(center: usize, radius: f64, mode: StrokeMode) -> Stroke {
    Stroke { center, radius, mode }
}

fn submission(annotator: &str, label: &str, strokes: &[Stroke], cache: &BrushCache) -> Value {
    let final_vertices = deco_core::mesh::replay_strokes(cache, strokes).unwrap();
    json!({ "annotator": annotator, "label": label, "strokes": strokes, "final_vertices": final_vertices })
}

/// Assigns `task` to `who` and submits one draw stroke per prompt.
async fn complete(app: &Router, who: &str, task: &str, prompts: &[&str], center: usize) {
    let (_, cache) = icosphere();
    let (s, v) = call(app, "GET", &format!("/task/next?annotator={who}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["next"]["task"]["task_id"], task);
    for p in prompts {
        let body = submission(who, p, &[stroke(center, 0.3, StrokeMode::Draw)], &cache);
        let (s, v) = call(app, "POST", &format!("/task/{task}/annotation"), Some(body)).await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
}

#[tokio::test]
async fn template_and_brush_cache_are_immutable_payloads() {
    let app = app(config(&[]));
    let resp = app
        .clone()
        .oneshot(Request::get("/template").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert!(resp.headers()[header::CACHE_CONTROL]
        .to_str()
        .unwrap()
        .contains("immutable"));
    let (s, v) = call(&app, "GET", "/template", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["template"]["vertices"].as_array().unwrap().len(), 42);
    assert_eq!(v["brush_radii"], json!([0.0, 0.3, 0.6]));

    let (s, v) = call(&app, "GET", "/brush-cache?radius=0.3", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["neighborhoods"].as_array().unwrap().len(), 42);
    let (s, v) = call(&app, "GET", "/brush-cache?radius=0.25", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v.get("neighborhoods").is_none());
}

#[tokio::test]
async fn tetrahedron_unit_radius_covers_everything() {
    let mesh = TemplateMesh::tetrahedron(None, 1).unwrap();
    let cache = BrushCache::precompute(&mesh.edge_graph(), &[1.0]).unwrap();
    let app = build(mesh, cache, ServiceConfig::default(), None).unwrap();
    let (s, v) = call(&app, "GET", "/brush-cache?radius=1.0", None).await;
    assert_eq!(s, StatusCode::OK);
    for entry in v["neighborhoods"].as_array().unwrap() {
        assert_eq!(entry, &json!([0, 1, 2, 3]));
    }
}

#[tokio::test]
async fn task_dispatch_rules() {
    let app = app(config(&[("t1", "img1", &["chair"])]));
    let (s, _) = call(&app, "GET", "/task/next?annotator=mallory", None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, v) = call(&app, "GET", "/task/next?annotator=ann", None).await;
    assert_eq!(s, StatusCode::OK);
    let task = &v["next"]["task"];
    assert_eq!(task["label_sequence"], json!(["chair", SCENE_SUPPORTED_PROMPT]));
    assert_eq!(task["assigned_to"], "ann");
    // the holder gets the same task back, everyone else gets none
    let (_, v) = call(&app, "GET", "/task/next?annotator=ann", None).await;
    assert_eq!(v["next"]["task"]["task_id"], "t1");
    let (_, v) = call(&app, "GET", "/task/next?annotator=bob", None).await;
    assert_eq!(v["next"]["status"], "none");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_never_share_a_task() {
    for _ in 0..20 {
        let app = app(config(&[("t1", "img1", &["chair"])]));
        let a = tokio::spawn({
            let app = app.clone();
            async move { call(&app, "GET", "/task/next?annotator=ann", None).await }
        });
        let b = tokio::spawn({
            let app = app.clone();
            async move { call(&app, "GET", "/task/next?annotator=bob", None).await }
        });
        let (a, b) = (a.await.unwrap().1, b.await.unwrap().1);
        let got = [&a, &b].iter().filter(|v| v["next"]["status"] == "assigned").count();
        assert_eq!(got, 1, "{a} {b}");
    }
}

#[tokio::test]
async fn submissions_are_replayed() {
    let (_, cache) = icosphere();
    let app = app(config(&[("t1", "img1", &["chair"])]));
    call(&app, "GET", "/task/next?annotator=ann", None).await;

    // wrong prompt
    let body = submission("ann", "table", &[stroke(0, 0.3, StrokeMode::Draw)], &cache);
    assert_eq!(
        call(&app, "POST", "/task/t1/annotation", Some(body)).await.0,
        StatusCode::CONFLICT
    );
    // not the holder
    let body = submission("bob", "chair", &[stroke(0, 0.3, StrokeMode::Draw)], &cache);
    assert_eq!(
        call(&app, "POST", "/task/t1/annotation", Some(body)).await.0,
        StatusCode::FORBIDDEN
    );
    // unpublished radius
    let body = json!({"annotator": "ann", "label": "chair", "final_vertices": [],
        "strokes": [{"center": 0, "radius": 0.31, "mode": "draw"}]});
    assert_eq!(
        call(&app, "POST", "/task/t1/annotation", Some(body)).await.0,
        StatusCode::BAD_REQUEST
    );
    // mismatch carries a diff
    let footprint = cache.neighborhood(0.3, 0).unwrap().to_vec();
    let extra = (0..42).find(|v| !footprint.contains(v)).unwrap();
    let mut wrong = footprint[1..].to_vec();
    wrong.push(extra);
    let body = json!({"annotator": "ann", "label": "chair", "final_vertices": wrong,
        "strokes": [stroke(0, 0.3, StrokeMode::Draw)]});
    let (s, v) = call(&app, "POST", "/task/t1/annotation", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["server_only"], json!([footprint[0]]));
    assert_eq!(v["client_only"], json!([extra]));

    // single stroke equals the neighborhood
    let body = json!({"annotator": "ann", "label": "chair", "final_vertices": footprint,
        "strokes": [stroke(0, 0.3, StrokeMode::Draw)]});
    let (s, v) = call(&app, "POST", "/task/t1/annotation", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["accepted"]["next_prompt"], SCENE_SUPPORTED_PROMPT);
    assert_eq!(v["accepted"]["feedback_requested"], false);

    // draw then erase leaves nothing
    let body = json!({"annotator": "ann", "label": SCENE_SUPPORTED_PROMPT, "final_vertices": [],
        "strokes": [stroke(5, 0.6, StrokeMode::Draw), stroke(5, 0.6, StrokeMode::Erase)],
        "feedback": "clear image"});
    let (s, v) = call(&app, "POST", "/task/t1/annotation", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["accepted"]["task"]["state"], "submitted");
    assert_eq!(v["accepted"]["feedback_requested"], true);
    // stale: the task is no longer taking submissions
    let body = submission("ann", SCENE_SUPPORTED_PROMPT, &[], &cache);
    assert_eq!(
        call(&app, "POST", "/task/t1/annotation", Some(body)).await.0,
        StatusCode::CONFLICT
    );
}

#[tokio::test]
async fn review_state_machine() {
    let prompts = ["chair", SCENE_SUPPORTED_PROMPT];
    let app = app(config(&[("t1", "img1", &["chair"])]));
    let review = |verdict: &str, who: &str| json!({"task_id": "t1", "reviewer": who, "verdict": verdict, "notes": "feet missing"});

    call(&app, "GET", "/task/next?annotator=ann", None).await;
    // open tasks cannot be reviewed
    assert_eq!(
        call(&app, "POST", "/qa/review", Some(review("ok", "rev"))).await.0,
        StatusCode::CONFLICT
    );
    let app2 = app.clone();
    for p in prompts {
        let (_, cache) = icosphere();
        let body = submission("ann", p, &[stroke(3, 0.3, StrokeMode::Draw)], &cache);
        assert_eq!(
            call(&app2, "POST", "/task/t1/annotation", Some(body)).await.0,
            StatusCode::OK
        );
    }
    assert_eq!(
        call(&app, "POST", "/qa/review", Some(review("flag", "ann"))).await.0,
        StatusCode::FORBIDDEN
    );
    let (s, v) = call(&app, "POST", "/qa/review", Some(review("flag", "rev"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["task"]["state"], "open");
    assert_eq!(
        v["task"]["history"],
        json!(["open", "submitted", "flagged", "reannotate", "open"])
    );
    // same verdict again is a no-op, the opposite one conflicts
    let (s, v2) = call(&app, "POST", "/qa/review", Some(review("flag", "rev"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v2["task"], v["task"]);
    assert_eq!(
        call(&app, "POST", "/qa/review", Some(review("ok", "rev"))).await.0,
        StatusCode::CONFLICT
    );

    // flagged work is back in the queue with the notes attached
    let (_, v) = call(&app, "GET", "/task/next?annotator=bob", None).await;
    assert_eq!(v["next"]["task"]["notes"], json!(["feet missing"]));
    let (_, exported) = call(&app, "GET", "/export", None).await;
    assert_eq!(exported["records"], json!([]));
    for p in prompts {
        let (_, cache) = icosphere();
        let body = submission("bob", p, &[stroke(7, 0.3, StrokeMode::Draw)], &cache);
        assert_eq!(
            call(&app, "POST", "/task/t1/annotation", Some(body)).await.0,
            StatusCode::OK
        );
    }
    let (s, v) = call(&app, "POST", "/qa/review", Some(review("ok", "rev"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["task"]["state"], "finalized");
    let (_, exported) = call(&app, "GET", "/export", None).await;
    let records = exported["records"].as_array().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["annotator_id"], "bob");
    assert_eq!(records[0]["object_contacts"][0]["label"], "chair");
}

#[tokio::test]
async fn agreement_per_image() {
    let prompts = ["chair", SCENE_SUPPORTED_PROMPT];
    let app = app(config(&[("t1", "img1", &["chair"]), ("t2", "img1", &["chair"])]));
    let (s, _) = call(&app, "GET", "/qa/agreement?image_set=img1", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    complete(&app, "ann", "t1", &prompts, 9).await;
    let (s, _) = call(&app, "GET", "/qa/agreement?image_set=img1", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    complete(&app, "bob", "t2", &prompts, 9).await;
    let (s, v) = call(&app, "GET", "/qa/agreement?image_set=img1", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let img = &v["images"][0];
    assert_eq!(img["annotators"], json!(["ann", "bob"]));
    assert_eq!(img["fleiss_kappa"], 1.0);
    assert_eq!(img["iou_matrix"], json!([[1.0, 1.0], [1.0, 1.0]]));
}

#[tokio::test]
async fn qualification_gate() {
    let app = app(config(&[("t1", "img1", &[])]));
    assert_eq!(
        call(&app, "GET", "/task/next?annotator=carol", None).await.0,
        StatusCode::FORBIDDEN
    );
    let answer = |v: Value| json!({"annotator": "carol", "answers": [{"image_id": "q1", "vertices": v}]});
    let (s, v) = call(&app, "POST", "/qualify", Some(answer(json!([1, 9])))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["result"]["passed"], false);
    assert_eq!(v["result"]["mean_iou"], 0.2);
    let (_, v) = call(&app, "POST", "/qualify", Some(answer(json!([1, 2])))).await;
    assert_eq!(v["result"]["passed"], true);
    assert_eq!(
        call(&app, "GET", "/task/next?annotator=carol", None).await.0,
        StatusCode::OK
    );
    let (s, _) = call(
        &app,
        "POST",
        "/qualify",
        Some(json!({"annotator": "dan", "answers": []})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn shared_token() {
    let app = app(ServiceConfig {
        token: Some("s3cret".into()),
        ..config(&[])
    });
    assert_eq!(call(&app, "GET", "/template", None).await.0, StatusCode::UNAUTHORIZED);
    let req = Request::get("/template")
        .header(TOKEN_HEADER, "s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
}

#[tokio::test]
async fn log_replay_restores_state() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let cfg = ServiceConfig {
        qualified: vec![],
        ..config(&[("t1", "img1", &["chair"]), ("t2", "img2", &["table"])])
    };
    let (mesh, cache) = icosphere();
    let app = build(mesh.clone(), cache.clone(), cfg.clone(), Some(&log)).unwrap();
    let (_, v) = call(
        &app,
        "POST",
        "/qualify",
        Some(json!({"annotator": "eve", "answers": [{"image_id": "q1", "vertices": [1,2,3,4]}]})),
    )
    .await;
    assert_eq!(v["result"]["passed"], true);
    complete(&app, "eve", "t1", &["chair", SCENE_SUPPORTED_PROMPT], 11).await;
    let review = json!({"task_id": "t1", "reviewer": "rev", "verdict": "ok"});
    assert_eq!(call(&app, "POST", "/qa/review", Some(review)).await.0, StatusCode::OK);
    let (_, before) = call(&app, "GET", "/export", None).await;
    drop(app);

    let restored = build(mesh, cache, cfg, Some(&log)).unwrap();
    let (_, after) = call(&restored, "GET", "/export", None).await;
    assert_eq!(before, after);
    assert_eq!(after["records"].as_array().unwrap().len(), 1);
    // the qualification survived the restart
    let (_, v) = call(&restored, "GET", "/task/next?annotator=eve", None).await;
    assert_eq!(v["next"]["task"]["task_id"], "t2");
}
