//! HttpLlmClient against a local stub server speaking the chat-completion
//! wire format.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use radalign::alignment::{AlignModel, ModelConfig};
use radalign::knowledge::CriterionSet;
use radalign::promptgen::{
    generate_report, GenerationParams, HttpLlmClient, LlmClient, LlmError, PromptBundle, ReportError, RetryPolicy,
    Template, DEFAULT_TEMPLATE_ID,
};
use serde_json::Value;

const FIXTURE: &str = include_str!("data/chat_completion_response.json");

#[derive(Default)]
struct Stub {
    /// Status codes to return, in order, before answering with the fixture.
    failures: Mutex<Vec<u16>>,
    body: Mutex<Option<String>>,
    requests: Mutex<Vec<(Option<String>, Value)>>,
    calls: AtomicUsize,
}

async fn handler(State(stub): State<Arc<Stub>>, headers: HeaderMap, Json(req): Json<Value>) -> (StatusCode, String) {
    stub.calls.fetch_add(1, Ordering::SeqCst);
    let auth = headers.get("authorization").map(|v| v.to_str().unwrap().to_string());
    stub.requests.lock().unwrap().push((auth, req));
    let next = {
        let mut f = stub.failures.lock().unwrap();
        (!f.is_empty()).then(|| f.remove(0))
    };
    match next {
        Some(code) => (StatusCode::from_u16(code).unwrap(), "{\"error\":\"stub\"}".into()),
        None => (StatusCode::OK, stub.body.lock().unwrap().clone().unwrap_or_else(|| FIXTURE.to_string())),
    }
}

async fn serve(stub: Arc<Stub>) -> String {
    let app = Router::new().route("/v1/chat/completions", post(handler)).with_state(stub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

fn bundle() -> PromptBundle {
    let cs = CriterionSet::chest_xray_fixture();
    let model = AlignModel::new(ModelConfig::default(), cs.clone()).unwrap();
    let img = ndarray::Array3::from_shape_fn((32, 32, 1), |(y, x, _)| ((y + 2 * x) % 5) as f64 / 5.0);
    let inf = model.infer(img.view()).unwrap();
    PromptBundle::assemble(&cs, &inf, &[], 0.5, DEFAULT_TEMPLATE_ID)
}

fn fast() -> RetryPolicy {
    RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(1) }
}

#[tokio::test]
async fn request_shape_and_fixture_reply() {
    let stub = Arc::new(Stub::default());
    let base = serve(stub.clone()).await;
    let client = HttpLlmClient::new(&base, "stub-radiology-1", Some("sk-test".into()), Duration::from_secs(5)).unwrap();
    assert_eq!(client.name(), "http:stub-radiology-1");
    let params = GenerationParams { temperature: 0.2, max_tokens: Some(256) };
    let text = client.generate("describe the film", &params).await.unwrap();
    assert!(text.starts_with("FINDINGS: The cardiac silhouette is enlarged."));

    let reqs = stub.requests.lock().unwrap();
    let (auth, body) = &reqs[0];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "stub-radiology-1");
    assert_eq!(body["stream"], false);
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "describe the film");
}

#[tokio::test]
async fn no_key_sends_no_auth_header() {
    let stub = Arc::new(Stub::default());
    let base = serve(stub.clone()).await;
    let client = HttpLlmClient::new(&base, "m", None, Duration::from_secs(5)).unwrap();
    client.generate("p", &GenerationParams::default()).await.unwrap();
    let reqs = stub.requests.lock().unwrap();
    assert_eq!(reqs[0].0, None);
    assert!(reqs[0].1.get("max_tokens").is_none());
}

#[tokio::test]
async fn server_errors_are_retried_then_succeed() {
    let stub = Arc::new(Stub { failures: Mutex::new(vec![503, 429]), ..Stub::default() });
    let base = serve(stub.clone()).await;
    let client = HttpLlmClient::new(&base, "m", None, Duration::from_secs(5)).unwrap();
    let b = bundle();
    let draft = generate_report(&b, &Template::default(), &client, &GenerationParams::default(), &fast())
        .await
        .unwrap();
    assert_eq!(draft.retries, 2);
    assert_eq!(stub.calls.load(Ordering::SeqCst), 3);
    assert_eq!(draft.client_name, "http:m");
    let sent = &stub.requests.lock().unwrap()[2].1;
    assert_eq!(sent["messages"][0]["content"].as_str().unwrap(), draft.prompt);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let stub = Arc::new(Stub { failures: Mutex::new(vec![401]), ..Stub::default() });
    let base = serve(stub.clone()).await;
    let client = HttpLlmClient::new(&base, "m", None, Duration::from_secs(5)).unwrap();
    let err = generate_report(&bundle(), &Template::default(), &client, &GenerationParams::default(), &fast())
        .await
        .unwrap_err();
    match err {
        ReportError::Llm { attempts: 1, source: LlmError::Status { status: 401, .. } } => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn retries_exhausted() {
    let stub = Arc::new(Stub { failures: Mutex::new(vec![500; 10]), ..Stub::default() });
    let base = serve(stub.clone()).await;
    let client = HttpLlmClient::new(&base, "m", None, Duration::from_secs(5)).unwrap();
    let err = generate_report(&bundle(), &Template::default(), &client, &GenerationParams::default(), &fast())
        .await
        .unwrap_err();
    assert!(matches!(err, ReportError::Llm { attempts: 4, .. }), "{err:?}");
    assert_eq!(stub.calls.load(Ordering::SeqCst), 4);
}

#[tokio::test]
async fn malformed_and_empty_bodies() {
    for (body, want_empty) in [
        ("not json".to_string(), false),
        ("{\"choices\":[]}".to_string(), false),
        (FIXTURE.replace("FINDINGS: The cardiac silhouette is enlarged. No focal consolidation. No pleural effusion or pneumothorax.\\nIMPRESSION: Cardiomegaly.", "  "), true),
    ] {
        let stub = Arc::new(Stub { body: Mutex::new(Some(body)), ..Stub::default() });
        let base = serve(stub.clone()).await;
        let client = HttpLlmClient::new(&base, "m", None, Duration::from_secs(5)).unwrap();
        let err = client.generate("p", &GenerationParams::default()).await.unwrap_err();
        if want_empty {
            assert_eq!(err, LlmError::EmptyCompletion);
        } else {
            assert!(matches!(err, LlmError::Malformed(_)), "{err:?}");
        }
        assert!(!err.is_retryable());
    }
}
