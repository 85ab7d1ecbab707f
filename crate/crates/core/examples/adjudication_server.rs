//! Drive the adjudication service through its HTTP API: load a batch, let
//! two reviewers work the queue, upload the EVM counts and reconcile. The
//! journal is then replayed to show the state survives a restart.
//!
//! ```text
//! cargo run --release --example adjudication_server
//! cargo run --release --example adjudication_server -- --listen 8080
//! ```
//!
//! With `--listen` the prepared service keeps running on that port for the
//! review console until Ctrl-C.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vvpat::augment::AugmentationSpec;
use vvpat::classifier::{fit, Predictor};
use vvpat::dataset::{build_labeled_dataset, split_dataset};
use vvpat::fixtures::{simulated_poll, synthetic_registry, write_slip_batch};
use vvpat::service::{self, http, Service, ServiceConfig, SystemClock};

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .expect("valid request");
    let response = app.clone().oneshot(request).await.expect("infallible");
    let status = response.status();
    let bytes = response.into_body().collect().await.expect("body").to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let listen: Option<u16> = match std::env::args().skip(1).collect::<Vec<_>>().as_slice() {
        [flag, port] if flag == "--listen" => Some(port.parse()?),
        [] => None,
        _ => anyhow::bail!("usage: adjudication_server [--listen PORT]"),
    };

    let registry = synthetic_registry(6);
    let dataset = build_labeled_dataset(&registry, &AugmentationSpec::canonical(42))?;
    let model: Arc<dyn Predictor> = Arc::new(fit(&split_dataset(&dataset, 0.8, 42)?.0)?);

    let votes = [80, 64, 41, 20, 9, 4];
    let (images, truth) = simulated_poll(&registry, &votes, 5, 7);
    let work = tempfile::tempdir()?;
    let start = Utc.with_ymd_and_hms(2024, 4, 19, 7, 0, 0).unwrap();
    let manifest = write_slip_batch(work.path(), "EVM-101", &images, start, Duration::seconds(40))?;
    let journal = work.path().join("journal.jsonl");

    let service = Arc::new(Service::open(
        ServiceConfig::new(&journal),
        Some(model),
        Arc::new(SystemClock),
    )?);
    let app = http::router(Arc::clone(&service));

    let (status, batch) = call(&app, Method::POST, "/api/batches", Some(json!({ "manifest_path": manifest }))).await;
    println!("POST /api/batches -> {status}: {} slips, {} queued", batch["total_slips"], batch["queued"]);

    // two reviewers take turns until the queue is empty
    let truth_by_slip: BTreeMap<String, Option<String>> = (1..=images.len())
        .map(|i| format!("EVM-101-S{i:04}"))
        .zip(truth.iter().map(|t| t.map(|p| p.to_string())))
        .collect();
    for worker in ["asha", "bilal"].iter().cycle() {
        let (status, task) = call(&app, Method::GET, &format!("/api/tasks/next?worker={worker}"), None).await;
        if status == StatusCode::NO_CONTENT {
            break;
        }
        let slip = task["slip_id"].as_str().unwrap_or_default();
        let decision = truth_by_slip[slip].clone().unwrap_or_else(|| "REJECTED".into());
        let uri = format!("/api/tasks/{}/decision", task["task_id"].as_str().unwrap_or_default());
        let (status, _) = call(&app, Method::POST, &uri, Some(json!({ "worker": worker, "decision": decision }))).await;
        println!(
            "{worker} decided {slip} (model said {} at {:.2}) -> {decision}: {status}",
            task["prediction"]["party_id"],
            task["prediction"]["confidence"].as_f64().unwrap_or(0.0)
        );
    }

    let counts: BTreeMap<String, usize> = registry
        .records()
        .iter()
        .zip(votes)
        .map(|(r, n)| (r.party_id.to_string(), n))
        .collect();
    call(&app, Method::POST, "/api/evm-counts", Some(json!({ "evm_id": "EVM-101", "counts": counts }))).await;
    let (_, reconciled) = call(&app, Method::POST, "/api/reconcile", Some(json!({}))).await;
    println!("reconciliation: {}", reconciled["results"][0]["status"]);
    let (_, tally) = call(&app, Method::GET, "/api/tally", None).await;
    println!("tally: {}", tally["evms"]["EVM-101"]["vvpat_counts"]);

    let replayed = service::replay(&journal)?;
    println!(
        "journal replay reproduces the live state: {}",
        replayed == service.snapshot()
    );

    if let Some(port) = listen {
        println!("serving on http://127.0.0.1:{port}/api (Ctrl-C to stop)");
        http::serve(service, ([127, 0, 0, 1], port).into()).await?;
    }
    Ok(())
}
