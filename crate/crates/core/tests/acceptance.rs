//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::net::SocketAddr;
use std::pin::Pin;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDate};
use common::{
    fixture_secrets, golden_actual, golden_cases, id_sets, median, model, shipped_units, standalone_occurrences,
    Options, Stack, AUTH,
};
use ehr_gateway::audit::read_records;
use ehr_gateway::ehr_client::{compute_fetch_window, EhrClient};
use ehr_gateway::mock_ehr::{Fault, MockEhr};
use ehr_gateway::preprocess::{merge_all_vs_all, TestTable};
use ehr_gateway::registry::{FetchWindow, PreMergeRule, PredictionKind};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const DAY: &str = "2024-06-27";

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

async fn figure2_windows() -> Check {
    let t = Instant::now();
    let q = date(DAY);
    let expected = [
        ((1, 1), ("2024-06-26", "2024-06-28")),
        ((2, 2), ("2024-06-25", "2024-06-29")),
        ((5, 5), ("2024-06-22", "2024-07-02")),
    ];
    for ((before, after), (start, end)) in expected {
        let r = compute_fetch_window(q, FetchWindow::new(before, after));
        ensure!(
            (r.start(), r.end()) == (date(start), date(end)),
            "({before},{after}) gave {r}, expected {start}..{end}"
        );
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("3 windows exact in {elapsed:?}"))
}

fn nested_loop_count(tables: &[TestTable]) -> usize {
    match tables.split_first() {
        None => 1,
        Some((head, rest)) => head.records.iter().map(|_| nested_loop_count(rest)).sum(),
    }
}

async fn figure4_merge() -> Check {
    let stack = Stack::with(Options {
        models: [("demo_lepto_first".to_string(), model("demo_lepto"))].into(),
        tweak: Some(Box::new(|c| {
            let mut first = c.classifiers[0].clone();
            first.classifier_id = "demo_lepto_first".into();
            first.route_path = "lepto-first".into();
            first.pre_merge_rule = PreMergeRule::FirstPerType;
            c.classifiers.push(first);
        })),
        ..Options::default()
    })
    .await;
    let (_, body) = stack.predict("lepto", "P-FIG4", DAY, "Canine").await;
    let pairs = id_sets(&body);
    let distinct: BTreeSet<_> = pairs.iter().cloned().collect();
    ensure!(pairs.len() == 4, "{} entries: {body}", pairs.len());
    ensure!(distinct.len() == 4 && pairs.iter().all(|p| p.len() == 2), "pairs not distinct: {pairs:?}");
    let (_, body) = stack.predict("lepto-first", "P-FIG4", DAY, "Canine").await;
    let first = id_sets(&body);
    ensure!(first.len() == 1, "FirstPerType gave {} entries", first.len());

    // merge-count property against the nested-loop oracle
    let template = common::fixtures().records[0].clone();
    let mut rng = StdRng::seed_from_u64(4);
    let t = Instant::now();
    for case in 0..1000 {
        let types = rng.gen_range(1..=4);
        let tables: Vec<TestTable> = (0..types)
            .map(|k| {
                let n = rng.gen_range(0..=5);
                let records = (0..n)
                    .map(|i| {
                        let mut r = template.clone();
                        r.test_id = format!("T{k}-{i}");
                        r.test_type = format!("T{k}");
                        r
                    })
                    .collect();
                TestTable::new(format!("T{k}"), records)
            })
            .collect();
        let required = tables.iter().map(|t| t.test_type.clone()).collect();
        let got = merge_all_vs_all(&tables, &required, usize::MAX).map_err(|e| e.to_string())?.len();
        let want = nested_loop_count(&tables);
        ensure!(got == want, "case {case}: merge gave {got}, oracle {want}");
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "1000 cases took {elapsed:?}");
    Ok(format!("4 distinct pairs, FirstPerType 1, 1000 merge cases in {elapsed:?}"))
}

fn single_error(body: &Value) -> Result<String, String> {
    let results = body["results"].as_array().ok_or(format!("no results: {body}"))?;
    ensure!(results.len() == 1, "expected one entry, got {}", results.len());
    ensure!(results[0]["prediction"] == "-1", "prediction {}", results[0]["prediction"]);
    ensure!(body["eligible"] == false, "eligible must be false");
    Ok(results[0]["error_code"].as_str().unwrap_or_default().to_string())
}

async fn error_semantics() -> Check {
    let mut notes = Vec::new();

    // (a) no data at all
    let stack = Stack::start().await;
    let (status, body) = stack.predict("lepto", "P-NONE", DAY, "Canine").await;
    ensure!(status == 200, "(a) status {status}");
    let code = single_error(&body)?;
    ensure!(code == "INSUFFICIENT_DATA", "(a) code {code}");
    notes.push("a".to_string());

    // (b) stopped sidecar, and one that accepts but never answers
    let mut stack = Stack::start().await;
    let timeout_ms = stack.config.classifiers[0].timeout_ms;
    let bound = Duration::from_millis(timeout_ms + 500);
    stack.stop_sidecar("demo_lepto").await;
    let t = Instant::now();
    let (_, body) = stack.predict("lepto", "P-FIG4", DAY, "Canine").await;
    let stopped = t.elapsed();
    let results = body["results"].as_array().cloned().unwrap_or_default();
    ensure!(
        !results.is_empty() && results.iter().all(|r| r["prediction"] == "-1" && r["error_code"] == "CLASSIFIER_TIMEOUT"),
        "(b) stopped sidecar gave {body}"
    );
    ensure!(stopped <= bound, "(b) stopped sidecar answered after {stopped:?}");

    let hole = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let hole_port = hole.local_addr().unwrap().port();
    let sink = tokio::spawn(async move {
        let mut held = Vec::new();
        while let Ok((socket, _)) = hole.accept().await {
            held.push(socket);
        }
    });
    let stack = Stack::with(Options {
        sidecar_ports: [("demo_lepto".to_string(), hole_port)].into(),
        ..Options::default()
    })
    .await;
    let t = Instant::now();
    let (_, body) = stack.predict("lepto", "P-FIG4", DAY, "Canine").await;
    let hung = t.elapsed();
    sink.abort();
    let results = body["results"].as_array().cloned().unwrap_or_default();
    ensure!(
        !results.is_empty() && results.iter().all(|r| r["error_code"] == "CLASSIFIER_TIMEOUT"),
        "(b) silent sidecar gave {body}"
    );
    ensure!(hung <= bound, "(b) silent sidecar answered after {hung:?} > {bound:?}");
    notes.push(format!("b stopped {}ms, silent {}ms", stopped.as_millis(), hung.as_millis()));

    // (c) disabled route
    let stack = Stack::start().await;
    ensure!(stack.admin("demo_lepto", false).await == 200, "(c) admin toggle failed");
    let before = stack.ehr_hits();
    let (status, _) = stack.predict("lepto", "P-FIG4", DAY, "Canine").await;
    ensure!(status == 503, "(c) status {status}");
    ensure!(stack.ehr_hits() == before, "(c) EHR was contacted");
    notes.push("c".into());

    // (d) unlisted client, by forwarded header and by peer address
    let good = r#"{"patient_id":"P-FIG4","query_date":"2024-06-27","species":"Canine"}"#;
    let (status, _) = stack.post_raw("/ml_classifier_run/shunt", good, Some("198.51.100.7")).await;
    ensure!(status == 403, "(d) forwarded status {status}");
    let stack2 = Stack::with(Options {
        tweak: Some(Box::new(|c| c.allowed_ips = vec!["10.9.8.7".parse().unwrap()])),
        ..Options::default()
    })
    .await;
    let (status2, _) = stack2.post_raw("/ml_classifier_run/shunt", good, None).await;
    ensure!(status2 == 403, "(d) peer status {status2}");
    for s in [&stack, &stack2] {
        ensure!(s.ehr_hits() == 0 && s.sidecar_hits() == 0, "(d) hits ehr={} sidecar={}", s.ehr_hits(), s.sidecar_hits());
    }
    notes.push("d".into());
    Ok(notes.join("; "))
}

async fn first_run_idempotence() -> Check {
    let stack = Stack::start().await;
    let body = r#"{"patient_id":"P-FIG4","query_date":"2024-06-27","species":"Canine"}"#;
    let stamps = |text: &str| -> Result<Vec<String>, String> {
        let v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(v["results"]
            .as_array()
            .ok_or("no results")?
            .iter()
            .map(|r| r["first_run_timestamp"].to_string())
            .collect())
    };
    let (_, first) = stack.post_raw("/ml_classifier_run/lepto", body, None).await;
    tokio::time::sleep(Duration::from_secs(2)).await;
    let (_, second) = stack.post_raw("/ml_classifier_run/lepto", body, None).await;
    let (a, b) = (stamps(&first)?, stamps(&second)?);
    ensure!(a.len() == 4 && a.iter().all(|s| s.starts_with('"')), "first response {first}");
    ensure!(a == b, "first_run_timestamp changed: {a:?} vs {b:?}");

    let records = read_records(&stack.config.audit.path).map_err(|e| e.to_string())?;
    let mut per_key: BTreeMap<_, BTreeSet<_>> = BTreeMap::new();
    for r in &records {
        per_key.entry(r.key()).or_default().insert(r.first_run_timestamp);
    }
    ensure!(per_key.len() == 4, "{} keys", per_key.len());
    ensure!(per_key.values().all(|s| s.len() == 1), "a key has several first-run instants");
    let gap = records
        .iter()
        .map(|r| (r.recorded_at - r.first_run_timestamp).num_milliseconds())
        .max()
        .unwrap_or(0);
    ensure!(gap >= 2000, "second request not 2 s later (gap {gap} ms)");
    Ok(format!("4 keys, {} records, one first-run instant each", records.len()))
}

async fn no_patient_data_at_rest() -> Check {
    let stack = Stack::start().await;
    let mut rng = StdRng::seed_from_u64(50);
    let routes = ["lepto", "addisons", "shunt"];
    let patients = ["P-FIG4", "P-NOCBC", "P-NOCREAT", "P-FEL", "P-NOTES", "P-MANY", "P-NONE"];
    let mut statuses = BTreeMap::new();
    for i in 0..50 {
        let route = routes[rng.gen_range(0..routes.len())];
        let patient = patients[rng.gen_range(0..patients.len())];
        let species = if patient == "P-FEL" && rng.gen_bool(0.5) { "Feline" } else { "Canine" };
        let day = date(DAY) + chrono::Days::new(rng.gen_range(0..4)) - chrono::Days::new(2);
        if i % 10 == 7 {
            stack.mock.control().set_fault("Chemistry", Some(Fault::MalformedBody));
        }
        let (status, _) = stack.predict(route, patient, &day.to_string(), species).await;
        stack.mock.control().set_fault("Chemistry", None);
        *statuses.entry(status).or_insert(0) += 1;
    }
    ensure!(statuses.keys().all(|s| *s == 200), "statuses {statuses:?}");
    let audit = read_records(&stack.config.audit.path).map_err(|e| e.to_string())?;
    ensure!(!audit.is_empty(), "soak stored nothing");

    let text = stack.persisted_text();
    let secrets = fixture_secrets();
    let hits: Vec<_> = secrets
        .iter()
        .filter(|s| standalone_occurrences(&text, s) > 0)
        .collect();
    ensure!(hits.is_empty(), "found {hits:?}");
    Ok(format!(
        "{} bytes scanned, {} audit records, {} fixture strings, 0 occurrences",
        text.len(),
        audit.len(),
        secrets.len()
    ))
}

async fn parallel_fetch() -> Check {
    let stack = Stack::start().await;
    for section in ["Hematology", "Chemistry", "Microbiology"] {
        stack.mock.control().set_latency(section, Duration::from_millis(100));
    }
    // gateway: start -> fetch step in the session log
    let mut through_gateway = Vec::new();
    for _ in 0..10 {
        let (_, body) = stack.predict("lepto", "P-FIG4", DAY, "Canine").await;
        let id = body["session_id"].as_str().ok_or("no session id")?;
        let events = stack.gateway.sessions().read_session(id).map_err(|e| e.to_string())?;
        let ts = |step: &str| {
            events
                .iter()
                .find(|e| e.step == step)
                .and_then(|e| DateTime::parse_from_rfc3339(&e.ts).ok())
        };
        let (Some(start), Some(fetched)) = (ts("start"), ts("fetch")) else {
            return Err(format!("missing steps in session {id}"));
        };
        through_gateway.push((fetched - start).to_std().unwrap_or_default());
    }
    // client alone, three sections
    let mock = MockEhr::start(common::fixtures(), AUTH, SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap();
    mock.control().set_default_latency(Duration::from_millis(100));
    let ehr = EhrClient::new(mock.base_url(), AUTH, Duration::from_secs(5));
    let windows = common::windows_for(&stack.config, "demo_lepto")
        .into_iter()
        .map(|(s, w)| (s, compute_fetch_window(date(DAY), w)))
        .collect();
    let mut client_only = Vec::new();
    for _ in 0..10 {
        let t = Instant::now();
        ehr.fetch_sections("P-FIG4", &windows).await.map_err(|e| e.to_string())?;
        client_only.push(t.elapsed());
    }
    let (g, c) = (median(through_gateway), median(client_only));
    let limit = Duration::from_millis(250);
    ensure!(g < limit && c < limit, "median gateway {g:?}, client {c:?}");
    ensure!(c >= Duration::from_millis(100), "latency not applied ({c:?})");
    Ok(format!("median fetch {}ms in gateway, {}ms client only", g.as_millis(), c.as_millis()))
}

async fn cleaning_conversion() -> Check {
    let units = shipped_units();
    let cases = golden_cases();
    ensure!(cases.len() == 30, "{} golden cases", cases.len());
    for case in &cases {
        let got = golden_actual(case, &units);
        ensure!(got == case.expected, "{:?} ({}): expected {:?}, got {got:?}", case.raw, case.note, case.expected);
    }
    ensure!(
        cases.iter().any(|c| c.from == "mg" && c.to == "µg" && c.expected == Some(1500.0)),
        "mg to µg case missing"
    );
    let mut rng = StdRng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for entry in units.entries() {
        for _ in 0..1000 {
            let v: f64 = 10f64.powf(rng.gen_range(-6.0..6.0));
            let a = entry.analyte.as_deref();
            let there = units.convert(v, &entry.from, &entry.to, a).map_err(|e| e.to_string())?;
            let back = units.convert(there, &entry.to, &entry.from, a).map_err(|e| e.to_string())?;
            worst = worst.max(((back - v) / v).abs());
        }
    }
    ensure!(worst <= 1e-9, "round-trip relative error {worst:e}");
    Ok(format!("30/30 exact, worst round-trip error {worst:e}"))
}

async fn multi_class() -> Check {
    let stack = Stack::start().await;
    let declared = match &stack.config.classifiers.iter().find(|c| c.classifier_id == "demo_shunt").unwrap().prediction_kind {
        PredictionKind::MultiClass(labels) => labels.clone(),
        PredictionKind::Binary => return Err("demo_shunt is not multi-class".into()),
    };
    let (_, body) = stack.predict("shunt", "P-FIG4", DAY, "Canine").await;
    let labels: Vec<String> = body["results"]
        .as_array()
        .ok_or("no results")?
        .iter()
        .map(|r| r["prediction"].as_str().unwrap_or_default().to_string())
        .collect();
    ensure!(labels.iter().all(|l| declared.contains(l)), "{labels:?} outside {declared:?}");
    let expected = ["intrahepatic", "extrahepatic", "extrahepatic", "none"];
    ensure!(labels == expected, "got {labels:?}, reference model says {expected:?}");
    Ok(format!("labels {labels:?}"))
}

type Criterion = (&'static str, fn() -> Pin<Box<dyn Future<Output = Check>>>);

fn main() {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("fetch windows for the three-section example", || Box::pin(figure2_windows())),
        ("all-vs-all merge of the two-by-two example", || Box::pin(figure4_merge())),
        ("error semantics (a)-(d)", || Box::pin(error_semantics())),
        ("first-run timestamp idempotence", || Box::pin(first_run_idempotence())),
        ("no patient data at rest after 50-request soak", || Box::pin(no_patient_data_at_rest())),
        ("parallel section fetch", || Box::pin(parallel_fetch())),
        ("cleaning and conversion golden table", || Box::pin(cleaning_conversion())),
        ("multi-class label forwarded verbatim", || Box::pin(multi_class())),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = runtime.block_on(run());
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}  ({detail}; {secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}  ({why}; {secs:.2}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
