//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so every line reaches the console; exits non-zero if any fail.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vvpat::bench;
use vvpat::classifier::{evaluate, Candidate, Prediction, Predictor};
use vvpat::cli;
use vvpat::service::{self, ManualClock, Service, ServiceConfig};
use vvpat::sim::{simulate_counting, SimConfig};
use vvpat::tally::{
    detect_rate_anomalies, reconcile_counts, tally_predictions, AnomalyWindow, Decision,
    ReconciliationStatus,
};
use vvpat::PartyId;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gen_dataset() -> Check {
    let registry = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/49");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = |out: &Path| {
        let started = Instant::now();
        let result = cli::run([
            "vvpat", "gen-dataset", "--registry", registry.to_str().unwrap(),
            "--out", out.to_str().unwrap(), "--seed", "42",
        ]);
        (result, started.elapsed())
    };
    let (first, elapsed) = gen(&root.path().join("a"));
    ensure(first.code == 0, || format!("exit {}: {}", first.code, first.stderr))?;
    let (second, _) = gen(&root.path().join("b"));
    ensure(second.code == 0, || format!("second run exit {}", second.code))?;

    let mut images = 0;
    for label in std::fs::read_dir(root.path().join("a")).map_err(|e| e.to_string())? {
        let label = label.map_err(|e| e.to_string())?.path();
        if !label.is_dir() {
            continue;
        }
        for file in std::fs::read_dir(&label).map_err(|e| e.to_string())? {
            let file = file.map_err(|e| e.to_string())?.path();
            let bytes = std::fs::read(&file).map_err(|e| e.to_string())?;
            let img = image::load_from_memory(&bytes).map_err(|e| e.to_string())?;
            ensure(img.width() == 180 && img.height() == 180, || format!("{} is {}x{}", file.display(), img.width(), img.height()))?;
            let twin = root.path().join("b").join(file.strip_prefix(root.path().join("a")).unwrap());
            ensure(std::fs::read(&twin).ok() == Some(bytes), || format!("{} differs between runs", twin.display()))?;
            images += 1;
        }
    }
    ensure(images == 49 * 19, || format!("{images} images, expected 931"))?;
    ensure(elapsed.as_secs_f64() < 10.0, || format!("took {elapsed:.2?}"))?;
    Ok(format!("{images} images (49×19) at 180×180, byte-identical across runs, {:.2} s", elapsed.as_secs_f64()))
}

fn accuracy() -> Check {
    let t = common::trained();
    let metrics = evaluate(t.model.as_ref(), &t.test).map_err(|e| e.to_string())?;
    ensure(t.test.len() == 196, || format!("test set has {} items", t.test.len()))?;
    ensure(metrics.accuracy >= 0.95, || format!("accuracy {:.4}", metrics.accuracy))?;
    Ok(format!("accuracy {:.4} on {} test images", metrics.accuracy, t.test.len()))
}

fn latency() -> Check {
    let t = common::trained();
    let images: Vec<_> = t.test.items.iter().map(|i| i.image.clone()).collect();
    let report = bench::run(t.model.as_ref(), &images).map_err(|e| e.to_string())?;
    ensure(report.single_image.mean_ms < 40.0, || format!("mean {:.3} ms", report.single_image.mean_ms))?;
    ensure(report.batch.slips == 1500 && report.batch.seconds < 60.0, || format!("batch {:.2} s", report.batch.seconds))?;
    Ok(format!(
        "mean {:.3} ms/image (p95 {:.3} ms); 1500-slip batch in {:.2} s",
        report.single_image.mean_ms, report.single_image.p95_ms, report.batch.seconds
    ))
}

fn paper_state() -> Check {
    let report = simulate_counting(&SimConfig::preset("paper-state").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    // closed form: 60M voters / 1500 per booth = 40,000 EVMs; 10 min capture
    // + 1500 × 40 ms + 4 min handling = 15 min each; ⌈40,000 / 1,500⌉ = 27 rounds
    let booths = 60_000_000u64.div_ceil(1500);
    let per_evm = 10.0 + 1500.0 * 40.0 / 60_000.0 + 4.0;
    let expected = booths.div_ceil(1500) as f64 * per_evm;
    ensure(report.booths == booths, || format!("booths {}", report.booths))?;
    ensure(report.makespan_minutes == expected, || format!("makespan {} vs {expected}", report.makespan_minutes))?;
    ensure(report.makespan_minutes <= 420.0, || format!("makespan {} > 420", report.makespan_minutes))?;
    Ok(format!("booths {}, makespan {} min (closed form {expected}, bound 420)", report.booths, report.makespan_minutes))
}

fn reconciliation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut matches = 0;
    for case in 0..1000 {
        let parties = rng.random_range(1..10u32);
        let evm: BTreeMap<PartyId, u64> = (0..parties).map(|p| (PartyId(p), rng.random_range(0..200))).collect();
        let mut vvpat = evm.clone();
        // about half the pairs are perturbed
        if rng.random_bool(0.5) {
            for _ in 0..rng.random_range(1..4) {
                let p = PartyId(rng.random_range(0..parties + 1));
                let n = vvpat.entry(p).or_insert(0);
                *n = n.saturating_add_signed(rng.random_range(-3..=3i64));
            }
        }
        let r = reconcile_counts("E", &evm, &vvpat, 0);
        let zero = r.deltas.values().all(|d| *d == 0);
        ensure((r.status == ReconciliationStatus::Match) == zero, || format!("case {case}: status {:?} with deltas {:?}", r.status, r.deltas))?;
        let same = (0..=parties).all(|p| evm.get(&PartyId(p)).copied().unwrap_or(0) == vvpat.get(&PartyId(p)).copied().unwrap_or(0));
        ensure(zero == same, || format!("case {case}: deltas disagree with the maps"))?;
        if r.status == ReconciliationStatus::Mismatch {
            ensure(r.final_counts == vvpat, || format!("case {case}: final counts are not the VVPAT counts"))?;
        } else {
            matches += 1;
        }
    }
    Ok(format!("1000 random pairs ({matches} MATCH, {} MISMATCH), law holds", 1000 - matches))
}

fn brute_force_anomalies(ts: &[DateTime<Utc>], limit: usize, window: Duration) -> Vec<AnomalyWindow> {
    let mut merged: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
    for &anchor in ts {
        if ts.iter().filter(|&&t| t >= anchor && t < anchor + window).count() > limit {
            match merged.last_mut() {
                Some(last) if anchor < last.1 => last.1 = anchor + window,
                Some(last) if anchor == last.0 => {}
                _ => merged.push((anchor, anchor + window)),
            }
        }
    }
    merged
        .into_iter()
        .map(|(s, e)| AnomalyWindow { window_start: s, window_end: e, slip_count: ts.iter().filter(|&&t| t >= s && t < e).count() })
        .collect()
}

fn anomalies() -> Check {
    let t0 = Utc.with_ymd_and_hms(2024, 4, 19, 7, 0, 0).unwrap();
    let window = Duration::seconds(60);
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut flagged = 0;
    for case in 0..10_000 {
        let n = rng.random_range(0..=50);
        let span = rng.random_range(30..900);
        let mut secs: Vec<i64> = (0..n).map(|_| rng.random_range(0..span)).collect();
        secs.sort_unstable();
        let ts: Vec<_> = secs.iter().map(|s| t0 + Duration::seconds(*s)).collect();
        let got = detect_rate_anomalies(&ts, 8, window).map_err(|e| e.to_string())?;
        let want = brute_force_anomalies(&ts, 8, window);
        ensure(got == want, || format!("case {case}: {got:?} != {want:?} for {secs:?}"))?;
        flagged += usize::from(!got.is_empty());
    }
    // exactly 8 in a minute is allowed; a ninth inside the minute is not
    let eight: Vec<_> = (0..8).map(|i| t0 + Duration::seconds(i * 8)).collect();
    ensure(detect_rate_anomalies(&eight, 8, window).map_err(|e| e.to_string())?.is_empty(), || "8 slips/minute flagged".into())?;
    let mut nine = eight.clone();
    nine.push(t0 + Duration::seconds(59));
    ensure(detect_rate_anomalies(&nine, 8, window).map_err(|e| e.to_string())?.len() == 1, || "9 slips/minute not flagged".into())?;
    Ok(format!("10000 random sets match brute force ({flagged} with anomalies); 8/min boundary clean"))
}

fn conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut operations = 0;
    for case in 0..500 {
        let n = rng.random_range(0..120);
        let predictions: Vec<(String, Prediction)> = (0..n)
            .map(|i| {
                let party = PartyId(rng.random_range(0..10));
                let confidence: f64 = rng.random();
                let top_k = vec![Candidate { party_id: party, similarity: confidence, probability: confidence }];
                (format!("S{i:04}"), Prediction { party_id: party, confidence, margin: 0.0, top_k })
            })
            .collect();
        let sheet = tally_predictions("E".into(), predictions, rng.random());
        sheet.check_conservation().map_err(|e| format!("case {case}: {e}"))?;
        let decisions: Vec<(String, Decision)> = sheet
            .review_queue
            .iter()
            .map(|q| {
                let d = if rng.random_bool(0.2) { Decision::Rejected } else { Decision::Party(PartyId(rng.random_range(0..10))) };
                (q.slip_id.clone(), d)
            })
            .collect();
        let mut finals = Vec::new();
        for _ in 0..3 {
            let mut order = decisions.clone();
            order.shuffle(&mut rng);
            let mut s = sheet.clone();
            for (slip, d) in &order {
                s.apply_adjudication(slip, *d).map_err(|e| format!("case {case}: {e}"))?;
                s.check_conservation().map_err(|e| format!("case {case}: {e}"))?;
                operations += 1;
            }
            finals.push((s.vvpat_counts(), s.rejected));
        }
        ensure(finals.windows(2).all(|w| w[0] == w[1]), || format!("case {case}: order changed the final counts"))?;
    }
    Ok(format!("500 random tallies × 3 decision orders, conservation held after {operations} operations"))
}

fn journal_replay() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let journal = dir.path().join("journal.jsonl");
    let a = common::write_batch(&dir.path().join("a"), "EVM-A", &[10, 8, 6], 4, 5);
    let b = common::write_batch(&dir.path().join("b"), "EVM-B", &[7, 7], 3, 6);
    let clock = Arc::new(ManualClock::new(common::poll_open()));
    let open = || -> Result<Service, String> {
        let model: Arc<dyn Predictor> = common::trained().model.clone();
        Service::open(ServiceConfig::new(&journal), Some(model), clock.clone()).map_err(|e| e.to_string())
    };
    let mut svc = open()?;
    svc.load_batch(&a.manifest, None).map_err(|e| e.to_string())?;
    svc.load_batch(&b.manifest, None).map_err(|e| e.to_string())?;
    let mut decisions = 0;
    while let Some(task) = svc.claim_next_task("official").map_err(|e| e.to_string())? {
        clock.advance(Duration::seconds(3));
        let batch = if task.evm_id == "EVM-A" { &a } else { &b };
        let d = batch.truth_of(&task.slip_id).map_or(Decision::Rejected, Decision::Party);
        svc.submit_decision(&task.task_id, "official", d).map_err(|e| e.to_string())?;
        decisions += 1;
        let live = svc.snapshot();
        // kill without shutdown, restart from the journal
        drop(svc);
        svc = open()?;
        ensure(svc.snapshot() == live, || format!("state differs after restart at decision {decisions}"))?;
        ensure(service::replay(&journal).map_err(|e| e.to_string())? == live, || format!("replay differs at decision {decisions}"))?;
    }
    ensure(decisions >= 7, || format!("only {decisions} decisions exercised"))?;
    Ok(format!("state identical after kill-and-restart at each of {decisions} decisions"))
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("gen-dataset", gen_dataset),
        ("classifier accuracy", accuracy),
        ("inference latency", latency),
        ("paper-state preset", paper_state),
        ("reconciliation law", reconciliation),
        ("rate-anomaly oracle", anomalies),
        ("conservation and order independence", conservation),
        ("journal kill-and-replay", journal_replay),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
