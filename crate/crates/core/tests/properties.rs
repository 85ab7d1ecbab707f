//! Property tests against independent oracles.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use image::{GrayImage, Luma};
use proptest::prelude::*;
use vvpat::classifier::{preprocess, Candidate, Prediction};
use vvpat::dataset::{split_dataset, LabeledDataset, LabeledItem};
use vvpat::fixtures::{render, Glyph, Placement};
use vvpat::registry::Registry;
use vvpat::sim::{allocate_units, simulate_counting, Center, SimConfig};
use vvpat::tally::{
    detect_rate_anomalies, reconcile_counts, tally_predictions, AnomalyWindow, Decision,
    ReconciliationStatus, TallySheet,
};
use vvpat::PartyId;

// ---------- oracles ----------

/// Brute-force rate anomalies: every slip time anchors a window
/// [t, t + window); a window with more than `limit` slips violates; violating
/// windows that overlap are united.
fn anomalies_oracle(ts: &[DateTime<Utc>], limit: usize, window: Duration) -> Vec<AnomalyWindow> {
    let mut spans: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
    for &anchor in ts {
        let inside = ts.iter().filter(|&&t| t >= anchor && t < anchor + window).count();
        if inside > limit {
            spans.push((anchor, anchor + window));
        }
    }
    spans.sort();
    spans.dedup();
    let mut merged: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if s < last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
        .into_iter()
        .map(|(s, e)| AnomalyWindow {
            window_start: s,
            window_end: e,
            slip_count: ts.iter().filter(|&&t| t >= s && t < e).count(),
        })
        .collect()
}

/// Cosine similarity computed directly on mean-centred 32×32 box averages,
/// rescaled to [0, 1].
fn similarity_oracle(a: &GrayImage, b: &GrayImage) -> f64 {
    let features = |img: &GrayImage| {
        let mut cells = vec![0.0f64; 32 * 32];
        for y in 0..180u32 {
            for x in 0..180u32 {
                // each source pixel spreads over the output cells it overlaps
                let v = img.get_pixel(x, y)[0] as f64;
                for (cy, wy) in overlaps(y) {
                    for (cx, wx) in overlaps(x) {
                        cells[cy * 32 + cx] += v * wy * wx;
                    }
                }
            }
        }
        let mean = cells.iter().sum::<f64>() / cells.len() as f64;
        cells.iter_mut().for_each(|c| *c -= mean);
        let norm = cells.iter().map(|c| c * c).sum::<f64>().sqrt();
        cells.iter_mut().for_each(|c| *c /= norm);
        cells
    };
    let (fa, fb) = (features(a), features(b));
    (fa.iter().zip(&fb).map(|(x, y)| x * y).sum::<f64>() + 1.0) / 2.0
}

/// Output cells covered by source pixel `p` and the overlap fractions.
fn overlaps(p: u32) -> Vec<(usize, f64)> {
    let scale = 32.0 / 180.0;
    let (lo, hi) = (p as f64 * scale, (p + 1) as f64 * scale);
    let mut out = Vec::new();
    let mut cell = lo.floor() as usize;
    while (cell as f64) < hi && cell < 32 {
        let overlap = hi.min(cell as f64 + 1.0) - lo.max(cell as f64);
        if overlap > 1e-12 {
            out.push((cell, overlap));
        }
        cell += 1;
    }
    out
}

fn party_counts(pairs: &[(PartyId, u64)]) -> BTreeMap<PartyId, u64> {
    pairs.iter().copied().filter(|(_, n)| *n > 0).collect()
}

// ---------- generators ----------

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 4, 19, 7, 0, 0).unwrap()
}

fn timestamps(max_len: usize, span_secs: i64) -> impl Strategy<Value = Vec<DateTime<Utc>>> {
    prop::collection::vec(0..span_secs, 0..=max_len).prop_map(|mut s| {
        s.sort_unstable();
        s.into_iter().map(|x| t0() + Duration::seconds(x)).collect()
    })
}

fn prediction(party: u32, confidence: f64) -> Prediction {
    Prediction {
        party_id: PartyId(party),
        confidence,
        margin: 0.0,
        top_k: vec![Candidate { party_id: PartyId(party), similarity: 1.0, probability: confidence }],
    }
}

/// A batch of predictions over `parties` classes.
fn predictions(max_len: usize) -> impl Strategy<Value = Vec<(String, Prediction)>> {
    prop::collection::vec((0u32..6, 0.0f64..=1.0), 0..=max_len).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (p, c))| (format!("S{i:04}"), prediction(p, c)))
            .collect()
    })
}

fn glyph() -> impl Strategy<Value = Glyph> {
    prop::sample::select(vec![
        Glyph::Disc,
        Glyph::Square,
        Glyph::Triangle,
        Glyph::Star,
        Glyph::Plus,
        Glyph::Ring,
        Glyph::Bars,
    ])
}

fn symbol() -> impl Strategy<Value = GrayImage> {
    prop::collection::vec((glyph(), -0.5f64..0.5, -0.5f64..0.5, 0.25f64..0.45), 1..=3).prop_map(|ps| {
        render(
            &ps.into_iter()
                .map(|(glyph, x, y, radius)| Placement { glyph, center: (x, y), radius })
                .collect::<Vec<_>>(),
        )
    })
}

// ---------- properties ----------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn anomalies_match_brute_force(ts in timestamps(50, 600), limit in 0usize..12, window in 1i64..120) {
        let window = Duration::seconds(window);
        prop_assert_eq!(detect_rate_anomalies(&ts, limit, window).unwrap(), anomalies_oracle(&ts, limit, window));
    }

    #[test]
    fn reconciliation_law(
        evm in prop::collection::vec((0u32..8, 0u64..5), 0..8),
        vvpat in prop::collection::vec((0u32..8, 0u64..5), 0..8),
        rejected in 0u64..5,
    ) {
        let evm: BTreeMap<PartyId, u64> = evm.into_iter().map(|(p, n)| (PartyId(p), n)).collect();
        let vvpat: BTreeMap<PartyId, u64> = vvpat.into_iter().map(|(p, n)| (PartyId(p), n)).collect();
        let r = reconcile_counts("E", &evm, &vvpat, rejected);
        let all_zero = r.deltas.values().all(|d| *d == 0);
        prop_assert_eq!(r.status == ReconciliationStatus::Match, all_zero);
        for (party, delta) in &r.deltas {
            let expected = *vvpat.get(party).unwrap_or(&0) as i64 - *evm.get(party).unwrap_or(&0) as i64;
            prop_assert_eq!(*delta, expected);
        }
        if r.status == ReconciliationStatus::Mismatch {
            prop_assert_eq!(&r.final_counts, &vvpat);
        }
        // MATCH exactly when the maps agree once zero entries are ignored
        let nonzero = |m: &BTreeMap<PartyId, u64>| party_counts(&m.iter().map(|(p, n)| (*p, *n)).collect::<Vec<_>>());
        prop_assert_eq!(r.status == ReconciliationStatus::Match, nonzero(&evm) == nonzero(&vvpat));
    }

    #[test]
    fn adjudication_conserves_and_commutes(
        preds in predictions(40),
        threshold in 0.0f64..=1.0,
        decisions in prop::collection::vec(prop::option::of(0u32..6), 40),
        order_seed in any::<u64>(),
    ) {
        let sheet = tally_predictions("E".into(), preds.clone(), threshold);
        sheet.check_conservation().unwrap();
        let queue: Vec<(String, Decision)> = sheet
            .review_queue
            .iter()
            .zip(&decisions)
            .map(|(q, d)| (q.slip_id.clone(), d.map_or(Decision::Rejected, |p| Decision::Party(PartyId(p)))))
            .collect();

        let apply_all = |order: &[(String, Decision)]| -> TallySheet {
            let mut s = sheet.clone();
            for (slip, decision) in order {
                s.apply_adjudication(slip, *decision).unwrap();
                s.check_conservation().unwrap();
                let counted: u64 = s.auto_counts.values().sum::<u64>() + s.adjudicated_counts.values().sum::<u64>();
                assert_eq!(counted + s.rejected + s.review_queue.len() as u64, s.total_slips);
            }
            s
        };
        let forward = apply_all(&queue);
        let mut shuffled = queue.clone();
        let mut state = order_seed | 1;
        for i in (1..shuffled.len()).rev() {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let permuted = apply_all(&shuffled);
        prop_assert_eq!(forward.vvpat_counts(), permuted.vvpat_counts());
        prop_assert_eq!(forward.rejected, permuted.rejected);
        prop_assert_eq!(&forward.decisions, &permuted.decisions);
        prop_assert_eq!(forward.review_queue.len() + queue.len(), sheet.review_queue.len());
        // a second decision on the same slip is refused
        if let Some((slip, _)) = queue.first() {
            let mut again = forward.clone();
            prop_assert!(again.apply_adjudication(slip, Decision::Rejected).is_err());
        }
    }

    #[test]
    fn raising_the_threshold_only_grows_the_queue(preds in predictions(60), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = tally_predictions("E".into(), preds.clone(), lo);
        let high = tally_predictions("E".into(), preds.clone(), hi);
        prop_assert!(high.review_queue.len() >= low.review_queue.len());
        for (party, n) in &high.auto_counts {
            prop_assert!(*n <= low.auto_counts[party]);
        }
        // the queue is ordered least confident first
        prop_assert!(high.review_queue.windows(2).all(|w| w[0].prediction.confidence <= w[1].prediction.confidence));
        // oracle: queue membership is exactly confidence < threshold
        let expected: BTreeSet<&str> = preds.iter().filter(|(_, p)| p.confidence < hi).map(|(s, _)| s.as_str()).collect();
        let actual: BTreeSet<&str> = high.review_queue.iter().map(|q| q.slip_id.as_str()).collect();
        prop_assert_eq!(expected, actual);
    }

    #[test]
    fn stratified_split_partitions(sizes in prop::collection::vec(1usize..30, 1..8), fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let tiny = GrayImage::new(1, 1);
        let items: Vec<LabeledItem> = sizes
            .iter()
            .enumerate()
            .flat_map(|(label, &n)| (0..n).map(move |v| (label, v)))
            .map(|(label, v)| LabeledItem { image: tiny.clone(), label: PartyId(label as u32), variant_index: v as u8 })
            .collect();
        let ds = LabeledDataset { items };
        let (train, test) = split_dataset(&ds, fraction, seed).unwrap();
        prop_assert_eq!((train.clone(), test.clone()), split_dataset(&ds, fraction, seed).unwrap());
        let key = |i: &LabeledItem| (i.label, i.variant_index);
        let mut all: Vec<_> = train.items.iter().chain(&test.items).map(key).collect();
        all.sort();
        let mut original: Vec<_> = ds.items.iter().map(key).collect();
        original.sort();
        prop_assert_eq!(all, original);
        for (label, n) in sizes.iter().enumerate() {
            let in_test = test.items.iter().filter(|i| i.label == PartyId(label as u32)).count();
            prop_assert_eq!(in_test, ((1.0 - fraction) * *n as f64).round() as usize);
        }
        // both halves keep dataset order
        let position = |i: &LabeledItem| ds.items.iter().position(|d| key(d) == key(i)).unwrap();
        prop_assert!(train.items.windows(2).all(|w| position(&w[0]) < position(&w[1])));
        prop_assert!(test.items.windows(2).all(|w| position(&w[0]) < position(&w[1])));
    }

    #[test]
    fn single_center_makespan_is_closed_form(
        voters in 1u64..5_000_000,
        units in 1u64..3_000,
        capture in 0.0f64..30.0,
        predict_ms in 0.0f64..100.0,
        overhead in 0.0f64..10.0,
    ) {
        let mut config = SimConfig::new(voters, units);
        config.capture_minutes_per_evm = capture;
        config.predict_ms_per_slip = predict_ms;
        config.handling_overhead_minutes = overhead;
        prop_assume!(capture + predict_ms + overhead > 0.0);
        let report = simulate_counting(&config).unwrap();
        let booths = voters.div_ceil(1500);
        let per_evm = capture + 1500.0 * predict_ms / 60_000.0 + overhead;
        prop_assert_eq!(report.booths, booths);
        prop_assert!((report.makespan_minutes - booths.div_ceil(units) as f64 * per_evm).abs() < 1e-9 * (1.0 + report.makespan_minutes));

        // more units never slow things down; more voters never speed them up
        let faster = simulate_counting(&SimConfig { units_available: units + 1, ..config.clone() }).unwrap();
        prop_assert!(faster.makespan_minutes <= report.makespan_minutes);
        let busier = simulate_counting(&SimConfig { total_voters: voters + 1500, ..config }).unwrap();
        prop_assert!(busier.makespan_minutes >= report.makespan_minutes);
    }

    #[test]
    fn unit_allocation_respects_quotas(weights in prop::collection::vec(1u32..100, 1..8), extra in 0u64..500) {
        let total: u32 = weights.iter().sum();
        let centers: Vec<Center> = weights
            .iter()
            .enumerate()
            .map(|(i, w)| Center { center_id: format!("c{i}"), voter_share: *w as f64 / total as f64 })
            .collect();
        let units = centers.len() as u64 + extra;
        let alloc = allocate_units(&centers, units).unwrap();
        prop_assert_eq!(alloc.values().sum::<u64>(), units);
        prop_assert!(alloc.values().all(|&n| n >= 1));
        for c in &centers {
            let quota = c.voter_share * units as f64;
            // within one unit of the quota, except for the minimum-one rule
            prop_assert!(alloc[&c.center_id] as f64 <= quota.ceil() + 1.0);
            prop_assert!(alloc[&c.center_id] as f64 >= quota.floor().min(1.0) - 1.0);
        }
    }

    #[test]
    fn features_ignore_brightness_and_contrast(pixels in prop::collection::vec(0u8..=100, 180 * 180), gain in 1u8..=2, offset in 0u8..=50) {
        let base = GrayImage::from_raw(180, 180, pixels).unwrap();
        prop_assume!(!vvpat::raster::is_uniform(&base));
        let shifted = GrayImage::from_fn(180, 180, |x, y| Luma([base.get_pixel(x, y)[0] * gain + offset]));
        let a = preprocess(&base).unwrap();
        let b = preprocess(&shifted).unwrap();
        prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn similar_pairs_match_brute_force(symbols in prop::collection::vec(symbol(), 2..=6), threshold in 0.3f64..0.9) {
        let mut registry = Registry::new();
        for (i, s) in symbols.iter().enumerate() {
            registry.register_symbol(&format!("P{i}"), s).unwrap();
        }
        let found: Vec<(u32, u32)> = registry
            .find_similar_symbols(threshold)
            .unwrap()
            .iter()
            .map(|p| (p.first.0, p.second.0))
            .collect();
        let mut expected = Vec::new();
        for i in 0..symbols.len() {
            for j in i + 1..symbols.len() {
                let s = similarity_oracle(&symbols[i], &symbols[j]);
                // skip pairs within rounding distance of the threshold
                if (s - threshold).abs() < 1e-9 {
                    prop_assume!(false);
                }
                if s >= threshold {
                    expected.push((i as u32, j as u32));
                }
            }
        }
        let mut found_sorted = found.clone();
        found_sorted.sort();
        prop_assert_eq!(found_sorted, expected);
    }
}

#[test]
fn exactly_the_limit_is_not_an_anomaly() {
    let eight: Vec<_> = (0..8).map(|i| t0() + Duration::seconds(i * 7)).collect();
    assert!(detect_rate_anomalies(&eight, 8, Duration::seconds(60)).unwrap().is_empty());
    let mut nine = eight.clone();
    nine.push(t0() + Duration::seconds(59));
    let found = detect_rate_anomalies(&nine, 8, Duration::seconds(60)).unwrap();
    assert_eq!(found.len(), 1);
    assert_eq!(found[0].slip_count, 9);
    // the ninth slip one second later falls outside the first window
    let mut late = eight;
    late.push(t0() + Duration::seconds(60));
    assert!(detect_rate_anomalies(&late, 8, Duration::seconds(60)).unwrap().is_empty());
}

#[test]
fn identical_symbols_are_maximally_similar() {
    let img = render(&[Placement { glyph: Glyph::Star, center: (0.0, 0.0), radius: 0.4 }]);
    assert!((similarity_oracle(&img, &img) - 1.0).abs() < 1e-9);
    let mut registry = Registry::new();
    registry.register_symbol("a", &img).unwrap();
    registry.register_symbol("b", &img).unwrap();
    let pairs = registry.find_similar_symbols(1.0).unwrap();
    assert_eq!(pairs.len(), 1);
}
