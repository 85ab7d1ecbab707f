//! Count one EVM's slips, resolve the low-confidence ones as a reviewer
//! would, and reconcile against the machine's electronic counts.
//!
//! ```text
//! cargo run --release --example count_and_adjudicate
//! ```

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use vvpat::augment::AugmentationSpec;
use vvpat::classifier::fit;
use vvpat::dataset::{build_labeled_dataset, split_dataset};
use vvpat::fixtures::{simulated_poll, synthetic_registry, write_slip_batch};
use vvpat::tally::{count_slips, manifest_root, read_slip_manifest, Decision, DEFAULT_CONFIDENCE_THRESHOLD};
use vvpat::PartyId;

fn main() -> anyhow::Result<()> {
    // an eight-party constituency
    let registry = synthetic_registry(8);
    let dataset = build_labeled_dataset(&registry, &AugmentationSpec::canonical(42))?;
    let model = fit(&split_dataset(&dataset, 0.8, 42)?.0)?;

    let votes = [120, 95, 60, 40, 22, 10, 6, 3];
    let (images, truth) = simulated_poll(&registry, &votes, 4, 2024);
    let dir = tempfile::tempdir()?;
    let start = Utc.with_ymd_and_hms(2024, 4, 19, 7, 0, 0).unwrap();
    let manifest = write_slip_batch(dir.path(), "EVM-042", &images, start, Duration::seconds(45))?;
    let slips = read_slip_manifest(&manifest)?;

    let mut sheet = count_slips(&model, &slips, DEFAULT_CONFIDENCE_THRESHOLD, &manifest_root(&manifest))?;
    println!(
        "{} slips: {} counted automatically, {} sent for review",
        sheet.total_slips,
        sheet.auto_counts.values().sum::<u64>(),
        sheet.review_queue.len()
    );

    // the reviewer sees the slip and knows what is on it
    let truth_by_slip: BTreeMap<&str, Option<PartyId>> =
        slips.iter().map(|s| s.slip_id.as_str()).zip(truth.iter().copied()).collect();
    let queue: Vec<String> = sheet.review_queue.iter().map(|q| q.slip_id.clone()).collect();
    for slip_id in queue {
        let decision = match truth_by_slip[slip_id.as_str()] {
            Some(party) => Decision::Party(party),
            None => Decision::Rejected,
        };
        sheet.apply_adjudication(&slip_id, decision)?;
    }
    sheet.check_conservation()?;

    // the EVM recorded every valid vote; then one with an extra vote for 002
    let mut evm_counts: BTreeMap<PartyId, u64> = registry
        .records()
        .iter()
        .zip(votes)
        .map(|(r, n)| (r.party_id, n as u64))
        .collect();
    let honest = sheet.reconcile(&evm_counts)?;
    println!("against the true counts: {:?}", honest.status);

    *evm_counts.get_mut(&PartyId(2)).unwrap() += 1;
    let result = sheet.reconcile(&evm_counts)?;
    println!("against a tampered EVM: {:?}", result.status);
    for (party, delta) in result.deltas.iter().filter(|(_, d)| **d != 0) {
        println!("  {party}: VVPAT minus EVM = {delta:+}, final count {}", result.final_counts[party]);
    }
    println!("  {} slips rejected", result.rejected);
    Ok(())
}
