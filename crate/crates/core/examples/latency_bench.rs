//! Measure single-image prediction latency and the time to tally one full
//! 1500-slip EVM batch.
//!
//! ```text
//! cargo run --release --example latency_bench
//! ```

use vvpat::augment::AugmentationSpec;
use vvpat::bench;
use vvpat::classifier::fit;
use vvpat::dataset::{build_labeled_dataset, split_dataset};
use vvpat::fixtures::{synthetic_registry, SYMBOL_COUNT};

fn main() -> anyhow::Result<()> {
    let registry = synthetic_registry(SYMBOL_COUNT);
    let dataset = build_labeled_dataset(&registry, &AugmentationSpec::canonical(42))?;
    let (train, test) = split_dataset(&dataset, 0.8, 42)?;
    let model = fit(&train)?;
    let images: Vec<_> = test.items.into_iter().map(|item| item.image).collect();

    let report = bench::run(&model, &images)?;
    let s = &report.single_image;
    println!(
        "single image over {} slips: mean {:.3} ms, p50 {:.3} ms, p95 {:.3} ms, max {:.3} ms",
        s.images, s.mean_ms, s.p50_ms, s.p95_ms, s.max_ms
    );
    println!(
        "batch of {} slips: {:.2} s ({:.0} slips/s on {} threads)",
        report.batch.slips, report.batch.seconds, report.batch.slips_per_second, report.threads
    );
    Ok(())
}
