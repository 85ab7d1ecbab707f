//! Fit the nearest-centroid classifier on the training split and report
//! test accuracy, weak classes and the most frequent confusions.
//!
//! ```text
//! cargo run --release --example train_and_evaluate
//! ```

use vvpat::augment::AugmentationSpec;
use vvpat::classifier::{evaluate, fit, MetricsReport};
use vvpat::dataset::{build_labeled_dataset, split_dataset};
use vvpat::fixtures::{synthetic_registry, SYMBOL_COUNT};

fn main() -> anyhow::Result<()> {
    let registry = synthetic_registry(SYMBOL_COUNT);
    let dataset = build_labeled_dataset(&registry, &AugmentationSpec::canonical(42))?;
    let (train, test) = split_dataset(&dataset, 0.8, 42)?;
    let model = fit(&train)?.with_party_names(&registry);

    let report = MetricsReport::new(evaluate(&model, &test)?, 0.8)?;
    println!("trained on {} images, tested on {}", train.len(), report.test_items);
    println!("accuracy {:.4}", report.accuracy);
    if report.low_recall_classes.is_empty() {
        println!("every class has recall >= {}", report.recall_threshold);
    }
    for party in &report.low_recall_classes {
        println!(
            "low recall {party} {}: {:.2}",
            model.party_name(*party).unwrap_or(""),
            report.per_class_recall[party]
        );
    }

    let labels = &report.confusion.labels;
    let mut confusions = Vec::new();
    for &truth in labels {
        for &predicted in labels {
            let n = report.confusion.get(truth, predicted);
            if truth != predicted && n > 0 {
                confusions.push((n, truth, predicted));
            }
        }
    }
    confusions.sort_by(|a, b| b.0.cmp(&a.0));
    for (n, truth, predicted) in confusions.iter().take(5) {
        println!("{truth} mistaken for {predicted} {n}x");
    }
    Ok(())
}
