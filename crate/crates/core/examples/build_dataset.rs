//! Expand the symbol registry into the labelled 931-image training set and
//! split it 80/20 by party.
//!
//! ```text
//! cargo run --release --example build_dataset -- fixtures/49 /tmp/ds
//! ```

use std::path::PathBuf;
use std::time::Instant;

use vvpat::augment::AugmentationSpec;
use vvpat::dataset::{build_labeled_dataset, split_dataset, write_manifest, TEST_MANIFEST, TRAIN_MANIFEST};
use vvpat::registry::Registry;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args_os().skip(1).map(PathBuf::from);
    let registry_dir = args.next().unwrap_or_else(|| "fixtures/49".into());
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("vvpat-dataset"));

    let registry = Registry::load(&registry_dir)?;
    let start = Instant::now();
    let dataset = build_labeled_dataset(&registry, &AugmentationSpec::canonical(42))?;
    println!(
        "{} parties -> {} images in {:.2?}",
        registry.len(),
        dataset.len(),
        start.elapsed()
    );
    println!("content digest {}", dataset.digest());

    dataset.write(&out)?;
    let (train, test) = split_dataset(&dataset, 0.8, 42)?;
    write_manifest(&out.join(TRAIN_MANIFEST), &train.manifest())?;
    write_manifest(&out.join(TEST_MANIFEST), &test.manifest())?;
    println!(
        "train {} / test {} written under {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}
