//! Render the 49 synthetic party symbols into a registry directory.
//!
//! ```text
//! cargo run --example make_fixtures -- fixtures/49
//! ```

use std::path::PathBuf;

use anyhow::Context;
use vvpat::fixtures::{synthetic_registry, SYMBOL_COUNT};

fn main() -> anyhow::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures/49"));
    let registry = synthetic_registry(SYMBOL_COUNT);
    registry
        .save(&out)
        .with_context(|| format!("writing registry to {}", out.display()))?;
    println!("wrote {} symbols to {}", registry.len(), out.display());
    for record in registry.records().iter().take(5) {
        println!("  {}  {}", record.party_id, record.party_name);
    }
    println!("  ...");
    Ok(())
}
