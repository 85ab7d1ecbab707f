//! List pairs of registered symbols that look alike. Election officials
//! would review these before the ballot is finalised.
//!
//! ```text
//! cargo run --release --example similar_symbols -- fixtures/49 0.65
//! ```

use std::path::PathBuf;

use vvpat::registry::Registry;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixtures/49".into()));
    let threshold: f64 = args.next().map(|t| t.parse()).transpose()?.unwrap_or(0.65);

    let registry = Registry::load(&dir)?;
    let pairs = registry.find_similar_symbols(threshold)?;
    println!(
        "{} of {} pairs at or above similarity {threshold}",
        pairs.len(),
        registry.len() * (registry.len() - 1) / 2
    );
    for pair in pairs.iter().take(15) {
        println!(
            "{:.3}  {} {:<32} {} {}",
            pair.similarity,
            pair.first,
            registry.party_name(pair.first).unwrap_or(""),
            pair.second,
            registry.party_name(pair.second).unwrap_or("")
        );
    }
    Ok(())
}
