//! How long does counting day take? Runs the built-in scenarios and a
//! three-center variant with uneven voter shares.
//!
//! ```text
//! cargo run --example counting_day
//! ```

use vvpat::sim::{simulate_counting, Center, SimConfig, PRESETS};

fn main() -> anyhow::Result<()> {
    for (name, description) in PRESETS {
        let report = simulate_counting(&SimConfig::preset(name)?)?;
        println!(
            "{name:<24} {:>6} EVMs  {:>7.1} min  ({:.2} h)  {description}",
            report.booths,
            report.makespan_minutes,
            report.makespan_hours()
        );
    }

    let mut config = SimConfig::preset("paper-state")?;
    config.centers = vec![
        Center { center_id: "north".into(), voter_share: 0.5 },
        Center { center_id: "south".into(), voter_share: 0.3 },
        Center { center_id: "east".into(), voter_share: 0.2 },
    ];
    println!("\nthree counting centers:\n{}", simulate_counting(&config)?.table());
    println!("scenario file for this run:\n{}", config.to_toml());
    Ok(())
}
