//! Detect bursts of slips faster than the polling-booth rate limit, after
//! setting aside the mock-poll slips printed before the poll opened.
//!
//! ```text
//! cargo run --example rate_anomalies
//! ```

use chrono::{Duration, TimeZone, Utc};
use vvpat::tally::{
    batch_timestamps, detect_rate_anomalies, separate_mock_polls, SlipRecord, DEFAULT_RATE_LIMIT,
    DEFAULT_RATE_WINDOW_SECS,
};

fn main() -> anyhow::Result<()> {
    let poll_open = Utc.with_ymd_and_hms(2024, 4, 19, 7, 0, 0).unwrap();
    // 50 mock-poll slips an hour before opening, then one voter every
    // 20 s, except for 12 slips in 30 s shortly after 09:00.
    let mut offsets: Vec<i64> = (0..50).map(|i| -3600 + i * 10).collect();
    offsets.extend((0..400).map(|i| i * 20));
    offsets.extend((0..12).map(|i| 7_210 + i * 2 + 1));
    offsets.sort_unstable();

    let slips: Vec<SlipRecord> = offsets
        .iter()
        .enumerate()
        .map(|(i, &s)| SlipRecord {
            slip_id: format!("S{:04}", i + 1),
            evm_id: "EVM-017".into(),
            image_path: format!("S{:04}.png", i + 1),
            timestamp: Some(poll_open + Duration::seconds(s)),
            sequence_no: i as u64 + 1,
        })
        .collect();

    let (mock, valid) = separate_mock_polls(&slips, poll_open)?;
    println!("{} mock-poll slips set aside, {} valid", mock.len(), valid.len());

    let windows = detect_rate_anomalies(
        &batch_timestamps(&valid),
        DEFAULT_RATE_LIMIT,
        Duration::seconds(DEFAULT_RATE_WINDOW_SECS),
    )?;
    for w in &windows {
        println!(
            "{} slips between {} and {} (limit {DEFAULT_RATE_LIMIT} per {DEFAULT_RATE_WINDOW_SECS} s)",
            w.slip_count,
            w.window_start.format("%H:%M:%S"),
            w.window_end.format("%H:%M:%S")
        );
    }
    Ok(())
}
