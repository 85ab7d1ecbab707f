//! Inference latency harness.
//!
//! Two measurements: single-image latency (each image predicted on its own,
//! one after another, as an interactive lookup would) and whole-batch time
//! for a full EVM load, which decodes every slip from its encoded bytes and
//! tallies it exactly as [`crate::tally::count_slips`] does.

use std::time::{Duration, Instant};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::classifier::Predictor;
use crate::error::Result;
use crate::raster;
use crate::tally::{self, SlipRecord, DEFAULT_CONFIDENCE_THRESHOLD, MAX_SLIPS_PER_EVM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub images: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Summarise per-image durations (nearest-rank percentiles).
    pub fn from_samples(samples: &[Duration]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            if ms.is_empty() {
                0.0
            } else {
                let k = ((p * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
                ms[k - 1]
            }
        };
        LatencyStats {
            images: ms.len(),
            mean_ms: if ms.is_empty() { 0.0 } else { ms.iter().sum::<f64>() / ms.len() as f64 },
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
            max_ms: ms.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTiming {
    pub slips: usize,
    pub seconds: f64,
    pub slips_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub single_image: LatencyStats,
    pub batch: BatchTiming,
    pub threads: usize,
}

/// Time `model.predict` on each image, sequentially, after `warmup` untimed
/// calls.
pub fn measure_latency<P: Predictor + ?Sized>(
    model: &P,
    images: &[GrayImage],
    warmup: usize,
) -> Result<LatencyStats> {
    for image in images.iter().cycle().take(warmup.min(images.len() * 4)) {
        model.predict(image)?;
    }
    let mut samples = Vec::with_capacity(images.len());
    for image in images {
        let start = Instant::now();
        let prediction = model.predict(image)?;
        samples.push(start.elapsed());
        std::hint::black_box(prediction);
    }
    Ok(LatencyStats::from_samples(&samples))
}

/// Time decoding and tallying one synthetic EVM batch of `slips` images
/// drawn cyclically from `images`.
pub fn time_batch<P: Predictor + ?Sized>(
    model: &P,
    images: &[GrayImage],
    slips: usize,
) -> Result<BatchTiming> {
    let encoded: Vec<Vec<u8>> = images.iter().map(raster::encode_png).collect();
    let records: Vec<SlipRecord> = (0..slips)
        .map(|i| SlipRecord {
            slip_id: format!("S{:04}", i + 1),
            evm_id: "BENCH".into(),
            image_path: format!("{i}.png"),
            timestamp: None,
            sequence_no: i as u64 + 1,
        })
        .collect();
    let start = Instant::now();
    let decoded = records
        .into_iter()
        .zip(encoded.iter().cycle())
        .map(|(record, bytes)| {
            let image = raster::decode_gray(bytes)
                .map_err(|e| crate::registry::RegistryError::InvalidImage(e))?;
            Ok((record, image))
        })
        .collect::<Result<Vec<_>>>()?;
    let sheet = tally::count_slip_images(model, &decoded, DEFAULT_CONFIDENCE_THRESHOLD)?;
    let seconds = start.elapsed().as_secs_f64();
    std::hint::black_box(sheet);
    Ok(BatchTiming {
        slips,
        seconds,
        slips_per_second: if seconds > 0.0 { slips as f64 / seconds } else { f64::INFINITY },
    })
}

/// Both measurements with the default full-EVM batch size.
pub fn run<P: Predictor + ?Sized>(model: &P, images: &[GrayImage]) -> Result<BenchReport> {
    Ok(BenchReport {
        single_image: measure_latency(model, images, 16)?,
        batch: time_batch(model, images, MAX_SLIPS_PER_EVM)?,
        threads: rayon::current_num_threads(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let samples: Vec<Duration> = (1..=20).map(Duration::from_millis).collect();
        let s = LatencyStats::from_samples(&samples);
        assert_eq!(s.images, 20);
        assert!((s.mean_ms - 10.5).abs() < 1e-9);
        assert!((s.p50_ms - 10.0).abs() < 1e-9);
        assert!((s.p95_ms - 19.0).abs() < 1e-9);
        assert!((s.max_ms - 20.0).abs() < 1e-9);
    }

    #[test]
    fn empty_samples() {
        let s = LatencyStats::from_samples(&[]);
        assert_eq!(s.images, 0);
        assert_eq!(s.max_ms, 0.0);
    }
}
