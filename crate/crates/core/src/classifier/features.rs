use std::sync::OnceLock;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::ClassifierError;
use crate::raster::{self, SYMBOL_SIZE};

/// Side of the downsampled grid.
pub const GRID: usize = 32;
pub const FEATURE_DIM: usize = GRID * GRID;

/// Zero-mean, unit-norm 32×32 intensity feature, or the exact zero vector
/// for a uniform image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn zero() -> Self {
        FeatureVector(vec![0.0; FEATURE_DIM])
    }

    /// Wrap raw values, normalizing to unit length. Values whose norm is
    /// numerically zero become the zero vector.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, ClassifierError> {
        if values.len() != FEATURE_DIM {
            return Err(ClassifierError::DimensionMismatch {
                expected: FEATURE_DIM,
                found: values.len(),
            });
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Ok(Self::zero());
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(FeatureVector(values))
    }

    /// Wrap values already known to be unit-norm (e.g. read back from a
    /// model file) without renormalizing, so the round trip is exact.
    pub(crate) fn from_unit_values(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Area weights mapping 180 source pixels onto 32 output cells.
struct BoxWeights {
    rows: Vec<(usize, Vec<f64>)>,
}

fn box_weights() -> &'static BoxWeights {
    static WEIGHTS: OnceLock<BoxWeights> = OnceLock::new();
    WEIGHTS.get_or_init(|| {
        let src = SYMBOL_SIZE as usize;
        let cell = src as f64 / GRID as f64;
        let rows = (0..GRID)
            .map(|o| {
                let lo = o as f64 * cell;
                let hi = lo + cell;
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(src);
                let weights = (first..last)
                    .map(|i| {
                        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        overlap / cell
                    })
                    .collect();
                (first, weights)
            })
            .collect();
        BoxWeights { rows }
    })
}

/// Letterbox to 180×180, box-filter down to 32×32, subtract the mean and
/// L2-normalize.
pub fn preprocess(image: &GrayImage) -> Result<FeatureVector, ClassifierError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(ClassifierError::InvalidImage("empty raster".into()));
    }
    if raster::is_uniform(image) {
        return Ok(FeatureVector::zero());
    }
    let boxed;
    let image = if image.dimensions() == (SYMBOL_SIZE, SYMBOL_SIZE) {
        image
    } else {
        boxed = raster::letterbox(image);
        &boxed
    };
    let src = SYMBOL_SIZE as usize;
    let raw = image.as_raw();
    let weights = box_weights();

    // horizontal pass: src rows × GRID columns
    let mut horizontal = vec![0.0; src * GRID];
    for y in 0..src {
        let row = &raw[y * src..(y + 1) * src];
        for (ox, (first, w)) in weights.rows.iter().enumerate() {
            horizontal[y * GRID + ox] = w
                .iter()
                .zip(&row[*first..])
                .map(|(w, &p)| w * p as f64)
                .sum();
        }
    }
    let mut values = vec![0.0; FEATURE_DIM];
    for (oy, (first, w)) in weights.rows.iter().enumerate() {
        for ox in 0..GRID {
            values[oy * GRID + ox] = w
                .iter()
                .enumerate()
                .map(|(k, w)| w * horizontal[(first + k) * GRID + ox])
                .sum();
        }
    }
    let mean = values.iter().sum::<f64>() / FEATURE_DIM as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    FeatureVector::normalized(values)
}

#[cfg(test)]
mod tests {
    use image::Luma;

    use super::*;

    #[test]
    fn box_weights_partition_unity() {
        for (_, w) in &box_weights().rows {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // each source pixel contributes exactly one full pixel in total
        let mut coverage = vec![0.0; 180];
        for (first, w) in &box_weights().rows {
            for (k, w) in w.iter().enumerate() {
                coverage[first + k] += w * 180.0 / 32.0;
            }
        }
        assert!(coverage.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_images_map_to_zero() {
        for level in [0u8, 77, 255] {
            let f = preprocess(&GrayImage::from_pixel(180, 180, Luma([level]))).unwrap();
            assert!(f.is_zero());
            assert_eq!(f.values().len(), FEATURE_DIM);
        }
        assert!(preprocess(&GrayImage::from_pixel(3, 9, Luma([4]))).unwrap().is_zero());
    }

    #[test]
    fn non_uniform_images_have_unit_norm() {
        let img = GrayImage::from_fn(180, 180, |x, y| Luma([((x * y) % 256) as u8]));
        let f = preprocess(&img).unwrap();
        assert!((f.norm() - 1.0).abs() < 1e-6);
        assert!(f.values().iter().sum::<f64>().abs() < 1e-9);
        assert_eq!(preprocess(&img).unwrap(), f);
    }

    #[test]
    fn empty_raster_is_invalid() {
        assert!(matches!(
            preprocess(&GrayImage::new(0, 5)),
            Err(ClassifierError::InvalidImage(_))
        ));
    }

    #[test]
    fn single_dark_cell_matches_hand_computed_downsample() {
        // a dark pixel at (0, 0) only touches output cell (0, 0)
        let mut img = GrayImage::from_pixel(180, 180, Luma([255]));
        img.put_pixel(0, 0, Luma([0]));
        let f = preprocess(&img).unwrap();
        let argmin = f
            .values()
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmin, 0);
        let others: Vec<f64> = f.values()[1..].to_vec();
        assert!(others.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }
}
