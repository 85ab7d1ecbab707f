//! Deterministic symbol augmentation.
//!
//! Every registered symbol is expanded into 19 images: the original followed
//! by 18 fixed distortions. Geometric transforms are inverse-mapped with
//! bilinear sampling about the image center and fill exposed regions with
//! white, the slip background. The stochastic transforms draw from a ChaCha
//! stream keyed by the [`AugmentationSpec`] noise seed and the transform index, so the
//! output is a pure function of `(image, spec)`.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetError;
use crate::raster::{SYMBOL_SIZE, WHITE};

/// Number of distortions applied to every symbol.
pub const VARIANT_COUNT: usize = 18;

/// Images produced per symbol: the original plus its variants.
pub const IMAGES_PER_SYMBOL: usize = VARIANT_COUNT + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Rotate { degrees: f64 },
    Translate { dx: f64, dy: f64 },
    Scale { factor: f64 },
    ShearX { factor: f64 },
    GaussianBlur { sigma: f64 },
    GaussianNoise { sigma: f64 },
    SaltAndPepper { rate: f64 },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformDescriptor {
    /// Variant index, 1-based; variant 0 is the untouched original.
    pub index: u8,
    #[serde(flatten)]
    pub kind: TransformKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub transforms: Vec<TransformDescriptor>,
    pub noise_seed: u64,
}

impl AugmentationSpec {
    /// The canonical list of 18 distortions.
    pub fn canonical(noise_seed: u64) -> Self {
        use TransformKind::*;
        let kinds = [
            Rotate { degrees: 5.0 },
            Rotate { degrees: -5.0 },
            Rotate { degrees: 10.0 },
            Rotate { degrees: -10.0 },
            Translate { dx: 10.0, dy: 0.0 },
            Translate { dx: -10.0, dy: 0.0 },
            Translate { dx: 0.0, dy: 10.0 },
            Translate { dx: 0.0, dy: -10.0 },
            Scale { factor: 0.9 },
            Scale { factor: 1.1 },
            ShearX { factor: 0.1 },
            GaussianBlur { sigma: 1.0 },
            GaussianNoise { sigma: 10.0 },
            SaltAndPepper { rate: 0.02 },
            Brightness { factor: 1.15 },
            Brightness { factor: 0.85 },
            Contrast { factor: 0.8 },
            Contrast { factor: 1.2 },
        ];
        AugmentationSpec {
            transforms: kinds
                .into_iter()
                .enumerate()
                .map(|(i, kind)| TransformDescriptor {
                    index: i as u8 + 1,
                    kind,
                })
                .collect(),
            noise_seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.transforms.len() != VARIANT_COUNT {
            return Err(DatasetError::InvalidSpec(format!(
                "expected {VARIANT_COUNT} transforms, found {}",
                self.transforms.len()
            )));
        }
        for (i, t) in self.transforms.iter().enumerate() {
            if t.index as usize != i + 1 {
                return Err(DatasetError::InvalidSpec(format!(
                    "transform at position {i} has index {}, expected {}",
                    t.index,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// The original image followed by its 18 variants, in index order.
pub fn generate_variations(
    image: &GrayImage,
    spec: &AugmentationSpec,
) -> Result<Vec<GrayImage>, DatasetError> {
    if image.dimensions() != (SYMBOL_SIZE, SYMBOL_SIZE) {
        let (w, h) = image.dimensions();
        return Err(DatasetError::InvalidImage(format!(
            "expected {SYMBOL_SIZE}x{SYMBOL_SIZE}, got {w}x{h}"
        )));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(IMAGES_PER_SYMBOL);
    out.push(image.clone());
    out.extend(
        spec.transforms
            .iter()
            .map(|t| apply(image, t, spec.noise_seed)),
    );
    Ok(out)
}

/// Apply a single transform.
pub fn apply(image: &GrayImage, t: &TransformDescriptor, noise_seed: u64) -> GrayImage {
    match t.kind {
        TransformKind::Rotate { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            // inverse of a rotation is its transpose
            warp(image, [c, s, -s, c], (0.0, 0.0))
        }
        TransformKind::Translate { dx, dy } => warp(image, [1.0, 0.0, 0.0, 1.0], (dx, dy)),
        TransformKind::Scale { factor } => {
            warp(image, [1.0 / factor, 0.0, 0.0, 1.0 / factor], (0.0, 0.0))
        }
        TransformKind::ShearX { factor } => warp(image, [1.0, -factor, 0.0, 1.0], (0.0, 0.0)),
        TransformKind::GaussianBlur { sigma } => gaussian_blur(image, sigma),
        TransformKind::GaussianNoise { sigma } => {
            let mut rng = stream(noise_seed, t.index);
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            map_pixels(image, |v| v + normal.sample(&mut rng))
        }
        TransformKind::SaltAndPepper { rate } => {
            let mut rng = stream(noise_seed, t.index);
            let mut out = image.clone();
            for p in out.pixels_mut() {
                if rng.random_bool(rate) {
                    p.0[0] = if rng.random_bool(0.5) { WHITE } else { 0 };
                }
            }
            out
        }
        TransformKind::Brightness { factor } => map_pixels(image, |v| v * factor),
        TransformKind::Contrast { factor } => {
            let raw = image.as_raw();
            let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / raw.len() as f64;
            map_pixels(image, |v| mean + factor * (v - mean))
        }
    }
}

fn stream(seed: u64, index: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(image: &GrayImage, mut f: impl FnMut(f64) -> f64) -> GrayImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        p.0[0] = to_u8(f(p.0[0] as f64));
    }
    out
}

/// Resample `image` where each output point `p` reads the source at
/// `inv · (p − c) + c − shift`, `c` being the image center.
fn warp(image: &GrayImage, inv: [f64; 4], shift: (f64, f64)) -> GrayImage {
    let (w, h) = image.dimensions();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    GrayImage::from_fn(w, h, |x, y| {
        let px = x as f64 + 0.5 - cx;
        let py = y as f64 + 0.5 - cy;
        let sx = inv[0] * px + inv[1] * py + cx - shift.0;
        let sy = inv[2] * px + inv[3] * py + cy - shift.1;
        Luma([to_u8(sample_bilinear(image, sx - 0.5, sy - 0.5))])
    })
}

fn sample_bilinear(image: &GrayImage, fx: f64, fy: f64) -> f64 {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            WHITE as f64
        } else {
            image.get_pixel(x as u32, y as u32).0[0] as f64
        }
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
    let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Separable Gaussian blur, radius ⌈3σ⌉, edges replicated.
fn gaussian_blur(image: &GrayImage, sigma: f64) -> GrayImage {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (image.width() as i64, image.height() as i64);
    let src: Vec<f64> = image.as_raw().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| {
                    let sx = (x + k as i64 - radius).clamp(0, w - 1);
                    wgt * src[(y * w + sx) as usize]
                })
                .sum();
        }
    }
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let v: f64 = kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| {
                let sy = (y + k as i64 - radius).clamp(0, h - 1);
                wgt * tmp[(sy * w + x) as usize]
            })
            .sum();
        Luma([to_u8(v)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symbol() -> GrayImage {
        GrayImage::from_fn(180, 180, |x, y| {
            Luma([if (60..120).contains(&x) && (40..140).contains(&y) { 0 } else { 255 }])
        })
    }

    #[test]
    fn canonical_spec_is_valid() {
        let spec = AugmentationSpec::canonical(1);
        spec.validate().unwrap();
        assert_eq!(spec.transforms.len(), 18);
    }

    #[test]
    fn produces_nineteen_full_size_images() {
        let out = generate_variations(&symbol(), &AugmentationSpec::canonical(42)).unwrap();
        assert_eq!(out.len(), 19);
        assert_eq!(out[0], symbol());
        assert!(out.iter().all(|i| i.dimensions() == (180, 180)));
        // with mid-gray tones every distortion changes the image (pure black
        // and white would saturate under the brightness shifts)
        let gray = GrayImage::from_fn(180, 180, |x, y| {
            Luma([if (60..120).contains(&x) && (40..140).contains(&y) { 60 } else { 200 }])
        });
        let out = generate_variations(&gray, &AugmentationSpec::canonical(42)).unwrap();
        for (i, variant) in out.iter().enumerate().skip(1) {
            assert_ne!(*variant, out[0], "variant {i}");
        }
    }

    #[test]
    fn repeated_calls_are_byte_identical() {
        let spec = AugmentationSpec::canonical(7);
        let a = generate_variations(&symbol(), &spec).unwrap();
        let b = generate_variations(&symbol(), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_seed_changes_only_stochastic_variants() {
        let a = generate_variations(&symbol(), &AugmentationSpec::canonical(1)).unwrap();
        let b = generate_variations(&symbol(), &AugmentationSpec::canonical(2)).unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert_eq!(x == y, !matches!(i, 13 | 14), "variant {i}");
        }
    }

    #[test]
    fn blur_keeps_constant_white() {
        let white = GrayImage::from_pixel(180, 180, Luma([255]));
        let blur = TransformDescriptor {
            index: 12,
            kind: TransformKind::GaussianBlur { sigma: 1.0 },
        };
        assert_eq!(apply(&white, &blur, 0), white);
    }

    #[test]
    fn geometric_transforms_fill_with_white() {
        let black = GrayImage::from_pixel(180, 180, Luma([0]));
        let shifted = apply(
            &black,
            &TransformDescriptor {
                index: 5,
                kind: TransformKind::Translate { dx: 10.0, dy: 0.0 },
            },
            0,
        );
        assert_eq!(shifted.get_pixel(5, 90).0[0], 255);
        assert_eq!(shifted.get_pixel(100, 90).0[0], 0);
        let rotated = apply(&black, &AugmentationSpec::canonical(0).transforms[2], 0);
        assert_eq!(rotated.get_pixel(0, 0).0[0], 255);
        assert_eq!(rotated.get_pixel(90, 90).0[0], 0);
    }

    #[test]
    fn translation_moves_content_by_whole_pixels() {
        let img = symbol();
        let t = TransformDescriptor {
            index: 7,
            kind: TransformKind::Translate { dx: 0.0, dy: 10.0 },
        };
        let moved = apply(&img, &t, 0);
        for y in 10..180 {
            for x in 0..180 {
                assert_eq!(moved.get_pixel(x, y), img.get_pixel(x, y - 10));
            }
        }
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let small = GrayImage::new(10, 10);
        assert!(matches!(
            generate_variations(&small, &AugmentationSpec::canonical(0)),
            Err(DatasetError::InvalidImage(_))
        ));
    }

    #[test]
    fn malformed_spec_is_rejected() {
        let mut spec = AugmentationSpec::canonical(0);
        spec.transforms.swap(0, 1);
        assert!(matches!(spec.validate(), Err(DatasetError::InvalidSpec(_))));
        spec.transforms.pop();
        assert!(matches!(spec.validate(), Err(DatasetError::InvalidSpec(_))));
    }
}
