//! Synthetic party symbols.
//!
//! Real symbol artwork is not redistributable, so the repository ships 49
//! procedurally drawn stand-ins, each a seeded composition of two or three
//! simple glyphs (disc, square, star and so on).
//! Symbols are anti-aliased black on white at 180×180 and fully
//! deterministic. `fixtures/49` at the workspace root holds the rendered set.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{DateTime, Duration, Utc};
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply, AugmentationSpec};
use crate::classifier::{preprocess, FeatureVector};
use crate::error::{Error, Result};
use crate::raster::{self, SYMBOL_SIZE};
use crate::registry::{PartyId, Registry};
use crate::tally::{self, SlipRecord};

/// Number of synthetic symbols.
pub const SYMBOL_COUNT: usize = 49;

const SUPERSAMPLE: u32 = 3;
const FIXTURE_SEED: u64 = 49;
const MAX_COSINE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Disc,
    Square,
    Triangle,
    Star,
    Plus,
    Ring,
    Bars,
}

const GLYPHS: [Glyph; 7] = [
    Glyph::Disc,
    Glyph::Square,
    Glyph::Triangle,
    Glyph::Star,
    Glyph::Plus,
    Glyph::Ring,
    Glyph::Bars,
];

impl Glyph {
    fn name(self) -> &'static str {
        match self {
            Glyph::Disc => "Disc",
            Glyph::Square => "Square",
            Glyph::Triangle => "Triangle",
            Glyph::Star => "Star",
            Glyph::Plus => "Plus",
            Glyph::Ring => "Ring",
            Glyph::Bars => "Bars",
        }
    }

    /// Whether `(u, v)` lies inside the glyph centered at `(cx, cy)` with
    /// radius `r`. Coordinates span [-1, 1] with v pointing down.
    fn contains(self, u: f64, v: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (u - cx, v - cy);
        match self {
            Glyph::Disc => dx * dx + dy * dy <= r * r,
            Glyph::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Glyph::Triangle => in_polygon(
                dx,
                dy,
                &[(0.0, -r), (-0.95 * r, 0.8 * r), (0.95 * r, 0.8 * r)],
            ),
            Glyph::Star => {
                let pts: Vec<(f64, f64)> = (0..10)
                    .map(|k| {
                        let radius = if k % 2 == 0 { r } else { 0.42 * r };
                        let a = -std::f64::consts::FRAC_PI_2
                            + k as f64 * std::f64::consts::PI / 5.0;
                        (radius * a.cos(), radius * a.sin())
                    })
                    .collect();
                in_polygon(dx, dy, &pts)
            }
            Glyph::Plus => {
                (dx.abs() <= 0.28 * r && dy.abs() <= r) || (dy.abs() <= 0.28 * r && dx.abs() <= r)
            }
            Glyph::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.58 * r).powi(2)
            }
            Glyph::Bars => {
                dx.abs() <= r
                    && ((dy - 0.45 * r).abs() <= 0.22 * r || (dy + 0.45 * r).abs() <= 0.22 * r)
            }
        }
    }
}

fn in_polygon(x: f64, y: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// One glyph placed on the symbol canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub glyph: Glyph,
    pub center: (f64, f64),
    pub radius: f64,
}

/// Render a composition of glyphs, anti-aliased by supersampling.
pub fn render(placements: &[Placement]) -> GrayImage {
    let n = SYMBOL_SIZE as f64;
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    GrayImage::from_fn(SYMBOL_SIZE, SYMBOL_SIZE, |x, y| {
        let mut hits = 0u32;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let u = (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / n * 2.0 - 1.0;
                let v = (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / n * 2.0 - 1.0;
                if placements
                    .iter()
                    .any(|p| p.glyph.contains(u, v, p.center.0, p.center.1, p.radius))
                {
                    hits += 1;
                }
            }
        }
        Luma([(255.0 * (1.0 - hits as f64 / samples)).round() as u8])
    })
}

fn random_composition(rng: &mut ChaCha8Rng) -> Vec<Placement> {
    let count = rng.random_range(2..=3);
    (0..count)
        .map(|_| Placement {
            glyph: GLYPHS[rng.random_range(0..GLYPHS.len())],
            center: (rng.random_range(-0.55..0.55), rng.random_range(-0.55..0.55)),
            radius: rng.random_range(0.28..0.45),
        })
        .collect()
}

fn composition_name(placements: &[Placement]) -> String {
    let glyphs: Vec<&str> = placements.iter().map(|p| p.glyph.name()).collect();
    glyphs.join(" ")
}

/// The 49 synthetic `(party_name, symbol)` pairs in registration order.
///
/// Candidates are drawn from a fixed seed and accepted greedily while their
/// feature cosine to every accepted symbol stays below `MAX_COSINE`, so the
/// set is spread out enough for nearest-centroid labelling.
pub fn synthetic_symbols() -> Vec<(String, GrayImage)> {
    static SYMBOLS: OnceLock<Vec<(String, GrayImage)>> = OnceLock::new();
    SYMBOLS.get_or_init(select_symbols).clone()
}

fn select_symbols() -> Vec<(String, GrayImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(FIXTURE_SEED);
    let mut accepted: Vec<(String, GrayImage, FeatureVector)> = Vec::new();
    while accepted.len() < SYMBOL_COUNT {
        let placements = random_composition(&mut rng);
        let image = render(&placements);
        let feature = preprocess(&image).expect("rendered symbols are non-empty");
        if feature.is_zero() || accepted.iter().any(|(_, _, f)| f.dot(&feature) >= MAX_COSINE) {
            continue;
        }
        let name = format!("{:02} {} Party", accepted.len() + 1, composition_name(&placements));
        accepted.push((name, image, feature));
    }
    accepted.into_iter().map(|(n, i, _)| (n, i)).collect()
}

/// Registry holding the first `n` synthetic symbols (`n` ≤ 49).
pub fn synthetic_registry(n: usize) -> Registry {
    let mut registry = Registry::new();
    for (name, image) in synthetic_symbols().into_iter().take(n) {
        registry
            .register_symbol(&name, &image)
            .expect("synthetic names are unique");
    }
    registry
}

/// A slip as a scanner might capture it: the party's symbol under one of
/// the canonical distortions, chosen by `variant` (0 = undistorted).
pub fn slip_image(symbol: &GrayImage, variant: usize, noise_seed: u64) -> GrayImage {
    let spec = AugmentationSpec::canonical(noise_seed);
    match variant % (spec.transforms.len() + 1) {
        0 => symbol.clone(),
        k => apply(symbol, &spec.transforms[k - 1], noise_seed),
    }
}

/// Two symbols printed over each other with the mix chosen so the result
/// resembles both equally, like a double-struck slip: no classifier
/// should be sure about it.
pub fn double_strike(a: &GrayImage, b: &GrayImage) -> GrayImage {
    let mix = |w: f64| {
        GrayImage::from_fn(a.width(), a.height(), |x, y| {
            let v = w * a.get_pixel(x, y)[0] as f64 + (1.0 - w) * b.get_pixel(x, y)[0] as f64;
            Luma([v.round() as u8])
        })
    };
    let fa = preprocess(a).expect("non-empty symbol");
    let fb = preprocess(b).expect("non-empty symbol");
    // bias toward `a` grows with w; bisect for equal resemblance
    let bias = |w: f64| {
        let f = preprocess(&mix(w)).expect("non-empty symbol");
        f.dot(&fa) - f.dot(&fb)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..24 {
        let mid = (lo + hi) / 2.0;
        if bias(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mix((lo + hi) / 2.0)
}

/// Write slip images and their manifest into `dir`. Slips are numbered in
/// the given order and stamped `interval` apart from `start`.
pub fn write_slip_batch(
    dir: &Path,
    evm_id: &str,
    images: &[GrayImage],
    start: DateTime<Utc>,
    interval: Duration,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut slips = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let slip_id = format!("{evm_id}-S{:04}", i + 1);
        let image_path = format!("{slip_id}.png");
        raster::save_png(image, &dir.join(&image_path))?;
        slips.push(SlipRecord {
            slip_id,
            evm_id: evm_id.to_string(),
            image_path,
            timestamp: Some(start + interval * i as i32),
            sequence_no: i as u64 + 1,
        });
    }
    let manifest = dir.join(format!("{evm_id}.jsonl"));
    tally::write_slip_manifest(&manifest, &slips)?;
    Ok(manifest)
}

/// Ballots for a small simulated poll: `votes[p]` slips for the p-th
/// registered party, each with a distortion, plus `ambiguous`
/// double-struck slips. Returns the images (in casting order) and the true party of each
/// (`None` for double strikes).
pub fn simulated_poll(
    registry: &Registry,
    votes: &[usize],
    ambiguous: usize,
    seed: u64,
) -> (Vec<GrayImage>, Vec<Option<PartyId>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = registry.records();
    assert!(
        ambiguous == 0 || records.len() >= 2,
        "double strikes need two parties"
    );
    let mut ballots: Vec<Option<PartyId>> = votes
        .iter()
        .zip(records)
        .flat_map(|(&n, r)| std::iter::repeat_n(Some(r.party_id), n))
        .chain(std::iter::repeat_n(None, ambiguous))
        .collect();
    // casting order
    for i in (1..ballots.len()).rev() {
        ballots.swap(i, rng.random_range(0..=i));
    }
    let images = ballots
        .iter()
        .map(|ballot| match ballot {
            Some(party) => {
                let symbol = &registry.get(*party).expect("registered").image;
                slip_image(symbol, rng.random_range(0..19), rng.random())
            }
            None => {
                let a = rng.random_range(0..records.len());
                let b = (a + 1 + rng.random_range(0..records.len() - 1)) % records.len();
                double_strike(&records[a].image, &records[b].image)
            }
        })
        .collect();
    (images, ballots)
}
