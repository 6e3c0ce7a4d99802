//! Training-time image augmentation.
//!
//! Four basic augmentations with intensity levels are combined into named
//! combos such as `B2C1G3M1`. Each part of a combo fires independently with
//! a fixed probability, in the order B, C, G, M, so the network still sees
//! unmodified lines.

mod color;
mod geometry;
mod masking;
mod noise_blur_gamma;

pub use color::ColorParams;
pub use geometry::{GeometryParams, SmoothField};
pub use masking::MaskingParams;
pub use noise_blur_gamma::NoiseBlurGammaParams;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Image;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AugmentError {
    #[error("unknown augmentation combo {0:?}")]
    UnknownCombo(String),

    #[error("malformed combo name {name:?}: {reason}")]
    Parse { name: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    NoiseBlurGamma,
    Color,
    Geometry,
    Masking,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::NoiseBlurGamma, Kind::Color, Kind::Geometry, Kind::Masking];

    pub fn letter(self) -> char {
        match self {
            Kind::NoiseBlurGamma => 'B',
            Kind::Color => 'C',
            Kind::Geometry => 'G',
            Kind::Masking => 'M',
        }
    }

    pub fn from_letter(c: char) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.letter() == c)
    }

    /// Chance that the part fires when it belongs to a combo.
    pub fn probability(self) -> f64 {
        match self {
            Kind::NoiseBlurGamma => 0.2,
            Kind::Color => 0.333,
            Kind::Geometry => 0.66,
            Kind::Masking => 0.5,
        }
    }

    pub fn max_level(self) -> u8 {
        match self {
            Kind::Geometry => 3,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BasicAugmentation {
    pub kind: Kind,
    pub level: u8,
}

impl BasicAugmentation {
    pub fn new(kind: Kind, level: u8) -> Option<Self> {
        (1..=kind.max_level()).contains(&level).then_some(BasicAugmentation { kind, level })
    }

    pub fn probability(&self) -> f64 {
        self.kind.probability()
    }
}

/// Combo names in registry order.
pub const REGISTERED_COMBOS: [&str; 14] = [
    "NONE", "B1", "B1C1", "B1G1", "B1C1G1", "B1C1G1M1", "B2C1G1M1", "B2C2G1M1", "B2C1G2M1", "B2C1G3M1", "B2C2G2M1",
    "B2C2G3M1", "B2C2G2M2", "B2C2G3M2",
];

/// An ordered set of basic augmentations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Combo {
    parts: Vec<BasicAugmentation>,
}

impl Combo {
    pub fn none() -> Self {
        Combo { parts: Vec::new() }
    }

    /// Parses any well-formed name: `NONE`, or letter-level pairs in
    /// B, C, G, M order with each kind at most once.
    pub fn parse(name: &str) -> Result<Self, AugmentError> {
        if name == "NONE" {
            return Ok(Combo::none());
        }
        let fail = |reason: &str| AugmentError::Parse { name: name.into(), reason: reason.into() };
        let chars: Vec<char> = name.chars().collect();
        if chars.is_empty() || chars.len() % 2 != 0 {
            return Err(fail("expected letter-level pairs"));
        }
        let mut parts: Vec<BasicAugmentation> = Vec::new();
        for pair in chars.chunks(2) {
            let kind = Kind::from_letter(pair[0]).ok_or_else(|| fail("unknown kind letter"))?;
            let level = pair[1].to_digit(10).ok_or_else(|| fail("level must be a digit"))? as u8;
            let part = BasicAugmentation::new(kind, level).ok_or_else(|| fail("level out of range"))?;
            if parts.last().is_some_and(|p| p.kind >= kind) {
                return Err(fail("kinds must appear once each, in B, C, G, M order"));
            }
            parts.push(part);
        }
        Ok(Combo { parts })
    }

    /// Like [`Combo::parse`] but only accepts registered names.
    pub fn registered(name: &str) -> Result<Self, AugmentError> {
        if !REGISTERED_COMBOS.contains(&name) {
            return Err(AugmentError::UnknownCombo(name.into()));
        }
        Combo::parse(name)
    }

    pub fn all_registered() -> Vec<Combo> {
        REGISTERED_COMBOS.iter().map(|n| Combo::parse(n).expect("registry names parse")).collect()
    }

    pub fn parts(&self) -> &[BasicAugmentation] {
        &self.parts
    }

    pub fn is_none(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn level(&self, kind: Kind) -> Option<u8> {
        self.parts.iter().find(|p| p.kind == kind).map(|p| p.level)
    }

    /// Probability that no part fires.
    pub fn untouched_probability(&self) -> f64 {
        self.parts.iter().map(|p| 1.0 - p.probability()).product()
    }

    /// Position in the registry, for ordering reports.
    pub fn registry_index(&self) -> Option<usize> {
        let name = self.to_string();
        REGISTERED_COMBOS.iter().position(|&n| n == name)
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.parts.is_empty() {
            return f.write_str("NONE");
        }
        for p in &self.parts {
            write!(f, "{}{}", p.kind.letter(), p.level)?;
        }
        Ok(())
    }
}

impl FromStr for Combo {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Combo::registered(s)
    }
}

impl Serialize for Combo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Combo {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Combo::registered(&s).map_err(serde::de::Error::custom)
    }
}

/// Intensity ranges per level (index 0 is level 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    /// Longest motion-blur kernel in pixels.
    pub blur_max_len: [usize; 2],
    pub noise_sigma_max: [f64; 2],
    pub gamma: [(f64, f64); 2],
    /// Relative brightness, contrast and saturation jitter.
    pub color_jitter: [f64; 2],
    /// Hue shift as a fraction of the full hue circle.
    pub hue_jitter: [f64; 2],
    pub slant: [f64; 3],
    pub scale: [(f64, f64); 3],
    /// Patch width bound in multiples of the line height.
    pub mask_width: [f64; 2],
    pub mask_count_multiplier: [usize; 2],
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            blur_max_len: [3, 7],
            noise_sigma_max: [8.0 / 255.0, 16.0 / 255.0],
            gamma: [(0.66, 1.5), (0.4, 2.5)],
            color_jitter: [0.15, 0.30],
            hue_jitter: [0.05, 0.10],
            slant: [0.15, 0.30, 0.45],
            scale: [(0.9, 1.1), (0.8, 1.25), (0.7, 1.4)],
            mask_width: [2.0, 3.0],
            mask_count_multiplier: [1, 2],
        }
    }
}

/// Deterministic per-sample random stream.
pub fn stream(root_seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(sample_index);
    rng
}

/// Draws the parameters of one basic augmentation and applies it.
pub fn apply_basic(part: BasicAugmentation, image: &Image, ranges: &AugmentRanges, rng: &mut ChaCha8Rng) -> Image {
    let level = part.level;
    match part.kind {
        Kind::NoiseBlurGamma => NoiseBlurGammaParams::draw(level, ranges, rng).apply(image, rng),
        Kind::Color => ColorParams::draw(level, ranges, rng).apply(image),
        Kind::Geometry => GeometryParams::draw(level, image.height(), ranges, rng).apply(image),
        Kind::Masking => MaskingParams::draw(level, image.height(), image.width(), ranges, rng).apply(image, rng),
    }
}

/// Applies `combo` and reports which parts fired.
pub fn apply_combo_traced(combo: &Combo, image: &Image, ranges: &AugmentRanges, rng: &mut ChaCha8Rng) -> (Image, Vec<Kind>) {
    let mut out = image.clone();
    let mut fired = Vec::new();
    for &part in combo.parts() {
        if rng.gen::<f64>() < part.probability() {
            out = apply_basic(part, &out, ranges, rng);
            fired.push(part.kind);
        }
    }
    (out, fired)
}

pub fn apply_combo(combo: &Combo, image: &Image, ranges: &AugmentRanges, rng: &mut ChaCha8Rng) -> Image {
    apply_combo_traced(combo, image, ranges, rng).0
}

/// Augments sample `sample_index` from its own stream.
pub fn augment_sample(combo: &Combo, image: &Image, ranges: &AugmentRanges, root_seed: u64, sample_index: u64) -> Image {
    apply_combo(combo, image, ranges, &mut stream(root_seed, sample_index))
}

/// Uniform draw on `[lo, hi]` that returns `lo` exactly when the range is
/// degenerate.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Log-uniform draw, symmetric around 1 for reciprocal bounds.
pub(crate) fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    uniform(rng, lo.ln(), hi.ln()).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_table_order() {
        let all = Combo::all_registered();
        assert_eq!(all.len(), 14);
        for (c, n) in all.iter().zip(REGISTERED_COMBOS) {
            assert_eq!(c.to_string(), n);
        }
        assert!(all[0].is_none());
    }

    #[test]
    fn parse_levels() {
        let c = Combo::registered("B2C1G3M1").unwrap();
        let levels: Vec<u8> = c.parts().iter().map(|p| p.level).collect();
        assert_eq!(levels, vec![2, 1, 3, 1]);
        assert_eq!(c.level(Kind::Geometry), Some(3));
    }

    #[test]
    fn malformed_and_unregistered_names() {
        assert!(matches!(Combo::registered("B3"), Err(AugmentError::UnknownCombo(_))));
        assert!(matches!(Combo::parse("B3"), Err(AugmentError::Parse { .. })));
        assert!(matches!(Combo::parse("G4"), Err(AugmentError::Parse { .. })));
        assert!(Combo::parse("C1B1").is_err());
        assert!(Combo::parse("B1B1").is_err());
        assert!(Combo::parse("X1").is_err());
        assert!(Combo::parse("G3").is_ok());
        assert!("G3".parse::<Combo>().is_err());
    }

    #[test]
    fn untouched_probability_of_full_combo() {
        let p = Combo::registered("B1C1G1M1").unwrap().untouched_probability();
        // Independent oracle: product of complements.
        let expected = 0.8 * (1.0 - 0.333) * (1.0 - 0.66) * 0.5;
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.0907).abs() < 1e-3);
    }

    #[test]
    fn none_is_bitwise_identity() {
        let img = Image::new(1, 3, 4, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let out = apply_combo(&Combo::none(), &img, &AugmentRanges::default(), &mut stream(1, 0));
        assert_eq!(out, img);
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| stream(5, 1).gen()).collect();
        let b: u64 = stream(5, 1).gen();
        let c: u64 = stream(5, 2).gen();
        let d: u64 = stream(6, 1).gen();
        assert_eq!(a[0], b);
        assert_ne!(b, c);
        assert_ne!(b, d);
    }

    #[test]
    fn combo_serde_uses_names() {
        let c = Combo::registered("B1C1G1M1").unwrap();
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(j, "\"B1C1G1M1\"");
        assert_eq!(serde_json::from_str::<Combo>(&j).unwrap(), c);
        assert!(serde_json::from_str::<Combo>("\"B9\"").is_err());
    }
}
