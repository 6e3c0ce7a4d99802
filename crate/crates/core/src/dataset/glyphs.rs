//! Pseudo-handwriting: polyline glyph prototypes, per-writer deformations,
//! and an anti-aliased line renderer.
//!
//! Glyph coordinates are in x-height units: `y = 0` is the baseline,
//! `y = 1` the x-height line, ascenders reach 1.7 and descenders -0.6.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::raster::Image;

pub const LINE_HEIGHT: usize = 40;
const BASELINE: f64 = 28.0;
const MARGIN: f64 = 6.0;
/// Horizontal room each character gets at minimum, in pixels.
pub const MIN_ADVANCE_PX: f64 = 8.0;

/// Fixed seed of the canonical glyph set; shared by every dataset.
const CANONICAL_SEED: u64 = 0x6c79_7068_7321;
/// Control-point displacement (x-height units) per unit of divergence.
const DIVERGENCE_SIGMA: f64 = 0.2;
/// Per-line jitter of control points.
const INSTANCE_SIGMA: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub strokes: Vec<Vec<(f64, f64)>>,
    pub advance: f64,
}

impl Glyph {
    fn points(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.strokes.iter().flatten()
    }

    /// Evenly spaced samples along all strokes, for shape comparison.
    fn resampled(&self, n: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for s in &self.strokes {
            let lens: Vec<f64> = s.windows(2).map(|w| dist(w[0], w[1])).collect();
            let total: f64 = lens.iter().sum();
            for i in 0..n {
                let mut target = total * i as f64 / (n - 1) as f64;
                let mut seg = 0;
                while seg + 1 < lens.len() && target > lens[seg] {
                    target -= lens[seg];
                    seg += 1;
                }
                let f = if lens[seg] > 0.0 { (target / lens[seg]).min(1.0) } else { 0.0 };
                let (a, b) = (s[seg], s[seg + 1]);
                out.push((a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)));
            }
        }
        out
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn random_glyph(rng: &mut ChaCha8Rng) -> Glyph {
    let advance = rng.gen_range(0.7..1.1);
    let (lo, hi) = match rng.gen_range(0..10) {
        0..=2 => (0.0, 1.7),
        3..=4 => (-0.6, 1.0),
        _ => (0.0, 1.0),
    };
    let n_strokes = if rng.gen_bool(0.35) { 2 } else { 1 };
    let strokes = (0..n_strokes)
        .map(|_| {
            let n = rng.gen_range(3..=5);
            (0..n).map(|_| (rng.gen_range(0.1 * advance..0.9 * advance), rng.gen_range(lo..=hi))).collect()
        })
        .collect();
    Glyph { strokes, advance }
}

/// Shape distance between two glyphs; infinite when stroke counts differ
/// (those are trivially distinguishable).
fn glyph_distance(a: &Glyph, b: &Glyph) -> f64 {
    if a.strokes.len() != b.strokes.len() {
        return f64::INFINITY;
    }
    let (pa, pb) = (a.resampled(12), b.resampled(12));
    pa.iter().zip(&pb).map(|(&p, &q)| dist(p, q)).sum::<f64>() / pa.len() as f64
}

/// Canonical prototypes for `alphabet`, mutually dissimilar. Whitespace
/// characters get an empty glyph. Independent of the order of `alphabet`.
pub fn canonical_glyphs(alphabet: &[char]) -> BTreeMap<char, Glyph> {
    let mut rng = ChaCha8Rng::seed_from_u64(CANONICAL_SEED);
    let mut out: BTreeMap<char, Glyph> = BTreeMap::new();
    let mut chars = alphabet.to_vec();
    chars.sort_unstable();
    chars.dedup();
    for c in chars {
        if c.is_whitespace() {
            out.insert(c, Glyph { strokes: Vec::new(), advance: 0.6 });
            continue;
        }
        let mut best = random_glyph(&mut rng);
        let mut best_d = out.values().map(|g| glyph_distance(&best, g)).fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            if best_d >= 0.35 {
                break;
            }
            let cand = random_glyph(&mut rng);
            let d = out.values().map(|g| glyph_distance(&cand, g)).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best = cand;
                best_d = d;
            }
        }
        out.insert(c, best);
    }
    out
}

/// A writer's hand: deformed glyphs plus layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    pub writer_id: u64,
    pub divergence: f64,
    pub glyphs: BTreeMap<char, Glyph>,
    /// Horizontal shear per unit height.
    pub slant: f64,
    /// Half stroke width in pixels.
    pub stroke_half_width: f64,
    /// Gap between letters in x-height units.
    pub spacing: f64,
    pub x_height_px: f64,
    pub wobble_amplitude: f64,
    pub wobble_period: f64,
    pub wobble_phase: f64,
    pub ink: f64,
}

impl WriterStyle {
    /// Deterministic in `(seed, writer_id, divergence)`. Layout parameters
    /// do not depend on `divergence`; glyph control points move by
    /// `divergence` times a writer-specific Gaussian offset.
    pub fn new(seed: u64, writer_id: u64, divergence: f64, alphabet: &[char]) -> Result<Self, DatasetError> {
        if !(0.0..=1.0).contains(&divergence) {
            return Err(DatasetError::Divergence(divergence));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5752_4954_4552);
        rng.set_stream(writer_id);
        let mut glyphs = canonical_glyphs(alphabet);
        for g in glyphs.values_mut() {
            for p in g.strokes.iter_mut().flatten() {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                p.0 += divergence * DIVERGENCE_SIGMA * dx;
                p.1 += divergence * DIVERGENCE_SIGMA * dy;
            }
        }
        Ok(WriterStyle {
            writer_id,
            divergence,
            glyphs,
            slant: rng.gen_range(-0.3..0.3),
            stroke_half_width: rng.gen_range(0.8..1.6),
            spacing: rng.gen_range(0.1..0.35),
            x_height_px: rng.gen_range(10.0..13.0),
            wobble_amplitude: rng.gen_range(0.0..1.5),
            wobble_period: rng.gen_range(60.0..200.0),
            wobble_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            ink: rng.gen_range(0.75..1.0),
        })
    }

    /// Mean Euclidean distance of control points from the canonical glyphs.
    pub fn mean_displacement(&self) -> f64 {
        let alphabet: Vec<char> = self.glyphs.keys().copied().collect();
        let canon = canonical_glyphs(&alphabet);
        let (mut sum, mut n) = (0.0, 0usize);
        for (c, g) in &self.glyphs {
            for (p, q) in g.points().zip(canon[c].points()) {
                sum += dist(*p, *q);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Rasterizes `text` as one 40 px line. `rng` drives per-line jitter.
    pub fn render_line(&self, text: &str, rng: &mut ChaCha8Rng) -> Result<Image, DatasetError> {
        if text.is_empty() {
            return Err(DatasetError::EmptyText);
        }
        let mut unknown: Vec<char> = text.chars().filter(|c| !self.glyphs.contains_key(c)).collect();
        unknown.dedup();
        if !unknown.is_empty() {
            unknown.sort_unstable();
            unknown.dedup();
            return Err(DatasetError::UnknownChars(unknown));
        }
        let xh = self.x_height_px;
        let mut segments: Vec<((f64, f64), (f64, f64))> = Vec::new();
        let mut cursor = MARGIN;
        for c in text.chars() {
            let g = &self.glyphs[&c];
            for stroke in &g.strokes {
                let pts: Vec<(f64, f64)> = stroke
                    .iter()
                    .map(|&(x, y)| {
                        let jx: f64 = rng.sample(StandardNormal);
                        let jy: f64 = rng.sample(StandardNormal);
                        let (x, y) = (x + INSTANCE_SIGMA * jx, y + INSTANCE_SIGMA * jy);
                        let px = cursor + (x + self.slant * y) * xh;
                        let wobble = self.wobble_amplitude
                            * (std::f64::consts::TAU * px / self.wobble_period + self.wobble_phase).sin();
                        (px, BASELINE - y * xh + wobble)
                    })
                    .collect();
                segments.extend(pts.windows(2).map(|w| (w[0], w[1])));
            }
            let jitter = rng.gen_range(0.95..1.05);
            cursor += ((g.advance + self.spacing) * xh * jitter).max(MIN_ADVANCE_PX);
        }
        let width = (cursor + MARGIN).ceil() as usize;
        let mut img = Image::filled(1, LINE_HEIGHT, width, 1.0);
        for (a, b) in segments {
            draw_segment(&mut img, a, b, self.stroke_half_width, self.ink);
        }
        Ok(img)
    }
}

/// Darkens pixels by their coverage of a round-capped thick segment.
fn draw_segment(img: &mut Image, a: (f64, f64), b: (f64, f64), half_width: f64, ink: f64) {
    let r = half_width + 1.0;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let x1 = (a.0.max(b.0) + r).ceil().min(w - 1.0).max(0.0) as usize;
    let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let y1 = (a.1.max(b.1) + r).ceil().min(h - 1.0).max(0.0) as usize;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = dist((px, py), (a.0 + t * dx, a.1 + t * dy));
            let coverage = (half_width + 0.5 - d).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let v = (1.0 - coverage * ink) as f32;
                if v < img.get(0, y, x) {
                    img.set(0, y, x, v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::Alphabet;

    fn latin() -> Vec<char> {
        Alphabet::latin().symbols().to_vec()
    }

    #[test]
    fn zero_divergence_is_canonical() {
        let s = WriterStyle::new(3, 17, 0.0, &latin()).unwrap();
        assert_eq!(s.mean_displacement(), 0.0);
        assert_eq!(s.glyphs, canonical_glyphs(&latin()));
    }

    #[test]
    fn style_is_deterministic() {
        let a = WriterStyle::new(3, 4, 0.5, &latin()).unwrap();
        let b = WriterStyle::new(3, 4, 0.5, &latin()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, WriterStyle::new(3, 5, 0.5, &latin()).unwrap());
    }

    #[test]
    fn layout_independent_of_divergence() {
        let a = WriterStyle::new(1, 2, 0.1, &latin()).unwrap();
        let b = WriterStyle::new(1, 2, 0.9, &latin()).unwrap();
        assert_eq!((a.slant, a.spacing, a.x_height_px), (b.slant, b.spacing, b.x_height_px));
    }

    #[test]
    fn divergence_out_of_range() {
        assert!(matches!(WriterStyle::new(0, 0, 1.5, &latin()), Err(DatasetError::Divergence(_))));
        assert!(WriterStyle::new(0, 0, -0.1, &latin()).is_err());
    }

    #[test]
    fn canonical_glyphs_are_distinct() {
        let g = canonical_glyphs(&latin());
        let keys: Vec<&char> = g.keys().filter(|c| !c.is_whitespace()).collect();
        for (i, a) in keys.iter().enumerate() {
            for b in &keys[i + 1..] {
                assert!(glyph_distance(&g[a], &g[b]) > 0.15, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn render_contracts() {
        let s = WriterStyle::new(9, 1, 0.3, &latin()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = s.render_line("a", &mut rng).unwrap();
        let ab = s.render_line("ab", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.height(), 40);
        assert!(a.width() >= 8);
        assert!(ab.width() > a.width());
        assert!(a.data().iter().any(|&v| v < 0.5), "some ink");
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = s.render_line("ab", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ab, again);
        let text = "the quick brown fox 42";
        let line = s.render_line(text, &mut rng).unwrap();
        assert!(line.width() >= 8 * text.len());
    }

    #[test]
    fn unknown_characters_listed() {
        let s = WriterStyle::new(9, 1, 0.3, &latin()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match s.render_line("aXbX!", &mut rng) {
            Err(DatasetError::UnknownChars(c)) => assert_eq!(c, vec!['!', 'X']),
            other => panic!("{other:?}"),
        }
        assert!(matches!(s.render_line("", &mut rng), Err(DatasetError::EmptyText)));
    }
}
