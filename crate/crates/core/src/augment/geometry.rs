use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;

use super::{uniform, AugmentRanges};
use crate::raster::Image;

/// `mid + amp * sin(2 pi x / period + phase)` along the line.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothField {
    pub mid: f64,
    pub amp: f64,
    pub period: f64,
    pub phase: f64,
}

impl SmoothField {
    pub fn constant(value: f64) -> Self {
        SmoothField { mid: value, amp: 0.0, period: 1.0, phase: 0.0 }
    }

    /// A field whose values stay inside `[lo, hi]`, with a period of 4 to 8
    /// line heights.
    fn draw(lo: f64, hi: f64, height: usize, rng: &mut ChaCha8Rng) -> Self {
        let (a, b) = (uniform(rng, lo, hi), uniform(rng, lo, hi));
        let h = height as f64;
        SmoothField {
            mid: (a + b) / 2.0,
            amp: (a - b).abs() / 2.0,
            period: uniform(rng, 4.0 * h, 8.0 * h),
            phase: uniform(rng, 0.0, TAU),
        }
    }

    pub fn at(&self, x: f64) -> f64 {
        if self.amp == 0.0 {
            return self.mid;
        }
        self.mid + self.amp * (TAU * x / self.period + self.phase).sin()
    }
}

/// Slant and scale fields; scales are stored as logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryParams {
    pub slant: SmoothField,
    pub log_h_scale: SmoothField,
    pub log_v_scale: SmoothField,
}

impl GeometryParams {
    pub fn neutral() -> Self {
        GeometryParams {
            slant: SmoothField::constant(0.0),
            log_h_scale: SmoothField::constant(0.0),
            log_v_scale: SmoothField::constant(0.0),
        }
    }

    pub fn draw(level: u8, height: usize, ranges: &AugmentRanges, rng: &mut ChaCha8Rng) -> Self {
        let i = level as usize - 1;
        let s = ranges.slant[i];
        let (lo, hi) = (ranges.scale[i].0.ln(), ranges.scale[i].1.ln());
        GeometryParams {
            slant: SmoothField::draw(-s, s, height, rng),
            log_h_scale: SmoothField::draw(lo, hi, height, rng),
            log_v_scale: SmoothField::draw(lo, hi, height, rng),
        }
    }

    /// Warps with bilinear sampling and edge replication. The horizontal
    /// scale stretches columns locally; the stretched line is mapped back
    /// onto the original width.
    pub fn apply(&self, image: &Image) -> Image {
        let (h, w) = (image.height(), image.width());
        let source_x = self.column_map(w);
        let cy = (h as f64 - 1.0) / 2.0;
        let mut out = image.clone();
        for (xo, &xs) in source_x.iter().enumerate() {
            let sv = self.log_v_scale.at(xs).exp();
            let k = self.slant.at(xs);
            for yo in 0..h {
                let ys = cy + (yo as f64 - cy) / sv;
                let xsrc = xs + k * (ys - cy);
                for c in 0..image.channels() {
                    out.set(c, yo, xo, image.sample_bilinear(c, xsrc, ys));
                }
            }
        }
        out
    }

    /// Source column for each output column.
    fn column_map(&self, w: usize) -> Vec<f64> {
        if w == 1 {
            return vec![0.0];
        }
        let mut cum = vec![0.0; w];
        for i in 1..w {
            cum[i] = cum[i - 1] + self.log_h_scale.at(i as f64 - 0.5).exp();
        }
        let total = cum[w - 1];
        (0..w)
            .map(|i| {
                let target = i as f64 * total / (w - 1) as f64;
                let j = cum.partition_point(|&c| c <= target).clamp(1, w - 1) - 1;
                j as f64 + (target - cum[j]) / (cum[j + 1] - cum[j])
            })
            .collect()
    }
}
