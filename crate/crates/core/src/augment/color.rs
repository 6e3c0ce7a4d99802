use rand_chacha::ChaCha8Rng;

use super::{uniform, AugmentRanges};
use crate::raster::Image;

/// Brightness, contrast, saturation and hue jitter on an RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorParams {
    /// Added to every channel.
    pub brightness: f64,
    /// Multiplies deviations from the mean luma.
    pub contrast: f64,
    /// Multiplies deviations from the per-pixel luma.
    pub saturation: f64,
    /// Hue rotation as a fraction of a full turn.
    pub hue: f64,
}

impl ColorParams {
    pub fn neutral() -> Self {
        ColorParams { brightness: 0.0, contrast: 1.0, saturation: 1.0, hue: 0.0 }
    }

    pub fn draw(level: u8, ranges: &AugmentRanges, rng: &mut ChaCha8Rng) -> Self {
        let i = level as usize - 1;
        let (j, h) = (ranges.color_jitter[i], ranges.hue_jitter[i]);
        ColorParams {
            brightness: uniform(rng, -j, j),
            contrast: uniform(rng, 1.0 - j, 1.0 + j),
            saturation: uniform(rng, 1.0 - j, 1.0 + j),
            hue: uniform(rng, -h, h),
        }
    }

    /// Output always has three channels.
    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.to_rgb();
        let n = out.height() * out.width();
        let luma = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];

        if self.brightness != 0.0 {
            let b = self.brightness as f32;
            out.data_mut().iter_mut().for_each(|v| *v += b);
        }
        if self.contrast != 1.0 {
            let d = out.data();
            let mean = (0..n).map(|i| luma(d, i) as f64).sum::<f64>() / n as f64;
            let (m, c) = (mean as f32, self.contrast as f32);
            out.data_mut().iter_mut().for_each(|v| *v = m + c * (*v - m));
        }
        if self.saturation != 1.0 {
            let s = self.saturation as f32;
            let d = out.data_mut();
            for i in 0..n {
                let g = luma(d, i);
                for c in 0..3 {
                    d[c * n + i] = g + s * (d[c * n + i] - g);
                }
            }
        }
        if self.hue != 0.0 {
            let d = out.data_mut();
            for i in 0..n {
                let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
                let (r, g, b) = hsv_to_rgb((h + self.hue as f32).rem_euclid(1.0), s, v);
                d[i] = r;
                d[n + i] = g;
                d[2 * n + i] = b;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

/// Hue in `[0, 1)`.
fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return (0.0, 0.0, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    if s <= 0.0 {
        return (v, v, v);
    }
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::stream;

    fn colorful() -> Image {
        let n = 8 * 10;
        let data = (0..3 * n).map(|i| 0.2 + 0.6 * ((i * 37 % 101) as f32 / 100.0)).collect();
        Image::new(3, 8, 10, data).unwrap()
    }

    #[test]
    fn neutral_is_identity() {
        let img = colorful();
        assert_eq!(ColorParams::neutral().apply(&img), img);
    }

    #[test]
    fn grayscale_is_promoted() {
        let gray = Image::filled(1, 4, 4, 0.5);
        let out = ColorParams::neutral().apply(&gray);
        assert_eq!(out.channels(), 3);
        assert_eq!(out.to_gray(), gray);
    }

    #[test]
    fn brightness_shifts_channel_means() {
        let img = colorful();
        let d = 0.07;
        let out = ColorParams { brightness: d, ..ColorParams::neutral() }.apply(&img);
        for c in 0..3 {
            let mean = |im: &Image| im.plane(c).iter().map(|&v| v as f64).sum::<f64>() / 80.0;
            // Inputs are at most 0.8, so nothing clamps.
            assert!((mean(&out) - mean(&img) - d).abs() < 1e-6);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.1, 0.5, 0.9), (0.9, 0.2, 0.3), (0.4, 0.4, 0.1), (0.3, 0.3, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn draws_within_level_ranges() {
        let r = AugmentRanges::default();
        let mut rng = stream(2, 0);
        for _ in 0..300 {
            let p = ColorParams::draw(1, &r, &mut rng);
            assert!(p.brightness.abs() <= 0.15 && (p.contrast - 1.0).abs() <= 0.15 && p.hue.abs() <= 0.05);
            let p = ColorParams::draw(2, &r, &mut rng);
            assert!((p.saturation - 1.0).abs() <= 0.30 && p.hue.abs() <= 0.10);
        }
    }
}
