use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{log_uniform, uniform, AugmentRanges};
use crate::raster::Image;

/// Linear motion blur, then gamma, then additive Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBlurGammaParams {
    /// Blur kernel length in pixels; 1 disables blurring.
    pub blur_len: usize,
    /// Blur direction in radians.
    pub blur_angle: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl NoiseBlurGammaParams {
    pub fn neutral() -> Self {
        NoiseBlurGammaParams { blur_len: 1, blur_angle: 0.0, sigma: 0.0, gamma: 1.0 }
    }

    pub fn draw(level: u8, ranges: &AugmentRanges, rng: &mut ChaCha8Rng) -> Self {
        let i = level as usize - 1;
        let (glo, ghi) = ranges.gamma[i];
        NoiseBlurGammaParams {
            blur_len: rng.gen_range(1..=ranges.blur_max_len[i].max(1)),
            blur_angle: uniform(rng, 0.0, std::f64::consts::PI),
            sigma: uniform(rng, 0.0, ranges.noise_sigma_max[i]),
            gamma: log_uniform(rng, glo, ghi),
        }
    }

    /// `rng` supplies the noise samples.
    pub fn apply(&self, image: &Image, rng: &mut ChaCha8Rng) -> Image {
        let mut out = if self.blur_len > 1 { self.blur(image) } else { image.clone() };
        if self.gamma != 1.0 {
            let g = self.gamma as f32;
            out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0).powf(g));
        }
        if self.sigma > 0.0 {
            for v in out.data_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += (self.sigma * n) as f32;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    fn blur(&self, image: &Image) -> Image {
        let (dx, dy) = (self.blur_angle.cos(), self.blur_angle.sin());
        let half = (self.blur_len - 1) as f64 / 2.0;
        let offsets: Vec<(f64, f64)> =
            (0..self.blur_len).map(|k| ((k as f64 - half) * dx, (k as f64 - half) * dy)).collect();
        let norm = 1.0 / self.blur_len as f32;
        let mut out = image.clone();
        for c in 0..image.channels() {
            for y in 0..image.height() {
                for x in 0..image.width() {
                    let s: f32 = offsets
                        .iter()
                        .map(|&(ox, oy)| image.sample_bilinear(c, x as f64 + ox, y as f64 + oy))
                        .sum();
                    out.set(c, y, x, s * norm);
                }
            }
        }
        out
    }
}
