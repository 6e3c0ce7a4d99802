use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::AugmentRanges;
use crate::raster::Image;

/// Full-height patches of uniform noise.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingParams {
    /// `(first column, width)` of each patch.
    pub patches: Vec<(usize, usize)>,
}

impl MaskingParams {
    pub fn neutral() -> Self {
        MaskingParams { patches: Vec::new() }
    }

    /// Patch count is uniform on `1..=max(1, W / (8 H))` times the level's
    /// multiplier; widths are uniform up to the level's multiple of `H`.
    pub fn draw(level: u8, height: usize, width: usize, ranges: &AugmentRanges, rng: &mut ChaCha8Rng) -> Self {
        let i = level as usize - 1;
        let max_count = (width / (8 * height)).max(1) * ranges.mask_count_multiplier[i].max(1);
        let count = rng.gen_range(1..=max_count);
        let max_w = ((ranges.mask_width[i] * height as f64).floor() as usize).clamp(1, width);
        let patches = (0..count)
            .map(|_| {
                let pw = rng.gen_range(1..=max_w);
                (rng.gen_range(0..=width - pw), pw)
            })
            .collect();
        MaskingParams { patches }
    }

    pub fn count_bound(level: u8, height: usize, width: usize, ranges: &AugmentRanges) -> usize {
        (width / (8 * height)).max(1) * ranges.mask_count_multiplier[level as usize - 1].max(1)
    }

    /// `rng` supplies the noise values.
    pub fn apply(&self, image: &Image, rng: &mut ChaCha8Rng) -> Image {
        let mut out = image.clone();
        for &(x0, pw) in &self.patches {
            for c in 0..image.channels() {
                for y in 0..image.height() {
                    for x in x0..(x0 + pw).min(image.width()) {
                        out.set(c, y, x, rng.gen::<f32>());
                    }
                }
            }
        }
        out
    }

    pub fn masked_columns(&self, width: usize) -> Vec<bool> {
        let mut m = vec![false; width];
        for &(x0, pw) in &self.patches {
            m[x0..(x0 + pw).min(width)].iter_mut().for_each(|v| *v = true);
        }
        m
    }
}
