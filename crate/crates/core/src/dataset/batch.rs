use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::ctc::LabelSequence;
use crate::numerics::Tensor;
use crate::raster::{stack, Image};

/// Padded `[N, C, 40, W]` images with their targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Vec<LabelSequence>,
    /// Dataset record of each row.
    pub indices: Vec<usize>,
}

/// Uniform draws with replacement from `pool`.
pub fn sample_indices<R: Rng>(pool: &[usize], batch_size: usize, rng: &mut R) -> Vec<usize> {
    assert!(!pool.is_empty(), "cannot sample from an empty split");
    (0..batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Converts to `channels`, right-pads with white to the widest image rounded
/// up to `multiple`, and stacks.
pub fn pad_and_stack(images: &[Image], multiple: usize, channels: usize) -> Tensor {
    let max_w = images.iter().map(Image::width).max().expect("non-empty batch");
    let width = max_w.div_ceil(multiple) * multiple;
    let padded: Vec<Image> = images.iter().map(|im| im.with_channels(channels).pad_right(width, 1.0)).collect();
    stack(&padded)
}

/// Shuffles `pool` once and returns its prefixes of the requested sizes, so
/// every smaller cluster is a subset of every larger one.
pub fn nested_clusters<R: Rng>(pool: &[usize], sizes: &[usize], rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = pool.to_vec();
    order.shuffle(rng);
    sizes.iter().map(|&n| order[..n.min(order.len())].to_vec()).collect()
}

impl Dataset {
    pub fn batch_of(&self, indices: &[usize], multiple: usize, channels: usize) -> Batch {
        let images: Vec<Image> = indices.iter().map(|&i| self.images[i].clone()).collect();
        self.batch_from_images(indices, &images, multiple, channels)
    }

    /// Batch built from (possibly augmented) `images` for records `indices`.
    pub fn batch_from_images(&self, indices: &[usize], images: &[Image], multiple: usize, channels: usize) -> Batch {
        Batch {
            images: pad_and_stack(images, multiple, channels),
            targets: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn sample_batch<R: Rng>(&self, pool: &[usize], batch_size: usize, rng: &mut R, multiple: usize, channels: usize) -> Batch {
        let idx = sample_indices(pool, batch_size, rng);
        self.batch_of(&idx, multiple, channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn padding_rounds_up_and_fills_white() {
        let imgs = vec![Image::filled(1, 40, 13, 0.0), Image::filled(1, 40, 30, 0.0)];
        let t = pad_and_stack(&imgs, 8, 1);
        assert_eq!(t.shape(), &[2, 1, 40, 32]);
        let row0 = &t.data()[..32];
        assert!(row0[..13].iter().all(|&v| v == 0.0) && row0[13..].iter().all(|&v| v == 1.0));
        let single = pad_and_stack(&imgs[..1], 8, 1);
        assert_eq!(single.shape(), &[1, 1, 40, 16]);
        assert_eq!(pad_and_stack(&imgs[..1], 8, 3).shape(), &[1, 3, 40, 16]);
    }

    #[test]
    fn clusters_are_nested() {
        let pool: Vec<usize> = (100..356).collect();
        let sizes = [1, 2, 4, 8, 16, 32, 64, 128, 256];
        let c = nested_clusters(&pool, &sizes, &mut ChaCha8Rng::seed_from_u64(3));
        for w in c.windows(2) {
            assert!(w[0].iter().all(|i| w[1].contains(i)));
        }
        assert_eq!(c[8].len(), 256);
        let again = nested_clusters(&pool, &sizes, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(c, again);
    }

    #[test]
    fn sampling_is_reproducible_with_replacement() {
        let pool = [4, 5];
        let a = sample_indices(&pool, 50, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_indices(&pool, 50, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.contains(&4) && a.contains(&5));
    }
}
