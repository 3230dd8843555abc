use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A grid of square blocks covering an image; edge blocks may be partial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, one flag per block.
    pub masked: Vec<bool>,
}

/// Masks exactly `round(ratio · blocks)` blocks drawn uniformly without replacement.
pub fn generate_mask(
    height: usize,
    width: usize,
    block: usize,
    ratio: f64,
    seed: u64,
) -> Result<BlockMask> {
    if block == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "mask needs positive sizes, got {height}×{width} block {block}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let rows = height.div_ceil(block);
    let cols = width.div_ceil(block);
    let n = rows * cols;
    let k = crate::dataset::round_half_up_count(ratio, n);
    let mut masked = vec![false; n];
    for i in sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k) {
        masked[i] = true;
    }
    Ok(BlockMask {
        height,
        width,
        block,
        rows,
        cols,
        masked,
    })
}

impl BlockMask {
    pub fn masked_blocks(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Pixel area of block `(r, c)` after clipping to the image.
    pub fn block_area(&self, r: usize, c: usize) -> usize {
        let h = self.block.min(self.height - r * self.block);
        let w = self.block.min(self.width - c * self.block);
        h * w
    }

    pub fn masked_area(&self) -> usize {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.masked[r * self.cols + c])
            .map(|(r, c)| self.block_area(r, c))
            .sum()
    }

    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.masked[(y / self.block) * self.cols + x / self.block]
    }
}

/// Zeroes the masked blocks of a `[C, H, W]` or `[1, C, H, W]` image.
pub fn apply_mask(image: &Tensor, mask: &BlockMask) -> Result<Tensor> {
    let s = image.shape();
    let (h, w) = match s.len() {
        3 => (s[1], s[2]),
        4 if s[0] == 1 => (s[2], s[3]),
        _ => {
            return Err(Error::Shape(format!(
                "apply_mask expects one image, got {s:?}"
            )))
        }
    };
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "mask {}×{} for image {h}×{w}",
            mask.height, mask.width
        )));
    }
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                if mask.is_masked(y, x) {
                    plane[y * w + x] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_masks_half_the_blocks() {
        let m = generate_mask(256, 256, 32, 0.5, 1).unwrap();
        assert_eq!((m.rows * m.cols, m.masked_blocks()), (64, 32));
        let m = generate_mask(100, 100, 32, 0.5, 1).unwrap();
        assert_eq!((m.rows * m.cols, m.masked_blocks()), (16, 8));
        assert_eq!(m.block_area(3, 3), 16);
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(
            generate_mask(64, 48, 8, 0.5, 3).unwrap(),
            generate_mask(64, 48, 8, 0.5, 3).unwrap()
        );
        assert_ne!(
            generate_mask(64, 48, 8, 0.5, 3).unwrap(),
            generate_mask(64, 48, 8, 0.5, 4).unwrap()
        );
    }

    #[test]
    fn empty_and_full_masks() {
        let img = Tensor::new(&[2, 5, 7], (0..70).map(|v| v as f64 + 1.0).collect()).unwrap();
        let none = generate_mask(5, 7, 2, 0.0, 0).unwrap();
        assert_eq!(apply_mask(&img, &none).unwrap(), img);
        let all = generate_mask(5, 7, 2, 1.0, 0).unwrap();
        assert!(apply_mask(&img, &all)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(generate_mask(5, 7, 0, 0.5, 0).is_err());
        assert!(apply_mask(&img, &generate_mask(6, 7, 2, 0.5, 0).unwrap()).is_err());
    }

    #[test]
    fn unmasked_pixels_are_untouched() {
        let img = Tensor::new(&[1, 9, 9], (0..81).map(|v| v as f64 + 1.0).collect()).unwrap();
        let m = generate_mask(9, 9, 4, 0.5, 7).unwrap();
        let out = apply_mask(&img, &m).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, m.masked_area());
        for (i, (&a, &b)) in img.data().iter().zip(out.data()).enumerate() {
            if !m.is_masked(i / 9, i % 9) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
