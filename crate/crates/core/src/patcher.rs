//! Aligned, non-overlapping random patch extraction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageBuffer;

/// Consecutive rejected draws before falling back to grid tiling.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 1000;

/// Top-left corner of an `s`×`s` patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub x: usize,
    pub y: usize,
}

impl PatchOrigin {
    pub fn overlaps(&self, other: &PatchOrigin, size: usize) -> bool {
        self.x < other.x + size
            && other.x < self.x + size
            && self.y < other.y + size
            && other.y < self.y + size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub ref_patch: ImageBuffer,
    pub dist_patch: ImageBuffer,
    pub origin: PatchOrigin,
    /// 1-based.
    pub index: usize,
}

/// Draws `n` pairwise-disjoint `size`×`size` positions inside a
/// `width`×`height` frame.
pub fn sample_origins(
    width: usize,
    height: usize,
    n: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PatchOrigin>> {
    let infeasible = || Error::InfeasiblePatching {
        n,
        size,
        width,
        height,
    };
    if size == 0 || size > width || size > height || n * size * size > width * height {
        return Err(infeasible());
    }
    let mut placed: Vec<PatchOrigin> = Vec::with_capacity(n);
    let mut rejections = 0;
    while placed.len() < n {
        let candidate = PatchOrigin {
            x: rng.gen_range(0..=width - size),
            y: rng.gen_range(0..=height - size),
        };
        if placed.iter().any(|p| p.overlaps(&candidate, size)) {
            rejections += 1;
            if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                return grid_origins(width, height, n, size, rng).ok_or_else(infeasible);
            }
        } else {
            placed.push(candidate);
            rejections = 0;
        }
    }
    Ok(placed)
}

fn grid_origins(
    width: usize,
    height: usize,
    n: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Option<Vec<PatchOrigin>> {
    let (cols, rows) = (width / size, height / size);
    if cols * rows < n {
        return None;
    }
    let mut cells: Vec<PatchOrigin> = (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| PatchOrigin {
                x: c * size,
                y: r * size,
            })
        })
        .collect();
    cells.shuffle(rng);
    cells.truncate(n);
    Some(cells)
}

/// Crops every origin from both images.
pub fn crop_pairs(
    reference: &ImageBuffer,
    distorted: &ImageBuffer,
    origins: &[PatchOrigin],
    size: usize,
) -> Result<Vec<PatchPair>> {
    if !reference.same_shape(distorted) {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} vs distorted {:?}",
            reference, distorted
        )));
    }
    origins
        .iter()
        .enumerate()
        .map(|(i, &origin)| {
            Ok(PatchPair {
                ref_patch: reference.crop(origin.x, origin.y, size, size)?,
                dist_patch: distorted.crop(origin.x, origin.y, size, size)?,
                origin,
                index: i + 1,
            })
        })
        .collect()
}

/// `n` aligned `s`×`s` patch pairs at random disjoint positions.
pub fn extract_patches(
    reference: &ImageBuffer,
    distorted: &ImageBuffer,
    n: usize,
    s: usize,
    rng_seed: u64,
) -> Result<Vec<PatchPair>> {
    if !reference.same_shape(distorted) {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} vs distorted {:?}",
            reference, distorted
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let origins = sample_origins(reference.width(), reference.height(), n, s, &mut rng)?;
    crop_pairs(reference, distorted, &origins, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, salt: u8) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 3, |x, y, c| {
            ((x * 31 + y * 17 + c * 7) as u8).wrapping_mul(13) ^ salt
        })
    }

    #[test]
    fn single_full_patch() {
        let (r, d) = (noise(64, 64, 0), noise(64, 64, 5));
        let pairs = extract_patches(&r, &d, 1, 64, 42).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].origin, PatchOrigin { x: 0, y: 0 });
        assert_eq!(pairs[0].ref_patch, r);
        assert_eq!(pairs[0].dist_patch, d);
        assert_eq!(pairs[0].index, 1);
    }

    #[test]
    fn four_quadrant_patches_are_disjoint() {
        let (r, d) = (noise(128, 128, 0), noise(128, 128, 9));
        for seed in 0..20 {
            let pairs = extract_patches(&r, &d, 4, 64, seed).unwrap();
            assert_eq!(pairs.len(), 4);
            for i in 0..4 {
                for j in i + 1..4 {
                    assert!(!pairs[i].origin.overlaps(&pairs[j].origin, 64));
                }
            }
        }
    }

    #[test]
    fn infeasible_requests() {
        let (r, d) = (noise(100, 100, 0), noise(100, 100, 1));
        assert!(matches!(
            extract_patches(&r, &d, 4, 64, 0),
            Err(Error::InfeasiblePatching { .. })
        ));
        // Area fits but geometry does not.
        assert!(matches!(
            extract_patches(&r, &d, 2, 64, 0),
            Err(Error::InfeasiblePatching { .. })
        ));
        assert!(matches!(
            extract_patches(&r, &noise(100, 99, 0), 1, 8, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn seed_determinism() {
        let (r, d) = (noise(96, 80, 0), noise(96, 80, 3));
        let a = extract_patches(&r, &d, 5, 16, 7).unwrap();
        let b = extract_patches(&r, &d, 5, 16, 7).unwrap();
        assert_eq!(a, b);
    }
}
