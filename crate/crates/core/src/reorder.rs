//! 2D to 1D token reordering for image inputs.
//!
//! With `B = s * s`, the ordering is a base-`s` Morton curve whose digits are
//! traversed row-major: every aligned `s^i x s^i` patch becomes one contiguous
//! run of `B^i` tokens, so pooling by `B` in 1D pools `s x s` pixel patches.

use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Sequence position to raster index (`forward`) and back (`inverse`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    height: usize,
    width: usize,
    side: usize,
    depth: usize,
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Raster rows to sequence order.
    Forward,
    /// Sequence order back to raster rows.
    Inverse,
}

fn exact_sqrt(b: usize) -> Option<usize> {
    let s = (b as f64).sqrt().round() as usize;
    (s >= 2 && s * s == b).then_some(s)
}

impl Permutation {
    pub fn identity(size: usize) -> Self {
        let ids: Vec<u32> = (0..size as u32).collect();
        Self {
            height: 1,
            width: size,
            side: 1,
            depth: 0,
            forward: ids.clone(),
            inverse: ids,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// `forward[pos]` is the raster index stored at sequence position `pos`.
    pub fn forward(&self) -> &[u32] {
        &self.forward
    }

    pub fn inverse(&self) -> &[u32] {
        &self.inverse
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Patch side `s`.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of nested patch levels; patches of side `s^depth` tile the image.
    pub fn depth(&self) -> usize {
        self.depth
    }
}

/// Hierarchical ordering for an `h x w` image and block size `b = s^2`.
///
/// The depth is the largest `D` with `s^D` dividing both sides. Top-level
/// `s^D x s^D` patches are laid out row-major, and inside a patch the `B`
/// sub-patches of each level are visited row-major as well.
pub fn build_reorder(height: usize, width: usize, block_size: usize) -> Result<Permutation> {
    let side = exact_sqrt(block_size).ok_or(Error::NotSquareBlock(block_size))?;
    if height == 0 || width == 0 || !height.is_multiple_of(side) || !width.is_multiple_of(side) {
        return Err(Error::Divisibility {
            rows: height.min(width),
            divisor: side,
        });
    }
    let mut depth = 0;
    let mut patch = 1;
    while height.is_multiple_of(patch * side) && width.is_multiple_of(patch * side) {
        patch *= side;
        depth += 1;
    }
    let per_patch = patch * patch;
    let patches_per_row = width / patch;
    let size = height * width;

    let mut forward = vec![0u32; size];
    for (pos, slot) in forward.iter_mut().enumerate() {
        let top = pos / per_patch;
        let mut rem = pos % per_patch;
        let (mut y, mut x) = ((top / patches_per_row) * patch, (top % patches_per_row) * patch);
        let mut sub = patch;
        for _ in 0..depth {
            sub /= side;
            let digits = sub * sub;
            let digit = rem / digits;
            rem %= digits;
            y += (digit / side) * sub;
            x += (digit % side) * sub;
        }
        *slot = (y * width + x) as u32;
    }
    let mut inverse = vec![0u32; size];
    for (pos, &raster) in forward.iter().enumerate() {
        inverse[raster as usize] = pos as u32;
    }
    Ok(Permutation {
        height,
        width,
        side,
        depth,
        forward,
        inverse,
    })
}

/// [`build_reorder`] for a config: `h * w` must equal `N`, and both sides
/// must be divisible by `s^L` so every pyramid level pools square patches.
pub fn build_reorder_for(height: usize, width: usize, cfg: &ValidatedConfig) -> Result<Permutation> {
    let p = build_reorder(height, width, cfg.block_size())?;
    if p.len() != cfg.n() {
        return Err(Error::ShapeMismatch(format!(
            "{height}x{width} image has {} pixels, config expects {}",
            p.len(),
            cfg.n()
        )));
    }
    if p.depth() < cfg.levels() {
        return Err(Error::Divisibility {
            rows: height.min(width),
            divisor: p.side().pow(cfg.levels() as u32),
        });
    }
    Ok(p)
}

/// Reorders rows: `Forward` maps raster rows to sequence order.
pub fn apply_permutation(x: &FeatureMatrix, p: &Permutation, direction: Direction) -> Result<FeatureMatrix> {
    if x.rows() != p.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows for a permutation of {}",
            x.rows(),
            p.len()
        )));
    }
    let map = match direction {
        Direction::Forward => &p.forward,
        Direction::Inverse => &p.inverse,
    };
    let mut data = Vec::with_capacity(x.as_slice().len());
    for &src in map {
        data.extend_from_slice(x.row(src as usize));
    }
    Ok(FeatureMatrix::from_vec_unchecked(x.rows(), x.cols(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Real;

    #[test]
    fn four_by_four_with_two_by_two_patches() {
        let p = build_reorder(4, 4, 4).unwrap();
        assert_eq!(p.forward(), &[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
        assert_eq!(p.depth(), 2);
    }

    #[test]
    fn single_patch_is_row_major() {
        let p = build_reorder(3, 3, 9).unwrap();
        assert_eq!(p.forward(), &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn rectangular_images_tile_top_patches_row_major() {
        let p = build_reorder(2, 4, 4).unwrap();
        assert_eq!(p.depth(), 1);
        assert_eq!(p.forward(), &[0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn errors() {
        assert!(matches!(build_reorder(4, 4, 8), Err(Error::NotSquareBlock(8))));
        assert!(matches!(build_reorder(4, 4, 1), Err(Error::NotSquareBlock(1))));
        assert!(matches!(build_reorder(6, 4, 16), Err(Error::Divisibility { .. })));
        let cfg = crate::LlsaConfig::new(256, 1, 4, 1, 3).validate().unwrap();
        assert!(build_reorder_for(16, 16, &cfg).is_ok());
        let cfg = crate::LlsaConfig::new(1024, 1, 4, 1, 4).validate().unwrap();
        assert!(matches!(
            build_reorder_for(8, 128, &cfg),
            Err(Error::Divisibility { .. })
        ));
        assert!(matches!(build_reorder_for(16, 16, &cfg), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn raster_ramp_first_rows() {
        let p = build_reorder(4, 4, 4).unwrap();
        let x = FeatureMatrix::from_fn(16, 1, |r, _| r as Real);
        let y = apply_permutation(&x, &p, Direction::Forward).unwrap();
        assert_eq!(&y.as_slice()[..4], &[0.0, 1.0, 4.0, 5.0]);
        let back = apply_permutation(&y, &p, Direction::Inverse).unwrap();
        assert_eq!(back, x);
        assert_eq!(
            apply_permutation(&x, &Permutation::identity(16), Direction::Forward).unwrap(),
            x
        );
        assert!(apply_permutation(&x, &Permutation::identity(15), Direction::Forward).is_err());
    }
}
