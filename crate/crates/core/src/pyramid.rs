//! Hierarchical mean pooling and its adjoint.

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::par;
use crate::Real;

/// `levels[l]` holds the input mean-pooled `l` times by the block size, so it
/// has `N / B^l` rows. `levels[0]` is a copy of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    block_size: usize,
    levels: Vec<FeatureMatrix>,
}

impl Pyramid {
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Number of coarse levels (the pyramid has `depth() + 1` matrices).
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, l: usize) -> &FeatureMatrix {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[FeatureMatrix] {
        &self.levels
    }

    /// Multiplies every level by `factor`; pooling commutes with scaling.
    pub fn scaled(&self, factor: Real) -> Self {
        Self {
            block_size: self.block_size,
            levels: self.levels.iter().map(|m| m.scaled(factor)).collect(),
        }
    }
}

/// Builds `levels + 1` mean-pooled representations of `x`.
pub fn build_pyramid(x: &FeatureMatrix, block_size: usize, levels: usize) -> Result<Pyramid> {
    let divisor = block_size.pow(levels as u32);
    if block_size == 0 || !x.rows().is_multiple_of(divisor) {
        return Err(Error::Divisibility {
            rows: x.rows(),
            divisor,
        });
    }
    let mut out = Vec::with_capacity(levels + 1);
    out.push(x.clone());
    for l in 1..=levels {
        let pooled = mean_pool(&out[l - 1], block_size);
        out.push(pooled);
    }
    Ok(Pyramid {
        block_size,
        levels: out,
    })
}

/// One pooling step: row `t` of the result is the mean of rows
/// `t*B .. t*B + B`, summed in index order.
pub(crate) fn mean_pool(x: &FeatureMatrix, block_size: usize) -> FeatureMatrix {
    let d = x.cols();
    let rows = x.rows() / block_size;
    let inv = 1.0 / block_size as Real;
    let mut data = vec![0.0; rows * d];
    par::for_each_chunk_mut(&mut data, d, |t, out| {
        for b in 0..block_size {
            for (o, v) in out.iter_mut().zip(x.row(t * block_size + b)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
    });
    FeatureMatrix::from_vec_unchecked(rows, d, data)
}

/// Adjoint of pooling `hops` times: each fine row of group `t` receives
/// `d_coarse[t] / B^hops`.
pub fn pool_backward(d_coarse: &FeatureMatrix, block_size: usize, hops: usize) -> FeatureMatrix {
    let group = block_size.pow(hops as u32);
    let d = d_coarse.cols();
    let inv = 1.0 / group as Real;
    let mut data = vec![0.0; d_coarse.rows() * group * d];
    par::for_each_chunk_mut(&mut data, d, |r, out| {
        for (o, g) in out.iter_mut().zip(d_coarse.row(r / group)) {
            *o = g * inv;
        }
    });
    FeatureMatrix::from_vec_unchecked(d_coarse.rows() * group, d, data)
}
