//! Coarse-to-fine Top-K block selection.
//!
//! The coarsest level is scored densely. Every finer level only scores the
//! `K * B` children of the blocks its parent row selected, so the total score
//! work is a geometric series bounded by `O(N K B d)`.

use std::fmt::Write as _;

use crate::config::ValidatedConfig;
use crate::error::{ConfigError, Error, Result};
use crate::matrix::{dot, FeatureMatrix};
use crate::par;
use crate::pyramid::Pyramid;
use crate::Real;

/// Top-K table for one level: row `i` lists the `k` level-`level` key blocks
/// chosen for level-`level` query block `i`, strictly ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelIndices {
    level: usize,
    k: usize,
    rows: usize,
    indices: Vec<u32>,
}

impl LevelIndices {
    /// Validates bounds and the sorted/distinct row invariant.
    pub fn new(level: usize, k: usize, indices: Vec<u32>, n_key_blocks: usize) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            return Err(Error::ShapeMismatch(format!(
                "{} indices do not form rows of {k}",
                indices.len()
            )));
        }
        let rows = indices.len() / k;
        for (r, row) in indices.chunks_exact(k).enumerate() {
            if let Some(&bad) = row.iter().find(|&&x| x as usize >= n_key_blocks) {
                return Err(Error::IndexOutOfRange {
                    index: bad as usize,
                    bound: n_key_blocks,
                });
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidIndices {
                    row: r,
                    reason: "row is not strictly ascending",
                });
            }
        }
        Ok(Self {
            level,
            k,
            rows,
            indices,
        })
    }

    /// Skips validation. Only for tests that need malformed tables.
    #[doc(hidden)]
    pub fn new_unchecked(level: usize, k: usize, indices: Vec<u32>) -> Self {
        let rows = indices.len() / k;
        Self {
            level,
            k,
            rows,
            indices,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of query blocks.
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.indices
    }

    #[doc(hidden)]
    pub fn as_mut_slice(&mut self) -> &mut [u32] {
        &mut self.indices
    }
}

/// Output of [`hierarchical_topk`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    /// `per_level[l]` is the level-`l` table, for `l` in `0..L`.
    pub per_level: Vec<LevelIndices>,
    /// Level `L` always uses every coarsest key block.
    pub coarsest_full: bool,
    /// Multiply-accumulates spent on score matrices.
    pub mul_accs: u64,
}

impl SelectionResult {
    /// One line per row: `level l / row i: idx idx ...`, finest level first.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for table in &self.per_level {
            for i in 0..table.rows() {
                let _ = write!(out, "level {} / row {}:", table.level(), i);
                for idx in table.row(i) {
                    let _ = write!(out, " {idx}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Running best-`k` buffer ordered by descending score, ties to the smaller index.
struct TopK {
    k: usize,
    best: Vec<(Real, u32)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            best: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn beats(a: (Real, u32), b: (Real, u32)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    #[inline]
    fn push(&mut self, cand: (Real, u32)) {
        if self.best.len() == self.k {
            if !Self::beats(cand, self.best[self.k - 1]) {
                return;
            }
            self.best.pop();
        }
        let pos = self
            .best
            .iter()
            .position(|&b| Self::beats(cand, b))
            .unwrap_or(self.best.len());
        self.best.insert(pos, cand);
    }

    /// Writes the selected indices ascending and resets the buffer.
    fn drain_sorted(&mut self, out: &mut [u32]) {
        for (o, (_, idx)) in out.iter_mut().zip(&self.best) {
            *o = *idx;
        }
        out.sort_unstable();
        self.best.clear();
    }
}

/// Dense Top-K on the coarsest level. Row `r` of the result is level-`L`
/// query token `r`, i.e. level-`L-1` query block `r`, and lists the `k`
/// level-`L` key tokens (= level-`L-1` key blocks) with the largest scores.
pub fn select_coarsest(
    q_top: &FeatureMatrix,
    k_top: &FeatureMatrix,
    k: usize,
    scale: Real,
    output_level: usize,
) -> Result<(LevelIndices, u64)> {
    if q_top.cols() != k_top.cols() {
        return Err(Error::ShapeMismatch("query/key feature dims differ".into()));
    }
    let candidates = k_top.rows();
    if k == 0 || k > candidates {
        return Err(ConfigError::TopK { k, max: candidates }.into());
    }
    let mut indices = vec![0u32; q_top.rows() * k];
    par::for_each_chunk_mut(&mut indices, k, |r, out| {
        let q = q_top.row(r);
        let mut top = TopK::new(k);
        for c in 0..candidates {
            top.push((scale * dot(q, k_top.row(c)), c as u32));
        }
        top.drain_sorted(out);
    });
    let macs = (q_top.rows() * candidates * q_top.cols()) as u64;
    Ok((
        LevelIndices {
            level: output_level,
            k,
            rows: q_top.rows(),
            indices,
        },
        macs,
    ))
}

/// Sparse refinement from level `l = parent.level()` to `l - 1`.
///
/// Query block `i` gathers the `B` children of each of its parent's key
/// blocks, scores its `B` query tokens against those `K * B` candidates, and
/// keeps the best `k` per token. Candidate `c` maps to the level-`l` token
/// `parent[i][c / B] * B + c % B`, which is a level-`l-1` key block.
pub fn select_level(
    q_l: &FeatureMatrix,
    k_l: &FeatureMatrix,
    parent: &LevelIndices,
    k: usize,
    block_size: usize,
    scale: Real,
) -> Result<(LevelIndices, u64)> {
    if parent.level() == 0 {
        return Err(Error::ShapeMismatch("cannot refine below level 0".into()));
    }
    if q_l.cols() != k_l.cols() {
        return Err(Error::ShapeMismatch("query/key feature dims differ".into()));
    }
    if q_l.rows() != parent.rows() * block_size || k_l.rows() != q_l.rows() {
        return Err(Error::ShapeMismatch(format!(
            "level {} has {} query / {} key tokens but the parent table has {} rows",
            parent.level(),
            q_l.rows(),
            k_l.rows(),
            parent.rows()
        )));
    }
    let candidates = parent.k() * block_size;
    if k == 0 || k > candidates {
        return Err(ConfigError::TopK { k, max: candidates }.into());
    }
    let d = q_l.cols();
    let mut indices = vec![0u32; q_l.rows() * k];
    par::for_each_chunk_mut(&mut indices, block_size * k, |i, out| {
        let mut top = TopK::new(k);
        for r in 0..block_size {
            let q = q_l.row(i * block_size + r);
            for &pb in parent.row(i) {
                let first = pb as usize * block_size;
                for c in first..first + block_size {
                    top.push((scale * dot(q, k_l.row(c)), c as u32));
                }
            }
            top.drain_sorted(&mut out[r * k..(r + 1) * k]);
        }
    });
    let macs = par::sum_u64(parent.rows(), |i| {
        (block_size * parent.row(i).len() * block_size * d) as u64
    });
    Ok((
        LevelIndices {
            level: parent.level() - 1,
            k,
            rows: q_l.rows(),
            indices,
        },
        macs,
    ))
}

/// Full coarse-to-fine selection for every level `0..L`.
pub fn hierarchical_topk(pyr_q: &Pyramid, pyr_k: &Pyramid, cfg: &ValidatedConfig) -> Result<SelectionResult> {
    let l_max = cfg.levels();
    for (name, p) in [("query", pyr_q), ("key", pyr_k)] {
        if p.depth() != l_max
            || p.block_size() != cfg.block_size()
            || p.level(0).rows() != cfg.n()
            || p.level(0).cols() != cfg.d()
        {
            return Err(Error::ShapeMismatch(format!(
                "{name} pyramid does not match the config"
            )));
        }
    }
    let (k, b, scale) = (cfg.top_k(), cfg.block_size(), cfg.scale());
    let mut per_level = Vec::with_capacity(l_max);
    let (coarsest, mut mul_accs) = select_coarsest(pyr_q.level(l_max), pyr_k.level(l_max), k, scale, l_max - 1)?;
    per_level.push(coarsest);
    for l in (1..l_max).rev() {
        let parent = per_level.last().expect("coarsest level present");
        let (table, macs) = select_level(pyr_q.level(l), pyr_k.level(l), parent, k, b, scale)?;
        mul_accs += macs;
        per_level.push(table);
    }
    per_level.reverse();
    Ok(SelectionResult {
        per_level,
        coarsest_full: true,
        mul_accs,
    })
}
