//! Query-major to key-major transposition of Top-K tables.
//!
//! This is the scan-based CSR-to-CSC transpose: count queries per key block,
//! prefix-sum the counts into offsets, then scatter each query index into its
//! key's segment through a per-key cursor. Both passes use atomic counters so
//! rows can be processed in parallel. Segments are sorted afterwards, which
//! makes the output independent of scheduling.

use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::selection::{LevelIndices, SelectionResult};

/// Key-major reverse lookup: the query blocks that selected key block `b`
/// are `flat_queries[offsets[b]..offsets[b + 1]]`, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransposedIndices {
    flat_queries: Vec<u32>,
    offsets: Vec<usize>,
}

impl TransposedIndices {
    /// Assembles a transposition from raw parts, checking the offset invariants.
    pub fn from_parts(flat_queries: Vec<u32>, offsets: Vec<usize>) -> Result<Self> {
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&flat_queries.len())
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::ShapeMismatch("offsets are not a valid prefix sum".into()));
        }
        Ok(Self { flat_queries, offsets })
    }

    pub fn flat_queries(&self) -> &[u32] {
        &self.flat_queries
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn n_key_blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn segment(&self, key_block: usize) -> &[u32] {
        &self.flat_queries[self.offsets[key_block]..self.offsets[key_block + 1]]
    }

    /// Expands back to `(query block, key block)` pairs in key-major order.
    pub fn pairs(&self) -> Vec<(u32, u32)> {
        (0..self.n_key_blocks())
            .flat_map(|b| self.segment(b).iter().map(move |&q| (q, b as u32)))
            .collect()
    }
}

fn check_bounds(idx: &LevelIndices, n_key_blocks: usize) -> Result<()> {
    match idx.as_slice().iter().find(|&&b| b as usize >= n_key_blocks) {
        Some(&bad) => Err(Error::IndexOutOfRange {
            index: bad as usize,
            bound: n_key_blocks,
        }),
        None => Ok(()),
    }
}

/// Per-key query counts using atomic increments.
pub fn count_atomic(idx: &LevelIndices, n_key_blocks: usize) -> Vec<usize> {
    let counts: Vec<AtomicUsize> = (0..n_key_blocks).map(|_| AtomicUsize::new(0)).collect();
    par::for_each_index(idx.rows(), |i| {
        for &b in idx.row(i) {
            counts[b as usize].fetch_add(1, Ordering::Relaxed);
        }
    });
    counts.into_iter().map(AtomicUsize::into_inner).collect()
}

/// Per-key query counts from per-worker histograms summed afterwards.
pub fn count_reduce(idx: &LevelIndices, n_key_blocks: usize) -> Vec<usize> {
    let workers = par::worker_count().max(1);
    let rows_per = idx.rows().div_ceil(workers).max(1);
    let partials = par::map_collect(idx.rows().div_ceil(rows_per), |w| {
        let mut local = vec![0usize; n_key_blocks];
        for i in w * rows_per..((w + 1) * rows_per).min(idx.rows()) {
            for &b in idx.row(i) {
                local[b as usize] += 1;
            }
        }
        local
    });
    let mut counts = vec![0usize; n_key_blocks];
    for local in partials {
        for (c, l) in counts.iter_mut().zip(local) {
            *c += l;
        }
    }
    counts
}

/// Exclusive prefix sum with a trailing total (`len + 1` entries).
pub fn prefix_offsets(counts: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for &c in counts {
        acc += c;
        offsets.push(acc);
    }
    offsets
}

/// Transposes one level's Top-K table over `n_key_blocks` key blocks.
pub fn transpose_indices(idx: &LevelIndices, n_key_blocks: usize) -> Result<TransposedIndices> {
    check_bounds(idx, n_key_blocks)?;
    let offsets = prefix_offsets(&count_atomic(idx, n_key_blocks));

    let cursors: Vec<AtomicUsize> = (0..n_key_blocks).map(|_| AtomicUsize::new(0)).collect();
    let slots: Vec<AtomicU32> = (0..idx.as_slice().len()).map(|_| AtomicU32::new(0)).collect();
    par::for_each_index(idx.rows(), |i| {
        for &b in idx.row(i) {
            let b = b as usize;
            let pos = offsets[b] + cursors[b].fetch_add(1, Ordering::Relaxed);
            slots[pos].store(i as u32, Ordering::Relaxed);
        }
    });
    let mut flat: Vec<u32> = slots.into_iter().map(AtomicU32::into_inner).collect();

    let mut segments = Vec::with_capacity(n_key_blocks);
    let mut rest = flat.as_mut_slice();
    for b in 0..n_key_blocks {
        let (seg, tail) = rest.split_at_mut(offsets[b + 1] - offsets[b]);
        segments.push(seg);
        rest = tail;
    }
    par::for_each_item_mut(&mut segments, |seg| seg.sort_unstable());

    Ok(TransposedIndices {
        flat_queries: flat,
        offsets,
    })
}

/// One transposition per selected level `0..L`; level `l` has `N / B^(l+1)`
/// key blocks.
pub fn transpose_all(sel: &SelectionResult, cfg: &ValidatedConfig) -> Result<Vec<TransposedIndices>> {
    sel.per_level
        .iter()
        .enumerate()
        .map(|(l, table)| transpose_indices(table, cfg.blocks_at(l)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(k: usize, flat: Vec<u32>, n_keys: usize) -> LevelIndices {
        LevelIndices::new(0, k, flat, n_keys).unwrap()
    }

    #[test]
    fn scattered_single_column() {
        let t = transpose_indices(&table(1, vec![1, 0, 1, 3], 4), 4).unwrap();
        assert_eq!(t.offsets(), &[0, 1, 3, 3, 4]);
        assert_eq!(t.flat_queries(), &[1, 0, 2, 3]);
    }

    #[test]
    fn diagonal_is_its_own_transpose() {
        let t = transpose_indices(&table(1, vec![0, 1, 2], 3), 3).unwrap();
        assert_eq!(t.offsets(), &[0, 1, 2, 3]);
        assert_eq!(t.flat_queries(), &[0, 1, 2]);
    }

    #[test]
    fn every_key_selected_by_every_query() {
        let t = transpose_indices(&table(2, vec![0, 1, 0, 1], 2), 2).unwrap();
        assert_eq!(t.offsets(), &[0, 2, 4]);
        assert_eq!(t.flat_queries(), &[0, 1, 0, 1]);
        assert_eq!(t.segment(1), &[0, 1]);
    }

    #[test]
    fn uniform_selection_leaves_empty_tail_segments() {
        let (rows, k, keys) = (6, 3, 10);
        let flat: Vec<u32> = (0..rows).flat_map(|_| 0..k as u32).collect();
        let t = transpose_indices(&table(k, flat, keys), keys).unwrap();
        for b in 0..keys {
            let expected = if b < k { rows } else { 0 };
            assert_eq!(t.segment(b).len(), expected);
        }
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let idx = LevelIndices::new_unchecked(0, 1, vec![0, 5]);
        assert!(matches!(
            transpose_indices(&idx, 4),
            Err(Error::IndexOutOfRange { index: 5, bound: 4 })
        ));
    }

    #[test]
    fn atomic_and_reduced_counts_agree() {
        let flat: Vec<u32> = (0..200u32)
            .flat_map(|i| {
                let mut row = vec![i % 17, (i * 7 + 3) % 17, (i * 13 + 5) % 17];
                row.sort_unstable();
                row.dedup();
                while row.len() < 3 {
                    let next = (row.last().unwrap() + 1) % 17;
                    if !row.contains(&next) {
                        row.push(next);
                    }
                    row.sort_unstable();
                }
                row
            })
            .collect();
        let idx = table(3, flat, 17);
        assert_eq!(count_atomic(&idx, 17), count_reduce(&idx, 17));
        assert_eq!(count_atomic(&idx, 17).iter().sum::<usize>(), 600);
    }

    #[test]
    fn from_parts_checks_offsets() {
        assert!(TransposedIndices::from_parts(vec![0, 1], vec![0, 2]).is_ok());
        assert!(TransposedIndices::from_parts(vec![0, 1], vec![0, 3]).is_err());
        assert!(TransposedIndices::from_parts(vec![0, 1], vec![1, 2]).is_err());
    }
}
