//! Oracle-equivalence suite behind `llsa verify`.

use anyhow::Result;
use llsa::oracle::{effective_attention, mask_backward, mask_transpose};
use llsa::{FeatureMatrix, Llsa, TransposedIndices, ValidatedConfig};
use serde::Serialize;

/// Worst error of one named check over all instances.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// One seeded or file-backed problem instance.
pub struct Instance {
    pub label: String,
    pub q: FeatureMatrix,
    pub k: FeatureMatrix,
    pub v: FeatureMatrix,
    pub d_out: FeatureMatrix,
}

/// Replaces one query index in the first non-empty segment, so the
/// transposition no longer matches its Top-K table.
fn corrupt(t: &TransposedIndices, n_queries: usize) -> Result<TransposedIndices> {
    let mut flat = t.flat_queries().to_vec();
    if let Some(first) = flat.first_mut() {
        *first = ((*first as usize + 1) % n_queries.max(2)) as u32;
    }
    Ok(TransposedIndices::from_parts(flat, t.offsets().to_vec())?)
}

/// Mismatch count between a transposition and the mask reference, plus the
/// pair-multiset round trip back to the Top-K table.
fn transpose_mismatches(table: &llsa::LevelIndices, fast: &TransposedIndices, n_key_blocks: usize) -> Result<f64> {
    let slow = mask_transpose(table, n_key_blocks)?;
    let mut bad = 0usize;
    if fast.offsets() != slow.offsets() {
        bad += 1;
    }
    bad += fast
        .flat_queries()
        .iter()
        .zip(slow.flat_queries())
        .filter(|(a, b)| a != b)
        .count();
    let mut there: Vec<(u32, u32)> = (0..table.rows())
        .flat_map(|q| table.row(q).iter().map(move |&kb| (q as u32, kb)))
        .collect();
    let mut back = fast.pairs();
    there.sort_unstable();
    back.sort_unstable();
    if there != back {
        bad += 1;
    }
    Ok(bad as f64)
}

pub fn run(cfg: &ValidatedConfig, instances: &[Instance], corrupt_index: bool) -> Result<Vec<CheckResult>> {
    let tol = llsa::oracle_tolerance();
    let mut forward: f64 = 0.0;
    let mut transpose: f64 = 0.0;
    let mut backward: f64 = 0.0;
    for inst in instances {
        let llsa = Llsa::prepare(&inst.q, &inst.k, &inst.v, cfg)?;
        let saved = llsa.forward()?;
        let reference = effective_attention(&inst.q, &inst.k, &inst.v, &llsa.pyr_k, &llsa.pyr_v, &llsa.plan, cfg)?;
        forward = forward.max(saved.output.max_abs_diff(&reference));

        let mut transposed = llsa.transposed()?;
        if corrupt_index {
            transposed[0] = corrupt(&transposed[0], llsa.selection.per_level[0].rows())?;
        }
        for (l, (table, t)) in llsa.selection.per_level.iter().zip(&transposed).enumerate() {
            transpose = transpose.max(transpose_mismatches(table, t, cfg.tokens_at(l + 1))?);
        }

        let grads = llsa.backward(&inst.d_out, &saved)?;
        let masked = mask_backward(&inst.d_out, &inst.q, &inst.k, &inst.v, &llsa.selection, cfg)?;
        backward = backward.max(grads.max_abs_diff(&masked));
    }
    let check = |name, max_error: f64, tolerance: f64| CheckResult {
        name,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    };
    Ok(vec![
        check("forward-oracle", forward, tol),
        check("transpose-roundtrip", transpose, 0.0),
        check("backward-oracle", backward, tol),
    ])
}
