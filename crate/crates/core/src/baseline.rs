//! Mask-based key/value backward, the approach the transposed indices replace.
//!
//! For every level a dense `T x T_l` byte mask (fine query blocks by level-`l`
//! key blocks) is materialized from the selection, and each key block scans
//! its whole mask column to find the query blocks it must accumulate. Building
//! and scanning the masks costs `O(T^2)` per level on top of the useful work.

use crate::attention::{softmax_exp, ForwardState};
use crate::config::{ReweightMode, ValidatedConfig};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::par;
use crate::pyramid::Pyramid;
use crate::selection::SelectionResult;
use crate::Real;

/// Dense block masks for levels `0..=L_e`; `masks[l][i * T_l + b]` is 1 when
/// fine query block `i` attends level-`l` key block `b`.
pub fn build_masks(sel: &SelectionResult, cfg: &ValidatedConfig) -> Vec<Vec<u8>> {
    let t = cfg.fine_blocks();
    (0..=cfg.enrich_levels())
        .map(|l| {
            let t_l = cfg.blocks_at(l);
            let mut mask = vec![0u8; t * t_l];
            if l == cfg.levels() {
                mask.fill(1);
            } else {
                let group = cfg.pow(l);
                for i in 0..t {
                    for &b in sel.per_level[l].row(i / group) {
                        mask[i * t_l + b as usize] = 1;
                    }
                }
            }
            mask
        })
        .collect()
}

/// `dK`, `dV` via dense masks, reusing the forward's saved row statistics.
pub fn mask_kv_backward(
    d_out: &FeatureMatrix,
    saved: &ForwardState,
    q: &FeatureMatrix,
    pyr_k: &Pyramid,
    pyr_v: &Pyramid,
    sel: &SelectionResult,
    cfg: &ValidatedConfig,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (n, d, b) = (cfg.n(), cfg.d(), cfg.block_size());
    if !d_out.same_shape(q) || q.rows() != n || q.cols() != d || saved.row_max.len() != n {
        return Err(Error::ShapeMismatch("mask backward inputs".into()));
    }
    let scale = cfg.scale();
    let mode = cfg.reweight_mode();
    let safe = cfg.safe_softmax();
    let delta: Vec<Real> = (0..n)
        .map(|t| d_out.row(t).iter().zip(saved.output.row(t)).map(|(a, b)| a * b).sum())
        .collect();
    let masks = build_masks(sel, cfg);
    let t_fine = cfg.fine_blocks();

    let mut dk = vec![0.0 as Real; n * d];
    let mut dv = vec![0.0 as Real; n * d];
    for (l, mask) in masks.iter().enumerate() {
        let w = cfg.pow(l) as Real;
        let (mul, add, vmul) = match mode {
            ReweightMode::ScaleKv => (scale * w, 0.0, w),
            ReweightMode::LogitBias => (scale, w.ln(), 1.0),
        };
        let t_l = cfg.blocks_at(l);
        let keys = pyr_k.level(l);
        let values = pyr_v.level(l);
        let mut dk_l = vec![0.0 as Real; t_l * b * d];
        let mut dv_l = vec![0.0 as Real; t_l * b * d];
        par::for_each_chunk_pair_mut(&mut dk_l, b * d, &mut dv_l, b * d, |kb, dk_c, dv_c| {
            for i in 0..t_fine {
                if mask[i * t_l + kb] == 0 {
                    continue;
                }
                for t in i * b..(i + 1) * b {
                    let qt = q.row(t);
                    let go = d_out.row(t);
                    for c in 0..b {
                        let key = keys.row(kb * b + c);
                        let val = values.row(kb * b + c);
                        let s: Real = mul * qt.iter().zip(key).map(|(x, y)| x * y).sum::<Real>() + add;
                        let p = softmax_exp(s - saved.row_max[t], safe) / saved.row_denom[t];
                        let dp: Real = vmul * go.iter().zip(val).map(|(x, y)| x * y).sum::<Real>();
                        let ds = p * (dp - delta[t]);
                        for j in 0..d {
                            dk_c[c * d + j] += ds * mul * qt[j];
                            dv_c[c * d + j] += p * vmul * go[j];
                        }
                    }
                }
            }
        });
        // Spread level-l rows uniformly over their B^l fine tokens.
        let group = cfg.pow(l);
        let inv = 1.0 / group as Real;
        for t in 0..n {
            let src = t / group;
            for j in 0..d {
                dk[t * d + j] += dk_l[src * d + j] * inv;
                dv[t * d + j] += dv_l[src * d + j] * inv;
            }
        }
    }
    Ok((
        FeatureMatrix::from_vec_unchecked(n, d, dk),
        FeatureMatrix::from_vec_unchecked(n, d, dv),
    ))
}
