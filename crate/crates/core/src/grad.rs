//! Mask-free backward pass.
//!
//! Probabilities are recomputed from the saved row max and denominator.
//! `dQ` is query-major like the forward. `dK`/`dV` are key-major: each key
//! block walks the query blocks listed in its transposed segment, so no
//! worker ever writes another block's gradient rows and no dense mask is
//! built. Coarse-level key/value gradients are accumulated on the pooled
//! tokens and spread back to the fine tokens through the pooling adjoint.

use std::ops::Range;

use crate::attention::{check_inputs, fingerprint, softmax_exp, EnrichedKvPlan, EntryWeights, ForwardState};
use crate::config::{ReweightMode, ValidatedConfig};
use crate::error::{Error, Result};
use crate::indexmap::TransposedIndices;
use crate::matrix::{axpy, dot, FeatureMatrix};
use crate::par;
use crate::pyramid::{pool_backward, Pyramid};
use crate::Real;

/// Gradients of the loss with respect to the fine Q, K, V.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub dq: FeatureMatrix,
    pub dk: FeatureMatrix,
    pub dv: FeatureMatrix,
}

impl GradientSet {
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.dq
            .max_abs_diff(&other.dq)
            .max(self.dk.max_abs_diff(&other.dk))
            .max(self.dv.max_abs_diff(&other.dv))
    }
}

/// Read-only state shared by every backward kernel.
struct Ctx<'a> {
    q: &'a FeatureMatrix,
    d_out: &'a FeatureMatrix,
    saved: &'a ForwardState,
    delta: &'a [Real],
    pyr_k: &'a Pyramid,
    pyr_v: &'a Pyramid,
    mode: ReweightMode,
    scale: Real,
    safe: bool,
    b: usize,
}

impl<'a> Ctx<'a> {
    fn new(
        q: &'a FeatureMatrix,
        d_out: &'a FeatureMatrix,
        saved: &'a ForwardState,
        delta: &'a [Real],
        pyr_k: &'a Pyramid,
        pyr_v: &'a Pyramid,
        cfg: &ValidatedConfig,
    ) -> Self {
        Self {
            q,
            d_out,
            saved,
            delta,
            pyr_k,
            pyr_v,
            mode: cfg.reweight_mode(),
            scale: cfg.scale(),
            safe: cfg.safe_softmax(),
            b: cfg.block_size(),
        }
    }

    /// `(p, ds)` for query token `t` against key token `c` of `level`.
    #[inline]
    fn prob_and_dlogit(&self, t: usize, level: usize, c: usize, w: EntryWeights) -> (Real, Real) {
        let s = w.mul * dot(self.q.row(t), self.pyr_k.level(level).row(c)) + w.add;
        let p = softmax_exp(s - self.saved.row_max[t], self.safe) / self.saved.row_denom[t];
        let dp = w.value_mul * dot(self.d_out.row(t), self.pyr_v.level(level).row(c));
        (p, p * (dp - self.delta[t]))
    }

    /// Accumulates one key block's `dK'`, `dV'` (gradients with respect to the
    /// unweighted key/value tokens as they enter the logits) over the given
    /// fine query token ranges.
    fn key_block(
        &self,
        level: usize,
        key_block: usize,
        weight: Real,
        tokens: impl Iterator<Item = Range<usize>>,
        dk: &mut [Real],
        dv: &mut [Real],
    ) {
        let d = self.q.cols();
        let w = EntryWeights::new(self.mode, self.scale, weight);
        let first = key_block * self.b;
        for range in tokens {
            for t in range {
                let qt = self.q.row(t);
                let dot_t = self.d_out.row(t);
                for c in 0..self.b {
                    let (p, ds) = self.prob_and_dlogit(t, level, first + c, w);
                    axpy(&mut dk[c * d..(c + 1) * d], ds * self.scale, qt);
                    axpy(&mut dv[c * d..(c + 1) * d], p, dot_t);
                }
            }
        }
    }
}

/// Adds the pooling adjoint of a level-`hops` gradient, after the reweighting
/// factor, into `dst`.
fn fold_coarse(dst: &mut FeatureMatrix, coarse: &FeatureMatrix, b: usize, hops: usize, weight: Real) {
    let spread = pool_backward(&coarse.scaled(weight), b, hops);
    for (x, y) in dst.as_mut_slice().iter_mut().zip(spread.as_slice()) {
        *x += y;
    }
}

#[allow(clippy::too_many_arguments)]
fn check_backward_inputs(
    d_out: &FeatureMatrix,
    saved: &ForwardState,
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    pyr_k: &Pyramid,
    pyr_v: &Pyramid,
    plan: &EnrichedKvPlan,
    transposed: &[TransposedIndices],
    cfg: &ValidatedConfig,
) -> Result<()> {
    check_inputs(q, k, v, pyr_k, pyr_v, plan, cfg)?;
    if !d_out.same_shape(q) || !saved.output.same_shape(q) || saved.row_max.len() != cfg.n() {
        return Err(Error::ShapeMismatch(
            "cotangent or saved state has the wrong shape".into(),
        ));
    }
    if saved.fingerprint != fingerprint(q, k, v, plan, cfg) {
        return Err(Error::StaleState);
    }
    let selected_levels = (cfg.enrich_levels() + 1).min(cfg.levels());
    if transposed.len() < selected_levels {
        return Err(Error::ShapeMismatch(format!(
            "{} transposed levels, need {selected_levels}",
            transposed.len()
        )));
    }
    for (l, t) in transposed.iter().take(selected_levels).enumerate() {
        if t.n_key_blocks() != cfg.blocks_at(l) || t.flat_queries().len() != cfg.blocks_at(l) * cfg.top_k() {
            return Err(Error::ShapeMismatch(format!("transposed level {l} has the wrong size")));
        }
    }
    Ok(())
}

/// `D = rowsum(dO * O)`
fn row_deltas(d_out: &FeatureMatrix, output: &FeatureMatrix) -> Vec<Real> {
    par::map_collect(d_out.rows(), |t| dot(d_out.row(t), output.row(t)))
}

fn query_grads(ctx: &Ctx<'_>, plan: &EnrichedKvPlan) -> FeatureMatrix {
    let (n, d, b) = (ctx.q.rows(), ctx.q.cols(), ctx.b);
    let mut dq = vec![0.0 as Real; n * d];
    par::for_each_chunk_mut(&mut dq, b * d, |i, out| {
        for e in plan.block(i) {
            let w = EntryWeights::new(ctx.mode, ctx.scale, e.weight);
            let level = e.level as usize;
            let first = e.block as usize * b;
            let keys = ctx.pyr_k.level(level);
            for r in 0..b {
                let t = i * b + r;
                let acc = &mut out[r * d..(r + 1) * d];
                for c in first..first + b {
                    let (_, ds) = ctx.prob_and_dlogit(t, level, c, w);
                    axpy(acc, ds * w.mul, keys.row(c));
                }
            }
        }
    });
    FeatureMatrix::from_vec_unchecked(n, d, dq)
}

fn key_value_grads(
    ctx: &Ctx<'_>,
    transposed: &[TransposedIndices],
    cfg: &ValidatedConfig,
) -> (FeatureMatrix, FeatureMatrix) {
    let (n, d, b) = (cfg.n(), cfg.d(), cfg.block_size());
    let (l_max, le) = (cfg.levels(), cfg.enrich_levels());
    let mut dk = FeatureMatrix::zeros(n, d);
    let mut dv = FeatureMatrix::zeros(n, d);
    for l in 0..=le {
        let weight = cfg.pow(l) as Real;
        let rows = cfg.tokens_at(l);
        let mut dk_l = vec![0.0 as Real; rows * d];
        let mut dv_l = vec![0.0 as Real; rows * d];
        let span = cfg.pow(l + 1);
        par::for_each_chunk_pair_mut(&mut dk_l, b * d, &mut dv_l, b * d, |kb, dk_c, dv_c| {
            if l < l_max {
                // Level-l query block j covers fine tokens j*B^(l+1)..(j+1)*B^(l+1).
                let ranges = transposed[l]
                    .segment(kb)
                    .iter()
                    .map(|&j| j as usize * span..(j as usize + 1) * span);
                ctx.key_block(l, kb, weight, ranges, dk_c, dv_c);
            } else {
                ctx.key_block(l, kb, weight, std::iter::once(0..n), dk_c, dv_c);
            }
        });
        let dk_l = FeatureMatrix::from_vec_unchecked(rows, d, dk_l);
        let dv_l = FeatureMatrix::from_vec_unchecked(rows, d, dv_l);
        if l == 0 {
            dk = dk_l;
            dv = dv_l;
        } else {
            // ScaleKv used W*k and W*v in the forward.
            let chain = match ctx.mode {
                ReweightMode::ScaleKv => weight,
                ReweightMode::LogitBias => 1.0,
            };
            fold_coarse(&mut dk, &dk_l, b, l, chain);
            fold_coarse(&mut dv, &dv_l, b, l, chain);
        }
    }
    (dk, dv)
}

/// Backward of [`llsa_forward`](crate::llsa_forward). Top-K indices are
/// constants; gradients reach coarse keys/values and, through pooling, the
/// fine ones.
#[allow(clippy::too_many_arguments)]
pub fn llsa_backward(
    d_out: &FeatureMatrix,
    saved: &ForwardState,
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    pyr_k: &Pyramid,
    pyr_v: &Pyramid,
    plan: &EnrichedKvPlan,
    transposed: &[TransposedIndices],
    cfg: &ValidatedConfig,
) -> Result<GradientSet> {
    check_backward_inputs(d_out, saved, q, k, v, pyr_k, pyr_v, plan, transposed, cfg)?;
    let delta = row_deltas(d_out, &saved.output);
    let ctx = Ctx::new(q, d_out, saved, &delta, pyr_k, pyr_v, cfg);
    let dq = query_grads(&ctx, plan);
    let (dk, dv) = key_value_grads(&ctx, transposed, cfg);
    let grads = GradientSet { dq, dk, dv };
    grads.dq.check_finite()?;
    grads.dk.check_finite()?;
    grads.dv.check_finite()?;
    Ok(grads)
}

/// Only the key/value half of [`llsa_backward`] (the key-major CSC path).
#[allow(clippy::too_many_arguments)]
pub fn llsa_kv_backward(
    d_out: &FeatureMatrix,
    saved: &ForwardState,
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    pyr_k: &Pyramid,
    pyr_v: &Pyramid,
    plan: &EnrichedKvPlan,
    transposed: &[TransposedIndices],
    cfg: &ValidatedConfig,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    check_backward_inputs(d_out, saved, q, k, v, pyr_k, pyr_v, plan, transposed, cfg)?;
    let delta = row_deltas(d_out, &saved.output);
    let ctx = Ctx::new(q, d_out, saved, &delta, pyr_k, pyr_v, cfg);
    Ok(key_value_grads(&ctx, transposed, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LlsaConfig;
    use crate::pipeline::Llsa;
    use crate::tensorio::{gen_random, Distribution};

    fn inputs(n: usize, d: usize, seed: u64) -> [FeatureMatrix; 3] {
        [0, 1, 2].map(|i| gen_random(n, d, seed * 3 + i, Distribution::StdNormal))
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let cfg = LlsaConfig::new(128, 4, 4, 2, 2).validate().unwrap();
        let [q, k, v] = inputs(128, 4, 1);
        let llsa = Llsa::prepare(&q, &k, &v, &cfg).unwrap();
        let saved = llsa.forward().unwrap();
        let g = llsa.backward(&FeatureMatrix::zeros(128, 4), &saved).unwrap();
        for m in [&g.dq, &g.dk, &g.dv] {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn stale_state_is_detected() {
        let cfg = LlsaConfig::new(64, 2, 2, 2, 2).validate().unwrap();
        let [q, k, v] = inputs(64, 2, 2);
        let llsa = Llsa::prepare(&q, &k, &v, &cfg).unwrap();
        let saved = llsa.forward().unwrap();
        let v2 = gen_random(64, 2, 77, Distribution::StdNormal);
        let other = Llsa::prepare(&q, &k, &v2, &cfg).unwrap();
        let d_out = gen_random(64, 2, 5, Distribution::StdNormal);
        assert!(matches!(other.backward(&d_out, &saved), Err(Error::StaleState)));
        assert!(matches!(
            llsa.backward(&FeatureMatrix::zeros(64, 3), &saved),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            llsa.backward_with(&d_out, &saved, &[]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn scale_kv_weight_and_pool_factors_cancel() {
        // W * (1 / B^l) = 1: folding with the weight must equal a plain broadcast.
        let (b, hops) = (4usize, 2usize);
        let coarse = gen_random(3, 5, 8, Distribution::StdNormal);
        let weight = b.pow(hops as u32) as Real;
        let mut folded = FeatureMatrix::zeros(3 * 16, 5);
        fold_coarse(&mut folded, &coarse, b, hops, weight);
        let broadcast = FeatureMatrix::from_fn(48, 5, |r, c| coarse.get(r / 16, c));
        assert!(folded.max_abs_diff(&broadcast) <= 1e-15 * coarse.max_abs().max(1.0));
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = LlsaConfig::new(256, 8, 4, 2, 2).validate().unwrap();
        let [q, k, v] = inputs(256, 8, 3);
        let d_out = gen_random(256, 8, 4, Distribution::StdNormal);
        let run = || {
            let llsa = Llsa::prepare(&q, &k, &v, &cfg).unwrap();
            let saved = llsa.forward().unwrap();
            llsa.backward(&d_out, &saved).unwrap()
        };
        assert_eq!(run(), run());
    }
}
