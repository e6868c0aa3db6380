//! KV-enriched block-sparse attention forward.

use crate::config::{effective_block_count, ReweightMode, ValidatedConfig};
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, FeatureMatrix};
use crate::par;
use crate::pyramid::Pyramid;
use crate::selection::SelectionResult;
use crate::Real;

/// One key/value block a fine query block attends to: `block` indexes the
/// `B`-token blocks of pyramid level `level`, and `weight = B^level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub level: u32,
    pub block: u32,
    pub weight: Real,
}

/// Per fine query block, the enriched KV block list in canonical order
/// (level ascending, block ascending within a level).
#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedKvPlan {
    block_size: usize,
    per_block: usize,
    entries: Vec<PlanEntry>,
}

impl EnrichedKvPlan {
    /// Builds a plan from explicit entries, `per_block` consecutive entries per
    /// fine query block. Entry order is kept as given.
    pub fn from_entries(block_size: usize, per_block: usize, entries: Vec<PlanEntry>) -> Result<Self> {
        if per_block == 0 || !entries.len().is_multiple_of(per_block) {
            return Err(Error::ShapeMismatch(format!(
                "{} plan entries do not split into rows of {per_block}",
                entries.len()
            )));
        }
        Ok(Self {
            block_size,
            per_block,
            entries,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Entries per fine query block.
    pub fn per_block(&self) -> usize {
        self.per_block
    }

    pub fn n_query_blocks(&self) -> usize {
        self.entries.len() / self.per_block
    }

    #[inline]
    pub fn block(&self, i: usize) -> &[PlanEntry] {
        &self.entries[i * self.per_block..(i + 1) * self.per_block]
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    /// Query-key logits the forward evaluates: `N * per_block * B`.
    pub fn score_evaluations(&self) -> u64 {
        (self.entries.len() * self.block_size * self.block_size) as u64
    }

    /// Highest level referenced by any entry.
    pub fn max_level(&self) -> usize {
        self.entries.iter().map(|e| e.level as usize).max().unwrap_or(0)
    }
}

/// Expands a selection into the enriched KV plan. Fine block `i` takes the
/// level-`l` row `i / B^l` for every `l <= L_e` below `L`, plus every
/// coarsest block when `L_e = L`.
pub fn build_plan(sel: &SelectionResult, cfg: &ValidatedConfig) -> Result<EnrichedKvPlan> {
    let (b, l_max, le) = (cfg.block_size(), cfg.levels(), cfg.enrich_levels());
    if sel.per_level.len() != l_max {
        return Err(Error::ShapeMismatch(format!(
            "selection has {} levels, config {l_max}",
            sel.per_level.len()
        )));
    }
    for (l, table) in sel.per_level.iter().enumerate() {
        if table.rows() != cfg.blocks_at(l) || table.k() != cfg.top_k() {
            return Err(Error::ShapeMismatch(format!(
                "level {l} table is {}x{}",
                table.rows(),
                table.k()
            )));
        }
    }
    let per_block = effective_block_count(cfg);
    let fine_blocks = cfg.fine_blocks();
    let mut entries = Vec::with_capacity(fine_blocks * per_block);
    for i in 0..fine_blocks {
        for l in 0..=le {
            let weight = cfg.pow(l) as Real;
            if l < l_max {
                let row = sel.per_level[l].row(i / cfg.pow(l));
                entries.extend(row.iter().map(|&block| PlanEntry {
                    level: l as u32,
                    block,
                    weight,
                }));
            } else {
                entries.extend((0..cfg.blocks_at(l)).map(|block| PlanEntry {
                    level: l as u32,
                    block: block as u32,
                    weight,
                }));
            }
        }
    }
    EnrichedKvPlan::from_entries(b, per_block, entries)
}

/// Forward outputs plus what the backward needs to rebuild probabilities.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub output: FeatureMatrix,
    /// Running maximum of each row's logits (0 when safe softmax is off).
    pub row_max: Vec<Real>,
    /// Softmax normalizer relative to `row_max`.
    pub row_denom: Vec<Real>,
    pub(crate) fingerprint: u64,
}

impl ForwardState {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// FNV-1a over shapes, config, plan and the bit patterns of Q, K, V.
pub(crate) fn fingerprint(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    plan: &EnrichedKvPlan,
    cfg: &ValidatedConfig,
) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for byte in x.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for m in [q, k, v] {
        eat(m.rows() as u64);
        eat(m.cols() as u64);
    }
    eat(cfg.block_size() as u64);
    eat(cfg.top_k() as u64);
    eat(cfg.levels() as u64);
    eat(cfg.enrich_levels() as u64);
    eat(cfg.scale().to_bits() as u64);
    eat(cfg.reweight_mode() as u64);
    eat(cfg.safe_softmax() as u64);
    for e in plan.entries() {
        eat(((e.level as u64) << 32) | e.block as u64);
    }
    for m in [q, k, v] {
        for x in m.as_slice() {
            eat(x.to_bits() as u64);
        }
    }
    h
}

/// Logit transform for one plan entry: `logit = mul * (q . k) + add`, and
/// values enter the accumulator multiplied by `value_mul`.
#[derive(Clone, Copy)]
pub(crate) struct EntryWeights {
    pub mul: Real,
    pub add: Real,
    pub value_mul: Real,
}

impl EntryWeights {
    #[inline]
    pub(crate) fn new(mode: ReweightMode, scale: Real, weight: Real) -> Self {
        match mode {
            ReweightMode::ScaleKv => Self {
                mul: scale * weight,
                add: 0.0,
                value_mul: weight,
            },
            ReweightMode::LogitBias => Self {
                mul: scale,
                add: weight.ln(),
                value_mul: 1.0,
            },
        }
    }
}

/// `ln(EPSILON^2)`: below this, `exp(s - row_max)` cannot move a sum that
/// already holds the row's largest term.
#[cfg(not(feature = "single-precision"))]
pub(crate) const EXP_CUTOFF: Real = -72.087_306_778_234_3;
#[cfg(feature = "single-precision")]
pub(crate) const EXP_CUTOFF: Real = -31.884_77;

/// `exp(x)` for a logit measured from its row maximum. Negligible terms are
/// flushed to zero so they never reach the subnormal range. Without a
/// subtracted maximum (`relative == false`) this is a plain `exp`.
#[inline]
pub(crate) fn softmax_exp(x: Real, relative: bool) -> Real {
    if relative && x < EXP_CUTOFF {
        0.0
    } else {
        x.exp()
    }
}

pub(crate) fn check_inputs(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    pyr_k: &Pyramid,
    pyr_v: &Pyramid,
    plan: &EnrichedKvPlan,
    cfg: &ValidatedConfig,
) -> Result<()> {
    let (n, d) = (cfg.n(), cfg.d());
    for (name, m) in [("q", q), ("k", k), ("v", v)] {
        if m.rows() != n || m.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "{name} is {}x{}, expected {n}x{d}",
                m.rows(),
                m.cols()
            )));
        }
    }
    for (name, p, base) in [("key", pyr_k, k), ("value", pyr_v, v)] {
        if p.depth() < plan.max_level() || p.block_size() != cfg.block_size() || p.level(0) != base {
            return Err(Error::ShapeMismatch(format!(
                "{name} pyramid was not built from the given {name}s"
            )));
        }
    }
    if plan.block_size() != cfg.block_size() || plan.n_query_blocks() != cfg.fine_blocks() {
        return Err(Error::ShapeMismatch("plan does not match the config".into()));
    }
    Ok(())
}

/// Streaming-softmax attention of every fine query block over its plan.
///
/// For each query row the recurrence keeps a running max `m`, denominator
/// `l` and unnormalized output. Each plan entry contributes one tile of `B`
/// keys: `m' = max(m, max logits)`, then both accumulators are rescaled by
/// `exp(m - m')` before adding `exp(logit - m')` weighted values.
pub fn llsa_forward(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    pyr_k: &Pyramid,
    pyr_v: &Pyramid,
    plan: &EnrichedKvPlan,
    cfg: &ValidatedConfig,
) -> Result<ForwardState> {
    check_inputs(q, k, v, pyr_k, pyr_v, plan, cfg)?;
    let (n, d, b) = (cfg.n(), cfg.d(), cfg.block_size());
    let (mode, scale, safe) = (cfg.reweight_mode(), cfg.scale(), cfg.safe_softmax());

    let mut out = vec![0.0 as Real; n * d];
    let mut row_max = vec![0.0 as Real; n];
    let mut row_denom = vec![0.0 as Real; n];
    par::for_each_chunk_triple_mut(
        &mut out,
        b * d,
        &mut row_max,
        b,
        &mut row_denom,
        b,
        |i, out, maxes, denoms| {
            let entries = plan.block(i);
            let mut logits = vec![0.0 as Real; b];
            for r in 0..b {
                let qr = q.row(i * b + r);
                let acc = &mut out[r * d..(r + 1) * d];
                let mut m = if safe { Real::NEG_INFINITY } else { 0.0 };
                let mut den = 0.0 as Real;
                for e in entries {
                    let w = EntryWeights::new(mode, scale, e.weight);
                    let level = e.level as usize;
                    let first = e.block as usize * b;
                    let keys = pyr_k.level(level);
                    let values = pyr_v.level(level);
                    let mut tile_max = Real::NEG_INFINITY;
                    for (c, s) in logits.iter_mut().enumerate() {
                        *s = w.mul * dot(qr, keys.row(first + c)) + w.add;
                        tile_max = tile_max.max(*s);
                    }
                    if safe && tile_max > m {
                        let alpha = softmax_exp(m - tile_max, true);
                        for a in acc.iter_mut() {
                            *a *= alpha;
                        }
                        den *= alpha;
                        m = tile_max;
                    }
                    for (c, s) in logits.iter().enumerate() {
                        let p = softmax_exp(s - m, safe);
                        den += p;
                        axpy(acc, p * w.value_mul, values.row(first + c));
                    }
                }
                let inv = 1.0 / den;
                for a in acc.iter_mut() {
                    *a *= inv;
                }
                maxes[r] = m;
                denoms[r] = den;
            }
        },
    );

    if let Some(t) = row_denom.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::NonFinite { row: t, col: 0 });
    }
    let output = FeatureMatrix::from_vec_unchecked(n, d, out);
    output.check_finite()?;
    Ok(ForwardState {
        output,
        row_max,
        row_denom,
        fingerprint: fingerprint(q, k, v, plan, cfg),
    })
}
