//! Slow, independent references. Every routine here materializes dense
//! intermediates with plain loops and shares no kernel with the fast path.
//! All of them refuse sequences longer than [`ORACLE_CAP`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod dd;

use dd::Dd;

use crate::attention::EnrichedKvPlan;
use crate::config::{ReweightMode, ValidatedConfig};
use crate::error::{Error, Result};
use crate::grad::GradientSet;
use crate::indexmap::TransposedIndices;
use crate::matrix::FeatureMatrix;
use crate::pipeline::Llsa;
use crate::pyramid::Pyramid;
use crate::selection::{LevelIndices, SelectionResult};
use crate::Real;

pub const ORACLE_CAP: usize = 2048;

/// Default central-difference step for double precision.
pub const FD_STEP: Real = 1e-6;

/// Denominator floor of the relative error in [`GradCheckReport`]; gradient
/// entries smaller than this are compared in absolute terms.
pub const FD_REL_FLOOR: f64 = 1e-3;

fn cap(n: usize) -> Result<()> {
    if n > ORACLE_CAP {
        return Err(Error::OracleSizeCap { n, cap: ORACLE_CAP });
    }
    Ok(())
}

fn plain_dot(a: &[Real], b: &[Real]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Dense row-softmax of `scale * Q K^T`, `N x N`, computed in f64.
pub fn dense_probabilities(q: &FeatureMatrix, k: &FeatureMatrix, scale: Real) -> Result<Vec<Vec<f64>>> {
    cap(q.rows().max(k.rows()))?;
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch("q/k feature dims differ".into()));
    }
    Ok((0..q.rows())
        .map(|i| {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| scale as f64 * plain_dot(q.row(i), k.row(j)))
                .collect();
            softmax(&logits)
        })
        .collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `softmax(scale * Q K^T) V` with the full score matrix.
pub fn dense_attention(q: &FeatureMatrix, k: &FeatureMatrix, v: &FeatureMatrix, scale: Real) -> Result<FeatureMatrix> {
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch("k/v row counts differ".into()));
    }
    let p = dense_probabilities(q, k, scale)?;
    Ok(FeatureMatrix::from_fn(q.rows(), v.cols(), |i, c| {
        p[i].iter()
            .enumerate()
            .map(|(j, pij)| pij * v.get(j, c) as f64)
            .sum::<f64>() as Real
    }))
}

/// Analytic gradients of `<dense_attention(q, k, v), d_out>`.
pub fn dense_attention_backward(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    scale: Real,
    d_out: &FeatureMatrix,
) -> Result<GradientSet> {
    let p = dense_probabilities(q, k, scale)?;
    let (n, m, d) = (q.rows(), k.rows(), q.cols());
    let mut dq = vec![0.0f64; n * d];
    let mut dk = vec![0.0f64; m * d];
    let mut dv = vec![0.0f64; m * d];
    for i in 0..n {
        let dp: Vec<f64> = (0..m).map(|j| plain_dot(d_out.row(i), v.row(j))).collect();
        let dsum: f64 = (0..m).map(|j| p[i][j] * dp[j]).sum();
        for j in 0..m {
            let ds = p[i][j] * (dp[j] - dsum) * scale as f64;
            for c in 0..d {
                dq[i * d + c] += ds * k.get(j, c) as f64;
                dk[j * d + c] += ds * q.get(i, c) as f64;
                dv[j * d + c] += p[i][j] * d_out.get(i, c) as f64;
            }
        }
    }
    let to = |rows, x: Vec<f64>| FeatureMatrix::from_fn(rows, d, |r, c| x[r * d + c] as Real);
    Ok(GradientSet {
        dq: to(n, dq),
        dk: to(m, dk),
        dv: to(m, dv),
    })
}

/// Reference forward: for each fine query block, materialize the enriched key
/// and value lists of its plan, apply the reweighting explicitly and run a
/// two-pass softmax.
pub fn effective_attention(
    q: &FeatureMatrix,
    _k: &FeatureMatrix,
    _v: &FeatureMatrix,
    pyr_k: &Pyramid,
    pyr_v: &Pyramid,
    plan: &EnrichedKvPlan,
    cfg: &ValidatedConfig,
) -> Result<FeatureMatrix> {
    cap(cfg.n())?;
    let (n, d, b) = (cfg.n(), cfg.d(), cfg.block_size());
    if q.rows() != n || q.cols() != d || plan.n_query_blocks() * b != n {
        return Err(Error::ShapeMismatch("effective attention inputs".into()));
    }
    let scale = cfg.scale() as f64;
    let mut out = FeatureMatrix::zeros(n, d);
    for i in 0..plan.n_query_blocks() {
        let mut keys: Vec<Vec<f64>> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        let mut bias: Vec<f64> = Vec::new();
        for e in plan.block(i) {
            let w = e.weight as f64;
            let level = e.level as usize;
            for c in 0..b {
                let row = e.block as usize * b + c;
                let key = pyr_k.level(level).row(row).iter().map(|&x| x as f64);
                let val = pyr_v.level(level).row(row).iter().map(|&x| x as f64);
                match cfg.reweight_mode() {
                    ReweightMode::ScaleKv => {
                        keys.push(key.map(|x| x * w).collect());
                        values.push(val.map(|x| x * w).collect());
                        bias.push(0.0);
                    }
                    ReweightMode::LogitBias => {
                        keys.push(key.collect());
                        values.push(val.collect());
                        bias.push(w.ln());
                    }
                }
            }
        }
        for t in i * b..(i + 1) * b {
            let qt: Vec<f64> = q.row(t).iter().map(|&x| x as f64).collect();
            let logits: Vec<f64> = keys
                .iter()
                .zip(&bias)
                .map(|(key, bi)| scale * qt.iter().zip(key).map(|(a, c)| a * c).sum::<f64>() + bi)
                .collect();
            let p = softmax(&logits);
            for c in 0..d {
                let o: f64 = p.iter().zip(&values).map(|(pj, vj)| pj * vj[c]).sum();
                out.set(t, c, o as Real);
            }
        }
    }
    Ok(out)
}

/// Transposition through a dense `T x T_k` boolean mask read column by column.
pub fn mask_transpose(idx: &LevelIndices, n_key_blocks: usize) -> Result<TransposedIndices> {
    let t = idx.rows();
    let mut mask = vec![false; t * n_key_blocks];
    for i in 0..t {
        for &b in idx.row(i) {
            if b as usize >= n_key_blocks {
                return Err(Error::IndexOutOfRange {
                    index: b as usize,
                    bound: n_key_blocks,
                });
            }
            mask[i * n_key_blocks + b as usize] = true;
        }
    }
    let mut flat = Vec::with_capacity(t * idx.k());
    let mut offsets = vec![0usize];
    for b in 0..n_key_blocks {
        for i in 0..t {
            if mask[i * n_key_blocks + b] {
                flat.push(i as u32);
            }
        }
        offsets.push(flat.len());
    }
    TransposedIndices::from_parts(flat, offsets)
}

fn mean_pool_f64(x: &[Vec<f64>], b: usize) -> Vec<Vec<f64>> {
    x.chunks(b)
        .map(|group| {
            let d = group[0].len();
            (0..d)
                .map(|c| group.iter().map(|r| r[c]).sum::<f64>() / b as f64)
                .collect()
        })
        .collect()
}

/// Full backward from scratch with dense block masks: pools K and V itself,
/// recomputes every probability from the masked logits, and scans mask
/// columns for the key-major sums.
pub fn mask_backward(
    d_out: &FeatureMatrix,
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    sel: &SelectionResult,
    cfg: &ValidatedConfig,
) -> Result<GradientSet> {
    cap(cfg.n())?;
    let (n, d, b) = (cfg.n(), cfg.d(), cfg.block_size());
    for m in [d_out, q, k, v] {
        if m.rows() != n || m.cols() != d {
            return Err(Error::ShapeMismatch("mask backward inputs".into()));
        }
    }
    let le = cfg.enrich_levels();
    let scale = cfg.scale() as f64;
    let rows_of = |m: &FeatureMatrix| -> Vec<Vec<f64>> {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|&x| x as f64).collect())
            .collect()
    };
    let mut kl = vec![rows_of(k)];
    let mut vl = vec![rows_of(v)];
    for l in 1..=le {
        kl.push(mean_pool_f64(&kl[l - 1], b));
        vl.push(mean_pool_f64(&vl[l - 1], b));
    }
    let t_fine = n / b;
    let masks: Vec<Vec<bool>> = (0..=le)
        .map(|l| {
            let t_l = cfg.blocks_at(l);
            let mut m = vec![false; t_fine * t_l];
            for i in 0..t_fine {
                for bb in 0..t_l {
                    m[i * t_l + bb] = l == cfg.levels() || sel.per_level[l].row(i / cfg.pow(l)).contains(&(bb as u32));
                }
            }
            m
        })
        .collect();
    let weights = |l: usize| {
        let w = cfg.pow(l) as f64;
        match cfg.reweight_mode() {
            ReweightMode::ScaleKv => (scale * w, 0.0, w),
            ReweightMode::LogitBias => (scale, w.ln(), 1.0),
        }
    };
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();

    // Forward statistics per token: (level, key row) list, probabilities, D.
    let qs = rows_of(q);
    let gs = rows_of(d_out);
    let mut dq = vec![vec![0.0f64; d]; n];
    let mut dkl: Vec<Vec<Vec<f64>>> = kl.iter().map(|x| vec![vec![0.0; d]; x.len()]).collect();
    let mut dvl: Vec<Vec<Vec<f64>>> = vl.iter().map(|x| vec![vec![0.0; d]; x.len()]).collect();
    for t in 0..n {
        let i = t / b;
        let mut cols: Vec<(usize, usize)> = Vec::new();
        for (l, mask) in masks.iter().enumerate() {
            let t_l = cfg.blocks_at(l);
            for bb in 0..t_l {
                if mask[i * t_l + bb] {
                    cols.extend((bb * b..(bb + 1) * b).map(|row| (l, row)));
                }
            }
        }
        let logits: Vec<f64> = cols
            .iter()
            .map(|&(l, row)| {
                let (mul, add, _) = weights(l);
                mul * dot(&qs[t], &kl[l][row]) + add
            })
            .collect();
        let p = softmax(&logits);
        let mut o = vec![0.0f64; d];
        for (pj, &(l, row)) in p.iter().zip(&cols) {
            let vmul = weights(l).2;
            for c in 0..d {
                o[c] += pj * vmul * vl[l][row][c];
            }
        }
        let delta = dot(&gs[t], &o);
        for (pj, &(l, row)) in p.iter().zip(&cols) {
            let (mul, _, vmul) = weights(l);
            let dp = vmul * dot(&gs[t], &vl[l][row]);
            let ds = pj * (dp - delta);
            for c in 0..d {
                dq[t][c] += ds * mul * kl[l][row][c];
                dkl[l][row][c] += ds * mul * qs[t][c];
                dvl[l][row][c] += pj * vmul * gs[t][c];
            }
        }
    }
    let mut dk = vec![vec![0.0f64; d]; n];
    let mut dv = vec![vec![0.0f64; d]; n];
    for l in 0..=le {
        let group = cfg.pow(l);
        for t in 0..n {
            for c in 0..d {
                dk[t][c] += dkl[l][t / group][c] / group as f64;
                dv[t][c] += dvl[l][t / group][c] / group as f64;
            }
        }
    }
    let to = |x: Vec<Vec<f64>>| FeatureMatrix::from_fn(n, d, |r, c| x[r][c] as Real);
    Ok(GradientSet {
        dq: to(dq),
        dk: to(dk),
        dv: to(dv),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixId {
    Q,
    K,
    V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, FD_REL_FLOOR)`.
    pub max_rel_error: f64,
    /// Largest absolute difference seen.
    pub max_abs_error: f64,
    /// `(matrix, row, col)` of the worst relative error.
    pub worst_coordinate: (MatrixId, usize, usize),
    pub step: f64,
    pub coordinates_checked: usize,
}

/// Central differences of a scalar loss over the listed coordinates of
/// `params`, compared to `analytic` (same shapes as `params`).
///
/// `loss_terms` returns the loss as a list of summands. The two evaluations
/// are differenced term by term before summing, so terms a perturbation does
/// not reach cancel exactly instead of contributing round-off.
pub fn central_difference(
    params: &[FeatureMatrix],
    analytic: &[FeatureMatrix],
    loss_terms: impl Fn(&[FeatureMatrix]) -> Result<Vec<f64>>,
    step: Real,
    coordinates: &[(usize, usize, usize)],
) -> Result<GradCheckReport> {
    let ids = [MatrixId::Q, MatrixId::K, MatrixId::V];
    let mut work: Vec<FeatureMatrix> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: (MatrixId::Q, 0, 0),
        step: step as f64,
        coordinates_checked: 0,
    };
    for &(m, r, c) in coordinates {
        let orig = work[m].get(r, c);
        work[m].set(r, c, orig + step);
        let plus = loss_terms(&work)?;
        work[m].set(r, c, orig - step);
        let minus = loss_terms(&work)?;
        work[m].set(r, c, orig);
        if plus.len() != minus.len() {
            return Err(Error::ShapeMismatch("loss term count changed".into()));
        }
        // The realized step can differ from `step` after rounding.
        let h = ((orig + step) - (orig - step)) as f64;
        let numeric = plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / h;
        let exact = analytic[m].get(r, c) as f64;
        let abs = (numeric - exact).abs();
        let rel = abs / numeric.abs().max(exact.abs()).max(FD_REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = (ids[m.min(2)], r, c);
        }
        report.coordinates_checked += 1;
    }
    Ok(report)
}

/// Mean-pooled copies of `x` for levels `0..=depth`, in double-double.
fn extended_pyramid(x: &FeatureMatrix, b: usize, depth: usize) -> Vec<Vec<Vec<Dd>>> {
    (0..=depth)
        .map(|l| {
            let width = b.pow(l as u32);
            (0..x.rows() / width)
                .map(|t| {
                    (0..x.cols())
                        .map(|c| {
                            let sum = (t * width..(t + 1) * width)
                                .fold(Dd::ZERO, |acc, r| acc + Dd::from_f64(x.get(r, c) as f64));
                            sum / Dd::from_f64(width as f64)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Per-row terms of `<O, cotangent>` for the listed query rows of the
/// attention defined by `plan`, evaluated from scratch in double-double so
/// that round-off stays far below what a central difference with a `1e-6`
/// step can resolve.
fn extended_row_losses(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    cotangent: &FeatureMatrix,
    plan: &EnrichedKvPlan,
    cfg: &ValidatedConfig,
    rows: &[usize],
) -> Vec<Dd> {
    let (d, b) = (cfg.d(), cfg.block_size());
    let pk = extended_pyramid(k, b, cfg.levels());
    let pv = extended_pyramid(v, b, cfg.levels());
    let scale = Dd::from_f64(cfg.scale() as f64);
    let mut losses = Vec::with_capacity(rows.len());
    for &t in rows {
        let qt: Vec<Dd> = q.row(t).iter().map(|&x| Dd::from_f64(x as f64)).collect();
        let mut logits = Vec::new();
        let mut values: Vec<Vec<Dd>> = Vec::new();
        for e in plan.block(t / b) {
            let (level, w) = (e.level as usize, Dd::from_f64(e.weight as f64));
            for row in e.block as usize * b..(e.block as usize + 1) * b {
                let raw = qt
                    .iter()
                    .zip(&pk[level][row])
                    .fold(Dd::ZERO, |acc, (&a, &c)| acc + a * c);
                let val = &pv[level][row];
                match cfg.reweight_mode() {
                    ReweightMode::ScaleKv => {
                        logits.push(scale * w * raw);
                        values.push(val.iter().map(|&x| x * w).collect());
                    }
                    ReweightMode::LogitBias => {
                        logits.push(scale * raw + w.ln());
                        values.push(val.clone());
                    }
                }
            }
        }
        let max = logits.iter().copied().fold(logits[0], |m, x| if x > m { x } else { m });
        let p: Vec<Dd> = logits.iter().map(|&x| (x - max).exp()).collect();
        let denom = p.iter().fold(Dd::ZERO, |acc, &x| acc + x);
        let mut loss = Dd::ZERO;
        for c in 0..d {
            let num = p.iter().zip(&values).fold(Dd::ZERO, |acc, (&pj, vj)| acc + pj * vj[c]);
            loss = loss + num / denom * Dd::from_f64(cotangent.get(t, c) as f64);
        }
        losses.push(loss);
    }
    losses
}

/// Query rows whose output can depend on input row `row` of matrix `m`.
fn reachable_rows(m: usize, row: usize, plan: &EnrichedKvPlan, cfg: &ValidatedConfig) -> Vec<usize> {
    let b = cfg.block_size();
    if m == 0 {
        return vec![row];
    }
    (0..plan.n_query_blocks())
        .filter(|&i| {
            plan.block(i)
                .iter()
                .any(|e| row / cfg.pow(e.level as usize) / b == e.block as usize)
        })
        .flat_map(|i| i * b..(i + 1) * b)
        .collect()
}

/// Options for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: Real,
    /// Check every coordinate when `3 N d` is at most this, otherwise a
    /// seeded random sample of this many (at least 200).
    pub max_coordinates: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            max_coordinates: 4096,
            seed: 0,
        }
    }
}

/// Compares [`llsa_backward`](crate::llsa_backward) with central differences
/// of `<O(q, k, v), cotangent>`. The selection and plan are computed once at
/// the unperturbed point and held fixed, since Top-K carries no gradient.
/// The perturbed losses come from an independent double-double forward.
pub fn finite_diff_check(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    cotangent: &FeatureMatrix,
    cfg: &ValidatedConfig,
    opts: FdOptions,
) -> Result<GradCheckReport> {
    if !crate::DOUBLE_PRECISION {
        return Err(Error::Precision);
    }
    cap(cfg.n())?;
    let llsa = Llsa::prepare(q, k, v, cfg)?;
    let saved = llsa.forward()?;
    let grads = llsa.backward(cotangent, &saved)?;
    let plan = &llsa.plan;
    let originals = [q, k, v];
    // Only rows the perturbed input reaches are evaluated; the others would
    // contribute identical terms to both sides of the difference.
    let loss = |p: &[FeatureMatrix]| -> Result<Vec<f64>> {
        let changed = (0..3).find_map(|m| {
            p[m].as_slice()
                .iter()
                .zip(originals[m].as_slice())
                .position(|(a, b)| a != b)
                .map(|x| (m, x / cfg.d()))
        });
        let rows = match changed {
            Some((m, row)) => reachable_rows(m, row, plan, cfg),
            None => (0..cfg.n()).collect(),
        };
        let terms = extended_row_losses(&p[0], &p[1], &p[2], cotangent, plan, cfg, &rows);
        Ok(terms.iter().flat_map(|t| [t.hi, t.lo]).collect())
    };

    let (n, d) = (cfg.n(), cfg.d());
    let total = 3 * n * d;
    let coordinates: Vec<(usize, usize, usize)> = if total <= opts.max_coordinates {
        (0..total).map(|x| (x / (n * d), (x / d) % n, x % d)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..opts.max_coordinates.max(200))
            .map(|_| {
                let x = (rng.next_u64() % total as u64) as usize;
                (x / (n * d), (x / d) % n, x % d)
            })
            .collect()
    };
    central_difference(
        &[q.clone(), k.clone(), v.clone()],
        &[grads.dq, grads.dk, grads.dv],
        loss,
        opts.step,
        &coordinates,
    )
}
