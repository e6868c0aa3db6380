//! Timing harness and sweeps behind the `scaling` and `kv-backward` CLI
//! commands and the scaling acceptance checks.
//!
//! Each measurement is the median of `runs` timed repetitions after `warmup`
//! untimed ones, on the monotonic clock. Sweeps prepare every grid point
//! first and then time all (size, phase) pairs round-robin.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{build_plan, llsa_forward, EnrichedKvPlan, ForwardState};
use crate::baseline::mask_kv_backward;
use crate::config::{auto_levels, LlsaConfig, ReweightMode, ValidatedConfig};
use crate::error::Result;
use crate::grad::{llsa_backward, llsa_kv_backward};
use crate::indexmap::transpose_all;
use crate::matrix::FeatureMatrix;
use crate::oracle::dense_attention;
use crate::pyramid::{build_pyramid, Pyramid};
use crate::selection::{hierarchical_topk, SelectionResult};
use crate::tensorio::{gen_random, Distribution};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Pyramids plus hierarchical Top-K.
    Select,
    /// Plan expansion plus streaming forward.
    Forward,
    /// Index transposition plus key-major dK/dV.
    BackwardKv,
    /// Index transposition plus the full backward.
    BackwardFull,
    /// Dense mask construction plus mask-scanning dK/dV.
    BackwardKvMask,
    /// Dense `O(N^2)` attention oracle.
    DenseOracle,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Select => "select",
            Phase::Forward => "forward",
            Phase::BackwardKv => "backward_kv",
            Phase::BackwardFull => "backward_full",
            Phase::BackwardKvMask => "backward_kv_mask",
            Phase::DenseOracle => "dense_oracle",
        }
    }
}

/// One timed phase at one sequence length. Field order is the CSV column
/// order: `n,phase,wall_ns,mul_accs,b,k,levels,enrich,mode,seed`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub n: usize,
    pub phase: Phase,
    pub wall_ns: u64,
    pub mul_accs: u64,
    pub b: usize,
    pub k: usize,
    pub levels: usize,
    pub enrich: usize,
    pub mode: ReweightMode,
    pub seed: u64,
}

/// Median wall time of `runs` calls after `warmup` discarded calls.
pub fn time_median<R>(runs: usize, warmup: usize, mut f: impl FnMut() -> R) -> u64 {
    for _ in 0..warmup {
        black_box(f());
    }
    let mut samples: Vec<u64> = (0..runs.max(1))
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            (start.elapsed().as_nanos() as u64).max(1)
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelChoice {
    /// Deepest level count that validates at each `N`.
    Auto,
    Fixed(usize),
}

impl std::str::FromStr for LevelChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            other => other
                .parse()
                .map(Self::Fixed)
                .map_err(|_| format!("levels must be `auto` or an integer, got `{other}`")),
        }
    }
}

/// Sweep parameters shared by both benchmarks.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSpec {
    pub n_grid: Vec<usize>,
    pub d: usize,
    pub b: usize,
    pub k: usize,
    pub levels: LevelChoice,
    /// `None` enriches every level (`L_e = L`).
    pub enrich: Option<usize>,
    pub mode: ReweightMode,
    pub seed: u64,
    pub runs: usize,
    pub warmup: usize,
}

impl SweepSpec {
    pub fn new(n_grid: Vec<usize>, d: usize, b: usize, k: usize) -> Self {
        Self {
            n_grid,
            d,
            b,
            k,
            levels: LevelChoice::Auto,
            enrich: None,
            mode: ReweightMode::ScaleKv,
            seed: 0,
            runs: 5,
            warmup: 1,
        }
    }

    pub fn config_for(&self, n: usize) -> std::result::Result<ValidatedConfig, String> {
        let levels = match self.levels {
            LevelChoice::Fixed(l) => l,
            LevelChoice::Auto => {
                auto_levels(n, self.d, self.b, self.k).ok_or_else(|| format!("no admissible level count for n={n}"))?
            }
        };
        let mut cfg = LlsaConfig::new(n, self.d, self.b, self.k, levels).with_mode(self.mode);
        if let Some(le) = self.enrich {
            cfg = cfg.with_enrich_levels(le.min(levels));
        }
        cfg.validate().map_err(|e| e.to_string())
    }

    fn record(&self, cfg: &ValidatedConfig, phase: Phase, wall_ns: u64, mul_accs: u64) -> BenchRecord {
        BenchRecord {
            n: cfg.n(),
            phase,
            wall_ns,
            mul_accs,
            b: cfg.block_size(),
            k: cfg.top_k(),
            levels: cfg.levels(),
            enrich: cfg.enrich_levels(),
            mode: cfg.reweight_mode(),
            seed: self.seed,
        }
    }
}

/// Records plus grid points that were skipped and why.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SweepOutput {
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<(usize, String)>,
}

impl SweepOutput {
    /// Wall-time slope per phase across `n`.
    pub fn time_slopes(&self) -> BTreeMap<Phase, f64> {
        self.slopes(|r| r.wall_ns as f64)
    }

    /// Multiply-accumulate slope per phase across `n`.
    pub fn mul_acc_slopes(&self) -> BTreeMap<Phase, f64> {
        self.slopes(|r| r.mul_accs as f64)
    }

    fn slopes(&self, y: impl Fn(&BenchRecord) -> f64) -> BTreeMap<Phase, f64> {
        let mut by_phase: BTreeMap<Phase, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &self.records {
            by_phase.entry(r.phase).or_default().push((r.n as f64, y(r)));
        }
        by_phase
            .into_iter()
            .filter_map(|(p, pts)| loglog_slope(&pts).map(|s| (p, s)))
            .collect()
    }

    /// Summed wall time of `phases` per `n`, ascending in `n`.
    pub fn totals(&self, phases: &[Phase]) -> Vec<(usize, u64)> {
        let mut by_n: BTreeMap<usize, u64> = BTreeMap::new();
        for r in self.records.iter().filter(|r| phases.contains(&r.phase)) {
            *by_n.entry(r.n).or_default() += r.wall_ns;
        }
        by_n.into_iter().collect()
    }

    /// `wall_ns / n` for one phase, ascending in `n`.
    pub fn per_token(&self, phase: Phase) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| (r.n, r.wall_ns as f64 / r.n as f64))
            .collect();
        v.sort_by_key(|x| x.0);
        v
    }
}

fn inputs(n: usize, d: usize, seed: u64) -> [FeatureMatrix; 4] {
    [0, 1, 2, 3].map(|i| gen_random(n, d, seed.wrapping_mul(4).wrapping_add(i), Distribution::StdNormal))
}

/// Everything one grid point needs, computed once before timing starts.
struct Prepared {
    cfg: ValidatedConfig,
    q: FeatureMatrix,
    k: FeatureMatrix,
    v: FeatureMatrix,
    d_out: FeatureMatrix,
    pyr_k: Pyramid,
    pyr_v: Pyramid,
    selection: SelectionResult,
    plan: EnrichedKvPlan,
    saved: ForwardState,
}

impl Prepared {
    fn new(cfg: ValidatedConfig, seed: u64) -> Result<Self> {
        let (b, l) = (cfg.block_size(), cfg.levels());
        let [q, k, v, d_out] = inputs(cfg.n(), cfg.d(), seed);
        let pyr_q = build_pyramid(&q, b, l)?;
        let pyr_k = build_pyramid(&k, b, l)?;
        let pyr_v = build_pyramid(&v, b, l)?;
        let selection = hierarchical_topk(&pyr_q, &pyr_k, &cfg)?;
        let plan = build_plan(&selection, &cfg)?;
        let saved = llsa_forward(&q, &k, &v, &pyr_k, &pyr_v, &plan, &cfg)?;
        Ok(Self {
            cfg,
            q,
            k,
            v,
            d_out,
            pyr_k,
            pyr_v,
            selection,
            plan,
            saved,
        })
    }

    fn kv_mul_accs(&self) -> u64 {
        4 * self.cfg.d() as u64 * self.plan.score_evaluations()
    }
}

/// A record template and the closure whose wall time fills it in.
struct Job<'a> {
    record: BenchRecord,
    run: Box<dyn FnMut() -> Result<()> + 'a>,
}

/// Warms every job up, then runs `runs` rounds that each time every job
/// once, and reports the per-job median. Interleaving spreads transient
/// machine load over all grid points instead of concentrating it on one.
fn run_interleaved(mut jobs: Vec<Job<'_>>, runs: usize, warmup: usize) -> Result<Vec<BenchRecord>> {
    for job in &mut jobs {
        for _ in 0..warmup {
            (job.run)()?;
        }
    }
    let mut samples = vec![Vec::with_capacity(runs); jobs.len()];
    for _ in 0..runs.max(1) {
        for (job, out) in jobs.iter_mut().zip(&mut samples) {
            let start = Instant::now();
            (job.run)()?;
            out.push((start.elapsed().as_nanos() as u64).max(1));
        }
    }
    Ok(jobs
        .into_iter()
        .zip(samples)
        .map(|(job, mut s)| {
            s.sort_unstable();
            BenchRecord {
                wall_ns: s[s.len() / 2],
                ..job.record
            }
        })
        .collect())
}

fn prepare_grid(spec: &SweepSpec, out: &mut SweepOutput) -> Result<Vec<Prepared>> {
    let mut grid = Vec::new();
    for &n in &spec.n_grid {
        match spec.config_for(n) {
            Ok(cfg) => grid.push(Prepared::new(cfg, spec.seed)?),
            Err(e) => out.skipped.push((n, e)),
        }
    }
    Ok(grid)
}

/// Times select, forward and full backward per grid point, plus the dense
/// oracle on `dense_grid`.
pub fn scaling_sweep(spec: &SweepSpec, dense_grid: &[usize]) -> Result<SweepOutput> {
    let mut out = SweepOutput::default();
    let grid = prepare_grid(spec, &mut out)?;
    let dense_inputs: Vec<[FeatureMatrix; 4]> = dense_grid.iter().map(|&n| inputs(n, spec.d, spec.seed)).collect();
    let scale = 1.0 / (spec.d as Real).sqrt();

    let mut jobs: Vec<Job<'_>> = Vec::new();
    for p in &grid {
        let (cfg, d) = (&p.cfg, p.cfg.d() as u64);
        let pairs = p.plan.score_evaluations();
        jobs.push(Job {
            record: spec.record(cfg, Phase::Select, 0, p.selection.mul_accs),
            run: Box::new(move || {
                let (b, l) = (cfg.block_size(), cfg.levels());
                let pq = build_pyramid(&p.q, b, l)?;
                let pk = build_pyramid(&p.k, b, l)?;
                black_box(hierarchical_topk(&pq, &pk, cfg)?);
                Ok(())
            }),
        });
        jobs.push(Job {
            record: spec.record(cfg, Phase::Forward, 0, 2 * d * pairs),
            run: Box::new(move || {
                let plan = build_plan(&p.selection, cfg)?;
                black_box(llsa_forward(&p.q, &p.k, &p.v, &p.pyr_k, &p.pyr_v, &plan, cfg)?);
                Ok(())
            }),
        });
        jobs.push(Job {
            record: spec.record(cfg, Phase::BackwardFull, 0, 7 * d * pairs),
            run: Box::new(move || {
                let tr = transpose_all(&p.selection, cfg)?;
                black_box(llsa_backward(
                    &p.d_out, &p.saved, &p.q, &p.k, &p.v, &p.pyr_k, &p.pyr_v, &p.plan, &tr, cfg,
                )?);
                Ok(())
            }),
        });
    }
    for (&n, [q, k, v, _]) in dense_grid.iter().zip(&dense_inputs) {
        jobs.push(Job {
            record: BenchRecord {
                n,
                phase: Phase::DenseOracle,
                wall_ns: 0,
                mul_accs: 2 * (n * n * spec.d) as u64,
                b: spec.b,
                k: spec.k,
                levels: 0,
                enrich: 0,
                mode: spec.mode,
                seed: spec.seed,
            },
            run: Box::new(move || {
                black_box(dense_attention(q, k, v, scale)?);
                Ok(())
            }),
        });
    }
    out.records = run_interleaved(jobs, spec.runs, spec.warmup)?;
    Ok(out)
}

/// Times the transposed-index key/value backward and, with `mask_baseline`,
/// the dense-mask variant on the same inputs.
pub fn kv_backward_sweep(spec: &SweepSpec, mask_baseline: bool) -> Result<SweepOutput> {
    let mut out = SweepOutput::default();
    let grid = prepare_grid(spec, &mut out)?;
    let mut jobs: Vec<Job<'_>> = Vec::new();
    for p in &grid {
        let cfg = &p.cfg;
        jobs.push(Job {
            record: spec.record(cfg, Phase::BackwardKv, 0, p.kv_mul_accs()),
            run: Box::new(move || {
                let tr = transpose_all(&p.selection, cfg)?;
                black_box(llsa_kv_backward(
                    &p.d_out, &p.saved, &p.q, &p.k, &p.v, &p.pyr_k, &p.pyr_v, &p.plan, &tr, cfg,
                )?);
                Ok(())
            }),
        });
        if mask_baseline {
            jobs.push(Job {
                record: spec.record(cfg, Phase::BackwardKvMask, 0, p.kv_mul_accs()),
                run: Box::new(move || {
                    black_box(mask_kv_backward(
                        &p.d_out,
                        &p.saved,
                        &p.q,
                        &p.pyr_k,
                        &p.pyr_v,
                        &p.selection,
                        cfg,
                    )?);
                    Ok(())
                }),
            });
        }
    }
    out.records = run_interleaved(jobs, spec.runs, spec.warmup)?;
    Ok(out)
}
