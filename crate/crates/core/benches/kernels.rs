//! Kernel benchmarks. The same IDs are produced by the parallel (default) and
//! sequential (`--no-default-features`) builds, so the two can be compared
//! with criterion baselines:
//!
//! ```text
//! cargo bench -p llsa-core --bench kernels -- --save-baseline parallel
//! cargo bench -p llsa-core --bench kernels --no-default-features -- --baseline parallel
//! ```

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use llsa::baseline::mask_kv_backward;
use llsa::tensorio::{gen_random, Distribution};
use llsa::{
    build_plan, build_pyramid, hierarchical_topk, llsa_forward, llsa_kv_backward, transpose_all, FeatureMatrix, Llsa,
    LlsaConfig, ValidatedConfig,
};

const D: usize = 16;
const B: usize = 16;
const K: usize = 8;
const SIZES: [usize; 2] = [4096, 16384];

struct Case {
    cfg: ValidatedConfig,
    q: FeatureMatrix,
    k: FeatureMatrix,
    v: FeatureMatrix,
    d_out: FeatureMatrix,
}

fn case(n: usize) -> Case {
    let levels = llsa::config::auto_levels(n, D, B, K).expect("valid grid point");
    let g = |seed| gen_random(n, D, seed, Distribution::StdNormal);
    Case {
        cfg: LlsaConfig::new(n, D, B, K, levels).validate().unwrap(),
        q: g(1),
        k: g(2),
        v: g(3),
        d_out: g(4),
    }
}

fn kernels(c: &mut Criterion) {
    let path = if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    };
    eprintln!(
        "benchmarking the {path} path with {} worker(s)",
        llsa::par::worker_count()
    );
    let cases: Vec<Case> = SIZES.iter().map(|&n| case(n)).collect();

    let mut group = c.benchmark_group("llsa");
    group.sample_size(10).measurement_time(Duration::from_secs(3));
    for cs in &cases {
        let n = cs.cfg.n();
        let (b, l) = (cs.cfg.block_size(), cs.cfg.levels());
        let llsa = Llsa::prepare(&cs.q, &cs.k, &cs.v, &cs.cfg).unwrap();
        let saved = llsa.forward().unwrap();
        let tr = llsa.transposed().unwrap();

        group.bench_with_input(BenchmarkId::new("pyramid", n), cs, |bch, cs| {
            bch.iter(|| build_pyramid(black_box(&cs.k), b, l).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("select", n), cs, |bch, cs| {
            bch.iter(|| hierarchical_topk(&llsa.pyr_q, &llsa.pyr_k, black_box(&cs.cfg)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward", n), cs, |bch, cs| {
            bch.iter(|| {
                let plan = build_plan(&llsa.selection, &cs.cfg).unwrap();
                llsa_forward(&cs.q, &cs.k, &cs.v, &llsa.pyr_k, &llsa.pyr_v, &plan, &cs.cfg).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("transpose", n), cs, |bch, cs| {
            bch.iter(|| transpose_all(black_box(&llsa.selection), &cs.cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward_full", n), cs, |bch, cs| {
            bch.iter(|| llsa.backward_with(black_box(&cs.d_out), &saved, &tr).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward_kv", n), cs, |bch, cs| {
            bch.iter(|| {
                llsa_kv_backward(
                    &cs.d_out,
                    &saved,
                    &cs.q,
                    &cs.k,
                    &cs.v,
                    &llsa.pyr_k,
                    &llsa.pyr_v,
                    &llsa.plan,
                    &tr,
                    &cs.cfg,
                )
                .unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("backward_kv_mask", n), cs, |bch, cs| {
            bch.iter(|| {
                mask_kv_backward(
                    &cs.d_out,
                    &saved,
                    &cs.q,
                    &llsa.pyr_k,
                    &llsa.pyr_v,
                    &llsa.selection,
                    &cs.cfg,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
