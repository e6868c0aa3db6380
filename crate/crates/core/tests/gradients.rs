use llsa::oracle::{dense_attention_backward, finite_diff_check, FdOptions};
use llsa::tensorio::{gen_random, Distribution};
use llsa::{oracle_tolerance, Error, FeatureMatrix, Llsa, LlsaConfig, ReweightMode, DOUBLE_PRECISION};

fn normal(n: usize, d: usize, seed: u64) -> FeatureMatrix {
    gen_random(n, d, seed, Distribution::StdNormal)
}

#[test]
fn single_precision_builds_refuse_finite_differences() {
    let cfg = LlsaConfig::new(16, 2, 2, 1, 1).validate().unwrap();
    let x = normal(16, 2, 0);
    let result = finite_diff_check(&x, &x, &x, &x, &cfg, FdOptions::default());
    assert_eq!(matches!(result, Err(Error::Precision)), !DOUBLE_PRECISION);
}

#[test]
fn finite_differences_agree_across_seeds_and_modes() {
    if !DOUBLE_PRECISION {
        return;
    }
    for mode in [ReweightMode::ScaleKv, ReweightMode::LogitBias] {
        let cfg = LlsaConfig::new(64, 4, 2, 2, 2).with_mode(mode).validate().unwrap();
        for seed in 0..5u64 {
            let s = 10 * seed;
            let report = finite_diff_check(
                &normal(64, 4, s),
                &normal(64, 4, s + 1),
                &normal(64, 4, s + 2),
                &normal(64, 4, s + 3),
                &cfg,
                FdOptions::default(),
            )
            .unwrap();
            assert_eq!(report.coordinates_checked, 3 * 64 * 4);
            assert!(report.max_rel_error <= 1e-6, "{mode:?} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn a_large_step_degrades_the_check() {
    if !DOUBLE_PRECISION {
        return;
    }
    let cfg = LlsaConfig::new(64, 4, 2, 2, 2).validate().unwrap();
    let opts = FdOptions {
        step: 1e-1,
        ..FdOptions::default()
    };
    let report = finite_diff_check(
        &normal(64, 4, 1),
        &normal(64, 4, 2),
        &normal(64, 4, 3),
        &normal(64, 4, 4),
        &cfg,
        opts,
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-3, "{report:?}");
}

#[test]
fn large_instances_are_subsampled() {
    if !DOUBLE_PRECISION {
        return;
    }
    let cfg = LlsaConfig::new(256, 8, 4, 2, 2).validate().unwrap();
    let opts = FdOptions {
        max_coordinates: 300,
        ..FdOptions::default()
    };
    let report = finite_diff_check(
        &normal(256, 8, 1),
        &normal(256, 8, 2),
        &normal(256, 8, 3),
        &normal(256, 8, 4),
        &cfg,
        opts,
    )
    .unwrap();
    assert_eq!(report.coordinates_checked, 300);
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn full_coverage_backward_equals_dense_backward() {
    let (n, d, b) = (64, 4, 4);
    let cfg = LlsaConfig::new(n, d, b, n / b, 1)
        .with_enrich_levels(0)
        .validate()
        .unwrap();
    let (q, k, v, d_out) = (normal(n, d, 5), normal(n, d, 6), normal(n, d, 7), normal(n, d, 8));
    let llsa = Llsa::prepare(&q, &k, &v, &cfg).unwrap();
    let saved = llsa.forward().unwrap();
    let grads = llsa.backward(&d_out, &saved).unwrap();
    let dense = dense_attention_backward(&q, &k, &v, cfg.scale(), &d_out).unwrap();
    let diff = grads.max_abs_diff(&dense);
    assert!(diff <= oracle_tolerance(), "{diff:e}");
}

#[test]
fn kv_only_backward_matches_the_full_backward() {
    let cfg = LlsaConfig::new(256, 8, 4, 2, 2).validate().unwrap();
    let (q, k, v, d_out) = (
        normal(256, 8, 1),
        normal(256, 8, 2),
        normal(256, 8, 3),
        normal(256, 8, 4),
    );
    let llsa = Llsa::prepare(&q, &k, &v, &cfg).unwrap();
    let saved = llsa.forward().unwrap();
    let tr = llsa.transposed().unwrap();
    let full = llsa.backward_with(&d_out, &saved, &tr).unwrap();
    let (dk, dv) = llsa::llsa_kv_backward(
        &d_out,
        &saved,
        &q,
        &k,
        &v,
        &llsa.pyr_k,
        &llsa.pyr_v,
        &llsa.plan,
        &tr,
        &cfg,
    )
    .unwrap();
    assert_eq!(dk, full.dk);
    assert_eq!(dv, full.dv);
}
