//! Hot paths of the verifier: interval and linear-bounds propagation, the
//! relaxation LP, one full search, scorer inference and strong branching.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use relubab_bench::{bench_box, bench_net};
use relubab_core::bab::{evaluate_subdomain, verify, BabConfig};
use relubab_core::bounds::{interval_bounds, linbound_bounds, ReluDecisionMap};
use relubab_core::branching::{strong_branch, SrStrategy};
use relubab_core::gnn::{extract_features, infer, FeatureNorm, Gnn, GnnGraph};
use relubab_core::lp::output_lower_bound;

fn bounds_benches(c: &mut Criterion) {
    let net = bench_net(11, &[8, 32, 32, 24, 1]);
    let domain = bench_box(12, 8);
    let decisions = ReluDecisionMap::undecided(&net);
    c.bench_function("interval_bounds 8x32x32x24", |b| {
        b.iter(|| interval_bounds(black_box(&net), black_box(&domain), black_box(&decisions)))
    });
    c.bench_function("linbound_bounds 8x32x32x24", |b| {
        b.iter(|| linbound_bounds(black_box(&net), black_box(&domain), black_box(&decisions)))
    });
}

fn lp_bench(c: &mut Criterion) {
    let net = bench_net(11, &[8, 32, 32, 24, 1]);
    let domain = bench_box(12, 8);
    let decisions = ReluDecisionMap::undecided(&net);
    let bounds = linbound_bounds(&net, &domain, &decisions).unwrap();
    c.bench_function("planet_lp 8x32x32x24", |b| {
        b.iter(|| {
            output_lower_bound(
                black_box(&net),
                black_box(&domain),
                black_box(&bounds),
                black_box(&decisions),
            )
        })
    });
}

fn search_bench(c: &mut Criterion) {
    let net = bench_net(21, &[4, 12, 12, 1]);
    let domain = bench_box(22, 4);
    let cfg = BabConfig {
        timeout: None,
        max_branches: Some(10_000),
        ..BabConfig::default()
    };
    c.bench_function("verify sr 4x12x12", |b| {
        b.iter(|| verify(black_box(&net), black_box(&domain), &mut SrStrategy, &cfg))
    });
}

fn scorer_benches(c: &mut Criterion) {
    let net = bench_net(31, &[6, 20, 16, 1]);
    let domain = bench_box(32, 6);
    let root = evaluate_subdomain(&net, &domain, ReluDecisionMap::undecided(&net), None, 0)
        .expect("root evaluates");
    let candidates = root.ambiguous_nodes();
    assert!(candidates.len() >= 2, "fixture must branch");
    let raw = extract_features(&net, &domain, &root).unwrap();
    let norm = FeatureNorm::fit(std::iter::once(&raw));
    let graph = GnnGraph::new(&net, &raw, &norm).unwrap();
    let gnn = Gnn::init(32, 2, 33);
    c.bench_function("gnn_infer p32 6x20x16", |b| {
        b.iter(|| infer(black_box(&gnn), black_box(&net), black_box(&graph), black_box(&candidates)))
    });
    c.bench_function("strong_branch 6x20x16", |b| {
        b.iter(|| strong_branch(black_box(&net), black_box(&domain), black_box(&root), black_box(&candidates)))
    });
}

criterion_group!(benches, bounds_benches, lp_bench, search_bench, scorer_benches);
criterion_main!(benches);
