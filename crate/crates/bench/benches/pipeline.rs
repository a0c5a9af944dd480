use std::hint::black_box;

use cdm_core::classify::knn_predict;
use cdm_core::dataset::{sample_split, SplitSpec};
use cdm_core::mapping::fit_q;
use cdm_core::median::{cluster_summaries, geometric_median, DEFAULT_MAX_ITER, DEFAULT_TOL};
use cdm_core::synth::generate;
use cdm_core::{cdm_fit, cdm_predict, CdmConfig, ClassifierSpec, PApproach, SynthData, SynthParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::s;

fn data() -> SynthData {
    generate(&SynthParams::default()).unwrap()
}

fn bench_weiszfeld(c: &mut Criterion) {
    let data = data();
    let mut group = c.benchmark_group("weiszfeld");
    for (k, d) in [(50, 2), (50, 5), (150, 5)] {
        let points = data.ltm.features().slice(s![..k, ..d]).to_owned();
        group.bench_with_input(BenchmarkId::from_parameter(format!("k{k}_d{d}")), &points, |b, p| {
            b.iter(|| geometric_median(black_box(p.view()), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap())
        });
    }
    group.finish();
}

fn bench_fit_q(c: &mut Criterion) {
    let data = data();
    let p = cdm_fit(&data.ltm, &data.sm, &CdmConfig::default()).unwrap();
    let emb = cdm_core::mapping::apply_map(&p.p, &p.ltm_scaling.transform_dataset(&data.ltm).unwrap()).unwrap();
    let medians = cluster_summaries(&emb).unwrap();
    c.bench_function("fit_q_150x25", |b| b.iter(|| fit_q(black_box(&data.sm), &medians, 1.0).unwrap()));
}

fn bench_cdm_fit(c: &mut Criterion) {
    let data = data();
    let split = sample_split(&data.sm, &SplitSpec::new(3, 0, 1).unwrap(), 0).unwrap();
    let mut group = c.benchmark_group("cdm_fit");
    for approach in [PApproach::Lda, PApproach::GraphEmbedding, PApproach::FixedMedians] {
        let cfg = CdmConfig { p_approach: approach, ..CdmConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{approach:?}")), &cfg, |b, cfg| {
            b.iter(|| cdm_fit(black_box(&data.ltm), &split.train, cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let data = data();
    let split = sample_split(&data.sm, &SplitSpec::new(3, 0, 1).unwrap(), 0).unwrap();
    let query = split.test.features().view();
    c.bench_function("knn_predict_150x40", |b| {
        b.iter(|| knn_predict(black_box(&data.ltm), data.ltm.features().view(), 5).unwrap())
    });
    let mut group = c.benchmark_group("cdm_predict");
    for spec in [ClassifierSpec::knn(5), ClassifierSpec::svm_rbf()] {
        let cfg = CdmConfig { classifier: spec, use_augmentation: true, ..CdmConfig::default() };
        let model = cdm_fit(&data.ltm, &split.train, &cfg).unwrap();
        group.bench_function(format!("{:?}", spec.kind), |b| {
            b.iter(|| cdm_predict(&model, &data.ltm, &split.train, black_box(query)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_weiszfeld, bench_fit_q, bench_cdm_fit, bench_predict);
criterion_main!(benches);
