//! Data-parallel kernels on one worker versus the default pool. Built without
//! the `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cmbseg_core::exec;
use cmbseg_core::morphology::dilate;
use cmbseg_core::phantom::{generate_phantom, PhantomSpec};
use cmbseg_core::preprocess::{prepare_subject, COMMON_SIDE};
use cmbseg_core::segmenter::{infer_segmenter, UNetSegmenter};

const POOLS: [(&str, usize); 2] = [("sequential", 1), ("pool", 0)];

fn kernels(c: &mut Criterion) {
    let phantom = generate_phantom("9001", &PhantomSpec::default()).expect("phantom");
    let record = phantom.subject;
    let prepared = prepare_subject(&record, COMMON_SIDE).expect("prepare");
    let mut stage1 = prepared.t2s.clone();
    stage1.data.fill(0.0);
    let segmenter = UNetSegmenter::new(&[4, 8, 16], 1).expect("segmenter");
    let mut brain = record.t2s.clone();
    brain.data.mapv_inplace(|v| f32::from(v > 0.5));

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, workers) in POOLS {
        g.bench_with_input(BenchmarkId::new("prepare_subject", name), &workers, |b, &w| {
            b.iter(|| exec::with_workers(w, || prepare_subject(&record, COMMON_SIDE).expect("prepare")))
        });
        g.bench_with_input(BenchmarkId::new("dilate_r3", name), &workers, |b, &w| {
            b.iter(|| exec::with_workers(w, || dilate(&brain, 3)))
        });
        g.bench_with_input(BenchmarkId::new("segmenter_inference", name), &workers, |b, &w| {
            b.iter(|| exec::with_workers(w, || infer_segmenter(&segmenter, &prepared, &stage1).expect("infer")))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
