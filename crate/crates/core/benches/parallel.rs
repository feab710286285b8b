use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::collections::HashMap;
use std::hint::black_box;

use optexit_core::curation::fuzzy::fuzzy_match_span_with;
use optexit_core::curation::{assemble_dataset, CurationConfig};
use optexit_core::exit::truncation_sweep;
use optexit_core::probe::loss::{loss_and_grad, Sample};
use optexit_core::probe::train::separable_fixture;
use optexit_core::probe::{Arch, ClassWeights, ProbeModel};
use optexit_core::synth::{scripted_corpus, SynthConfig};
use optexit_core::ExecMode;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn fuzzy(c: &mut Criterion) {
    let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
    let text: String = (0..4000).map(|i| words[(i * 7 + i / 3) % words.len()]).collect::<Vec<_>>().join(" ");
    let span = "so the valeu is 1234";
    let mut g = c.benchmark_group("fuzzy_match_span");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(fuzzy_match_span_with(mode, span, &text, 0.0).ok()))
        });
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let data = separable_fixture(200, 100, 1.0, 3);
    let rows: Vec<(Vec<f64>, u8)> = data
        .iter()
        .flat_map(|ex| (0..ex.features.rows).map(|i| (ex.features.row_f64(i), ex.labels[i])))
        .collect();
    let samples: Vec<Sample<'_>> = rows.iter().map(|(x, y)| Sample { x, y: *y }).collect();
    let model = ProbeModel::zeros(Arch::Mlp { hidden: vec![32] }, 4);
    let mut g = c.benchmark_group("loss_and_grad");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(loss_and_grad(&model, &samples, ClassWeights::UNIT, mode).unwrap()))
        });
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let corpus = scripted_corpus(&SynthConfig { n_traces: 64, ..SynthConfig::default() });
    let llm = corpus.llm();
    let fractions: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for (name, mode) in MODES {
        let cfg = CurationConfig { exec: mode, ..CurationConfig::default() };
        g.bench_function(BenchmarkId::new("assemble_dataset", name), |b| {
            b.iter(|| black_box(assemble_dataset(&corpus.traces, &cfg, &llm).unwrap()))
        });
        g.bench_function(BenchmarkId::new("truncation_sweep", name), |b| {
            b.iter(|| {
                black_box(truncation_sweep(&corpus.traces, &fractions, &HashMap::new(), &llm, 64, mode).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, fuzzy, gradient, pipeline);
criterion_main!(benches);
