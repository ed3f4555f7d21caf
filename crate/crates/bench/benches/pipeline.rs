use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nsw_core::backtest::{run, ExecConfig, Instrument, PipelineConfig};
use nsw_core::ledger::{parse_statement, summarize};
use nsw_core::market_data::synthetic_series;
use nsw_core::portfolio::{allocate, ProfitStats};
use nsw_core::sde::{Observation, SdeConfig, SdeModel};
use nsw_core::stationary::{ks_gate, solve_stationary, DensityForm, FnDynamics, GridSpec, KsGate};
use nsw_core::wavelet::HaarStream;
use std::hint::black_box;

const STATEMENT: &str = include_str!("../../core/tests/fixtures/app1_statement.txt");

fn model_steps(c: &mut Criterion) {
    let xs: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.37).sin() + 1e-3 * i as f64).collect();
    c.bench_function("haar_stream_4096", |b| {
        b.iter(|| {
            let mut s = HaarStream::new(5);
            xs.iter().filter_map(|x| s.push(*x)).sum::<f64>()
        })
    });
    let obs: Vec<Observation> = xs
        .windows(3)
        .map(|w| Observation { y1: w[1], y2: w[0], dy1: w[2] - w[1] })
        .collect();
    c.bench_function("rm_update_4094", |b| {
        b.iter_batched(
            || SdeModel::new(SdeConfig::default()),
            |mut m| {
                for o in &obs {
                    m.rm_update(o);
                }
                m
            },
            BatchSize::SmallInput,
        )
    });
}

fn densities(c: &mut Criterion) {
    let dyn1 = FnDynamics { drift: |x: f64| -x, diffusion: |_: f64| 1.0, n_fit: 240 };
    let dyn2 = FnDynamics { drift: |x: f64| -0.9 * x + 0.1, diffusion: |_: f64| 1.05, n_fit: 240 };
    let spec = GridSpec::new(-10.0, 10.0, 513);
    c.bench_function("solve_stationary_513", |b| {
        b.iter(|| solve_stationary(black_box(&dyn1), spec, DensityForm::Printed).unwrap())
    });
    let a = solve_stationary(&dyn1, spec, DensityForm::Printed).unwrap();
    let d = solve_stationary(&dyn2, spec, DensityForm::Printed).unwrap();
    c.bench_function("ks_gate_513", |b| b.iter(|| ks_gate(black_box(&a), black_box(&d), &KsGate::new(0.15))));
}

fn portfolio(c: &mut Criterion) {
    let s = ProfitStats::new(vec![0.01, 0.03, -0.02], vec![1.0, 0.4, -0.1, 0.4, 1.0, 0.2, -0.1, 0.2, 1.0]).unwrap();
    c.bench_function("allocate_3", |b| b.iter(|| allocate(black_box(&s), -0.25).unwrap()));
}

fn statement(c: &mut Criterion) {
    c.bench_function("parse_and_summarize_statement", |b| {
        b.iter(|| summarize(&parse_statement(black_box(STATEMENT)).unwrap()).unwrap())
    });
}

fn backtest(c: &mut Criterion) {
    let data: Vec<_> = ["eurusd", "gbpusd", "usdjpy"]
        .iter()
        .enumerate()
        .map(|(i, s)| synthetic_series(s, 10_000, 1.0 + i as f64, 2e-4, 60, 1_293_840_000, i as u64))
        .collect();
    let inst = vec![Instrument { spread: 2e-4, digits: 5 }; 3];
    let pipeline = PipelineConfig::default();
    let exec = ExecConfig { threads: 1, ..ExecConfig::default() };
    let mut g = c.benchmark_group("backtest");
    g.sample_size(10);
    g.bench_function("3x10000_bars", |b| b.iter(|| run(&data, &inst, &pipeline, &exec, 1).unwrap()));
    g.finish();
}

criterion_group!(benches, model_steps, densities, portfolio, statement, backtest);
criterion_main!(benches);
