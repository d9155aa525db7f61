use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use iqvae::ar::{ArConfig, ArModel};
use iqvae::ot::{sample_directions, sliced_gw, Domain, PointSet};
use iqvae::par;
use iqvae::rng::Rng;
use iqvae::tensor::nn::mean_grads;
use iqvae::tensor::Graph;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn cloud(n: usize, d: usize, seed: u64) -> PointSet {
    let mut rng = Rng::new(seed);
    let pts: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    PointSet::new(pts, n, d, Domain::Other).unwrap()
}

fn bench_sliced_gw(c: &mut Criterion) {
    let mut group = c.benchmark_group("sliced_gw");
    let a = cloud(64, 16, 1);
    let b = cloud(64, 16, 2);
    let proj = sample_directions(16, 512, 3).unwrap();
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new(name, "n64_d16_L512"), |bch| {
            bch.iter(|| sliced_gw(black_box(&a), black_box(&b), &proj).unwrap())
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn bench_ar_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("ar_batch_grad");
    group.sample_size(20);
    let cfg = ArConfig::default();
    let model = ArModel::new(cfg.clone(), 0).unwrap();
    let mut rng = Rng::new(9);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..16)
        .map(|_| {
            let cond = (0..cfg.cond_len).map(|_| rng.below(cfg.cond_vocab as u64) as usize).collect();
            let image = (0..cfg.image_len).map(|_| rng.below(cfg.image_vocab as u64) as usize).collect();
            (cond, image)
        })
        .collect();
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new(name, "batch16"), |bch| {
            bch.iter(|| {
                let grads = par::map_indexed(pairs.len(), |i| {
                    let mut g = Graph::new();
                    let p = model.params().bind(&mut g);
                    let loss = model.nll_var(&mut g, &p, &pairs[i].0, &pairs[i].1, &[]).unwrap();
                    g.backward(loss).unwrap();
                    g.grads_of(p.vars())
                });
                black_box(mean_grads(grads))
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench_sliced_gw, bench_ar_batch);
criterion_main!(benches);
