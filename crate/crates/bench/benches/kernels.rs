use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use guide_core::evidential::{guide_loss, BranchKind, MetaModel};
use guide_core::nn::Adam;
use guide_core::saliency::{eligible_layers, lrp, SalientSet, Stabilizer};
use guide_core::{Architecture, Model, Tensor};

fn lenet() -> Model {
    let mut m = Architecture::LeNet5.build(&[28, 28, 1], 10, 0).unwrap();
    m.freeze();
    m
}

fn digits(n: usize) -> Tensor {
    let data = (0..n * 784).map(|i| ((i * 7919) % 251) as f64 / 250.0).collect();
    Tensor::new(vec![n, 28, 28, 1], data).unwrap()
}

fn forward(c: &mut Criterion) {
    let model = lenet();
    let x = digits(64);
    c.bench_function("lenet_forward_b64", |b| b.iter(|| model.forward(black_box(&x), false).unwrap()));
}

fn relevance(c: &mut Criterion) {
    let model = lenet();
    let x = digits(1);
    c.bench_function("lenet_lrp_single", |b| {
        b.iter(|| lrp(&model, black_box(&x), 3, Stabilizer::default()).unwrap())
    });
}

fn meta_step(c: &mut Criterion) {
    let base = lenet();
    let eligible = eligible_layers(&base).unwrap();
    let salient = SalientSet { layers: eligible[1..4].to_vec(), eta: 0.9, achieved_mass_fraction: 0.9 };
    let meta = MetaModel::new(&base, &salient, BranchKind::Linear, 0).unwrap();
    let x = digits(64);
    let features = meta.features(&base, &x).unwrap();
    let targets = Tensor::new(vec![64, 10], vec![0.1; 640]).unwrap();
    let beta = vec![1.0; 10];
    c.bench_function("meta_step_b64", |b| {
        b.iter_batched(
            || (meta.clone(), Adam::for_target(1e-2, &meta)),
            |(mut m, mut opt)| {
                let trace = m.forward_features(&features).unwrap();
                let (_, d_alpha) = guide_loss(&trace.output, &targets, 0.1, &beta).unwrap();
                let (grads, _) = m.backward(&trace, &d_alpha).unwrap();
                opt.step(&mut m, &grads).unwrap();
                m
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, forward, relevance, meta_step);
criterion_main!(benches);
