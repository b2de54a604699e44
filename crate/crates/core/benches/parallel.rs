// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use ctmsim::device::{DeviceParams, NoiseKind, NoiseSpec};
use ctmsim::net::{ActivationBound, Converters, ProgrammedNetwork, ReadConfig, Topology};
use ctmsim::par::Execution;
use ctmsim::train::Model;
use ctmsim::RngStream;

fn inference(c: &mut Criterion) {
    let topology = Topology::reference_mnist(ActivationBound::Bounded);
    let root = RngStream::new(7, 0);
    let net = Model::<f32>::init(&topology, &root)
        .unwrap()
        .to_spec()
        .unwrap();
    let programmed = ProgrammedNetwork::build(&net, &DeviceParams::default(), &root).unwrap();
    let engine = programmed
        .engine(&Converters::disabled(net.weighted_layers()))
        .unwrap();

    let n = 128;
    let mut r = RngStream::new(8, 0);
    let images: Vec<f32> = (0..n * 784).map(|_| r.uniform() as f32).collect();
    let read = ReadConfig::new(NoiseSpec::new(NoiseKind::Additive, 0.1).unwrap());

    let mut group = c.benchmark_group("reference_cnn_inference");
    group.sample_size(10);
    group.throughput(Throughput::Elements(n as u64));
    for (name, exec) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| engine.logits(&images, &read, &root, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
