use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use pgpc::codec::{decode, encode, CodecConfig};
use pgpc::entropy::{decode_features, encode_features, FactorizedModel};
use pgpc::metrics::d1_mse;
use pgpc::network::{extract_features, Model, NetworkConfig, NetworkWeights};
use pgpc::prior::{posed_mesh, TemplateModel};
use pgpc::sparse::{cube_offsets, sparse_conv, KernelMap};
use pgpc::training::toy_dataset;
use pgpc::{ConvKernel, CoordSet, SparseTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn network() -> NetworkConfig {
    NetworkConfig {
        scales: 3,
        channels: vec![8, 16, 16],
        latent_channels: 8,
        vrn: true,
    }
}

fn sparse(c: &mut Criterion) {
    let t = TemplateModel::toy_humanoid();
    let sample = toy_dataset(&t, 1, &[7], 1).unwrap().remove(0);
    let coords = Arc::new(CoordSet::from_unsorted(sample.voxels.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let channels = 16;
    let feats: Vec<f32> = (0..coords.len() * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = SparseTensor::from_parts(coords.clone(), feats, channels, 0).unwrap();
    let mut k = ConvKernel::zeros(cube_offsets(), channels, channels, 1, true);
    for w in k.weights.iter_mut() {
        *w = rng.random_range(-0.1..0.1);
    }
    let mut g = c.benchmark_group("sparse");
    g.bench_function("kernel_map_7bit", |b| b.iter(|| KernelMap::conv(black_box(&coords), &cube_offsets(), 1)));
    g.bench_function("conv_16ch_7bit", |b| b.iter(|| sparse_conv(black_box(&x), &k).unwrap()));
    let weights = NetworkWeights::<f32>::init(&network(), 3).unwrap();
    g.bench_function("extract_7bit", |b| b.iter(|| extract_features(black_box(&sample.voxels), &weights).unwrap()));
    g.finish();
}

fn entropy(c: &mut Criterion) {
    let model = FactorizedModel::new(8, 3.0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let symbols: Vec<i32> = (0..80_000).map(|i| model.sample(i % 8, &mut rng)).collect();
    let bytes = encode_features(&symbols, &model).unwrap();
    let mut g = c.benchmark_group("entropy");
    g.bench_function("encode_80k", |b| b.iter(|| encode_features(black_box(&symbols), &model).unwrap()));
    g.bench_function("decode_80k", |b| b.iter(|| decode_features(black_box(&bytes), &model, 10_000, 8).unwrap()));
    g.finish();
}

fn codec(c: &mut Criterion) {
    let t = TemplateModel::toy_humanoid();
    let sample = toy_dataset(&t, 1, &[7], 6).unwrap().remove(0);
    let weights = NetworkWeights::init(&network(), 7).unwrap();
    let model = Model::new(weights, FactorizedModel::new(8, 4.0, 7)).unwrap();
    let templates = std::slice::from_ref(&t);
    let config = CodecConfig {
        params: Some(sample.params),
        ..CodecConfig::default()
    };
    let enc = encode(&sample.voxels, 7, templates, &model, &config).unwrap();
    let mut g = c.benchmark_group("codec");
    g.sample_size(10);
    g.bench_function("encode_7bit", |b| b.iter(|| encode(black_box(&sample.voxels), 7, templates, &model, &config).unwrap()));
    g.bench_function("decode_7bit", |b| b.iter(|| decode(black_box(&enc.bitstream), templates, &model).unwrap()));
    g.bench_function("prior_mesh", |b| b.iter(|| posed_mesh(&t, black_box(&sample.params)).unwrap()));
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cloud = || -> Vec<[f64; 3]> { (0..20_000).map(|_| std::array::from_fn(|_| rng.random_range(0..1024) as f64)).collect() };
    let (a, b) = (cloud(), cloud());
    c.bench_function("metrics/d1_20k", |bench| bench.iter(|| d1_mse(black_box(&a), &b).unwrap()));
}

criterion_group!(benches, sparse, entropy, codec, metrics);
criterion_main!(benches);
