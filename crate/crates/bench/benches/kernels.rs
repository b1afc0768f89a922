use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpnn_core::model::{backward, forward, forward_train};
use mpnn_core::mpggd::partition_masks;
use mpnn_core::noise_aware::{entropy_map, perturb};
use mpnn_core::{ArchDescriptor, LabelMask, ParamSet, Tensor3};

fn image(rng: &mut ChaCha8Rng, side: usize) -> Tensor3<f32> {
    Tensor3::from_vec(3, side, side, (0..3 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ParamSet::<f32>::init(&ArchDescriptor::tiny(), 0).unwrap();
    let x = image(&mut rng, 64);
    c.bench_function("forward tiny 64", |b| b.iter(|| forward(&params, black_box(&x)).unwrap()));
    c.bench_function("forward+backward tiny 64", |b| {
        let mut grads = params.zeros_like();
        b.iter(|| {
            let cache = forward_train(&params, black_box(&x)).unwrap();
            let dlogits = vec![1e-3f32; 64 * 64 * 3];
            backward(&params, &cache, &dlogits, &mut grads);
        })
    });
    c.bench_function("teacher entropy M=4 tiny 64", |b| {
        b.iter(|| {
            let stack: Vec<_> = perturb(&x, 4, 0.05, 1)
                .iter()
                .map(|v| forward(&params, v).unwrap())
                .collect();
            entropy_map(&stack)
        })
    });
}

fn partition(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let masks: Vec<LabelMask> = (0..5)
        .map(|_| LabelMask::new(256, 256, (0..256 * 256).map(|_| rng.random_range(0..3u8)).collect()).unwrap())
        .collect();
    c.bench_function("partition K=5 256", |b| b.iter(|| partition_masks(black_box(&masks)).unwrap()));
}

criterion_group!(benches, model, partition);
criterion_main!(benches);
