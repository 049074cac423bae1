use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use soda_core::adapters::{backward, AdapterConfig, AdapterState, FrozenBase, Method};
use soda_core::linalg::{kron, svd};
use soda_core::random::{gaussian, orthogonal};
use soda_core::stiefel_opt::{stiefel_step, StiefelOptimizerState};

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = gaussian(&mut rng, 64, 64, 0.125);
    c.bench_function("svd_64", |b| b.iter(|| svd(black_box(&w)).unwrap()));

    let a = orthogonal(&mut rng, 8);
    let f = orthogonal(&mut rng, 8);
    c.bench_function("kron_8x8", |b| b.iter(|| kron(black_box(&a), black_box(&f)).unwrap()));

    let v = orthogonal(&mut rng, 64);
    let g = gaussian(&mut rng, 64, 64, 1.0);
    c.bench_function("stiefel_step_64", |b| {
        b.iter_batched(
            || (v.clone(), StiefelOptimizerState::new(64, 64, 1e-3, 0.9).unwrap()),
            |(v, mut st)| stiefel_step(&v, black_box(&g), &mut st).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });

    let base = FrozenBase::new(w.clone());
    let x = gaussian(&mut rng, 64, 32, 1.0);
    let dh = gaussian(&mut rng, 64, 32, 1.0);
    for method in [Method::Lora, Method::Koft, Method::SodaSvd] {
        let cfg = AdapterConfig::new(method, if method == Method::Lora { 4 } else { 3 });
        let state = AdapterState::init(&base, &cfg, &mut rng).unwrap();
        c.bench_function(&format!("backward_{}", method.name()), |b| {
            b.iter(|| backward(&base, &state, black_box(&x), black_box(&dh)).unwrap())
        });
    }
}

criterion_group!(benches, kernels);
criterion_main!(benches);
