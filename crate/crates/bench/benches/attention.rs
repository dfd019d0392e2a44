use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use xct_core::attention::{
    absact, crab_attention, init_layers, AttentionMode, AttentionSpec, Bound, CrabLayerParams, Stabilizer,
};
use xct_core::datapipe::TokenLayout;
use xct_core::{SeededRng, Tape, Tensor};

const PATCHES: usize = 12;
const D_MODEL: usize = 32;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_forward");
    group.sample_size(10);
    for channels in [7usize, 21, 63] {
        let layout = TokenLayout::new(PATCHES, channels);
        let n = layout.tokens();
        let mut rng = SeededRng::new(7);
        let x = Tensor::rand_uniform(&[4, n, D_MODEL], -1.0, 1.0, &mut rng);
        for mode in [AttentionMode::Crab, AttentionMode::CrabDecop] {
            let spec = AttentionSpec::new(mode, D_MODEL, 4, 2 * D_MODEL, layout, 16, 0.0, 0.0).unwrap();
            let params = init_layers(&spec, 1, &mut rng).unwrap();
            group.bench_with_input(BenchmarkId::new(mode.to_string(), n), &x, |b, x| {
                b.iter(|| {
                    let mut tape = Tape::new();
                    let vars = params.attach(&mut tape);
                    let lp = CrabLayerParams::bind(Bound::new(&params, &vars), 0).unwrap();
                    let xv = tape.constant(x.clone());
                    let mut rng = SeededRng::new(0);
                    let y = crab_attention(&mut tape, xv, &lp, &spec, false, &mut rng, None).unwrap();
                    black_box(tape.value(y).sum_all())
                })
            });
        }
    }
    group.finish();
}

fn kernel(c: &mut Criterion) {
    let mut rng = SeededRng::new(3);
    let a = Tensor::rand_uniform(&[256, 256], -1.0, 1.0, &mut rng);
    c.bench_function("absact_256", |b| {
        b.iter(|| black_box(absact(black_box(&a), Stabilizer::Stabilized).unwrap()))
    });
}

criterion_group!(benches, forward, kernel);
criterion_main!(benches);
