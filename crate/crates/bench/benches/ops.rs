//! Criterion benchmarks for the hot kernels and model forwards.

use criterion::{criterion_group, criterion_main, Criterion};
use depthbench_core::blocks::ForwardCtx;
use depthbench_core::mono::{build_mono_model, MonoConfig, MonoStructure};
use depthbench_core::rng::DetRng;
use depthbench_core::ssim::ssim_value;
use depthbench_core::stereo::{build_anynet, AnyNetConfig};
use depthbench_core::tensor::{Tape, Tensor};

fn random_tensor(rng: &mut DetRng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform()).collect();
    Tensor::new(shape, data).unwrap()
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = DetRng::seed_from_u64(1);
    let input = random_tensor(&mut rng, vec![1, 16, 64, 64]);
    let weight = random_tensor(&mut rng, vec![16, 16, 3, 3]);
    let bias = random_tensor(&mut rng, vec![16]);

    c.bench_function("conv2d_forward_16x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let i = tape.constant(input.clone());
            let w = tape.constant(weight.clone());
            let bs = tape.constant(bias.clone());
            tape.conv2d(i, w, bs, 1, 1).unwrap()
        })
    });

    c.bench_function("conv2d_forward_backward_16x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let i = tape.leaf(input.clone(), true);
            let w = tape.leaf(weight.clone(), true);
            let bs = tape.leaf(bias.clone(), true);
            let out = tape.conv2d(i, w, bs, 1, 1).unwrap();
            let loss = tape.sum(out).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn bench_ssim(c: &mut Criterion) {
    let mut rng = DetRng::seed_from_u64(2);
    let x = random_tensor(&mut rng, vec![1, 1, 64, 64]);
    let y = random_tensor(&mut rng, vec![1, 1, 64, 64]);
    c.bench_function("ssim_64x64", |b| b.iter(|| ssim_value(&x, &y, 1.0).unwrap()));
}

fn bench_model_forwards(c: &mut Criterion) {
    let mut rng = DetRng::seed_from_u64(3);

    let mut mono = build_mono_model(MonoConfig::new(MonoStructure::ThreeOneThree).with_input_size(64)).unwrap();
    mono.init(1);
    let image = random_tensor(&mut rng, vec![1, 3, 64, 64]);
    c.bench_function("mono_313_forward_64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::new(&mut tape, false);
            let x = ctx.tape.constant(image.clone());
            mono.forward(&mut ctx, x).unwrap()
        })
    });

    let mut stereo = build_anynet(AnyNetConfig::default().with_max_disparity(32).with_spn(Some(1))).unwrap();
    stereo.init(2);
    let left = random_tensor(&mut rng, vec![1, 3, 48, 96]);
    let right = random_tensor(&mut rng, vec![1, 3, 48, 96]);
    for stage in [1usize, 4] {
        c.bench_function(&format!("anynet_forward_stage{stage}_48x96"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::new(&mut tape, false);
                let l = ctx.tape.constant(left.clone());
                let r = ctx.tape.constant(right.clone());
                stereo.forward(&mut ctx, l, r, stage).unwrap()
            })
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv2d, bench_ssim, bench_model_forwards
}
criterion_main!(benches);
