use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use nwlab_core::cells::{CellSpec, ConvGruCell, TrajGruCell};
use nwlab_core::engine::Conv2dGeometry;
use nwlab_core::engine::ParamStore;
use nwlab_core::networks::{presets, Network};
use nwlab_core::{Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d");
    for &(ch, hw) in &[(16, 32), (64, 16)] {
        let x = random(&[4, ch, hw, hw], &mut rng);
        let w = random(&[ch, ch, 3, 3], &mut rng);
        let geom = Conv2dGeometry::new([1, 1], [1, 1]);
        group.bench_with_input(BenchmarkId::new("fwd_bwd", format!("{ch}x{hw}")), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv) = (tape.input_with_grad(x.clone()), tape.input_with_grad(w.clone()));
                let y = tape.conv2d(xv, wv, None, geom).unwrap();
                let s = tape.sum(y);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn warp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[4, 32, 16, 16], &mut rng);
    let u = random(&[4, 13, 16, 16], &mut rng);
    let v = random(&[4, 13, 16, 16], &mut rng);
    c.bench_function("bilinear_warp/13 links", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, uv, vv) = (tape.input_with_grad(x.clone()), tape.input_with_grad(u.clone()), tape.input_with_grad(v.clone()));
            let y = tape.bilinear_warp(xv, uv, vv).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn cells(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = CellSpec {
        input_channels: 16,
        has_input: true,
        hidden: 32,
        in_kernel: 3,
        in_stride: 1,
        in_pad: 1,
    };
    let x = random(&[4, 16, 16, 16], &mut rng);
    let h = random(&[4, 32, 16, 16], &mut rng);

    let mut store = ParamStore::new();
    let gru = ConvGruCell::new(&mut store, &mut rng, "c", spec.clone(), 5, 1).unwrap();
    c.bench_function("convgru_step/k5", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = gru.bind(&mut tape, &store).unwrap();
            let (xv, hv) = (tape.input(x.clone()), tape.input(h.clone()));
            black_box(gru.step(&mut tape, &bound, Some(xv), hv).unwrap());
        })
    });

    let mut store = ParamStore::new();
    let traj = TrajGruCell::new(&mut store, &mut rng, "t", spec, 13).unwrap();
    c.bench_function("trajgru_step/l13", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = traj.bind(&mut tape, &store).unwrap();
            let (xv, hv) = (tape.input(x.clone()), tape.input(h.clone()));
            black_box(traj.step(&mut tape, &store, &bound, Some(xv), hv).unwrap());
        })
    });
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::<f32>::build(&presets::load("radar-convgru-tiny").unwrap(), 0).unwrap();
    let frames = random(&[1, 5, 32, 32], &mut rng).map(|v| v.abs());
    let mut group = c.benchmark_group("network");
    group.sample_size(20);
    group.bench_function("radar-convgru-tiny/predict", |b| {
        b.iter(|| black_box(net.predict(&frames, None).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, warp, cells, network);
criterion_main!(benches);
