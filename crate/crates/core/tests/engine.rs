use nwlab_core::engine::init::{fan_in, msra};
use nwlab_core::engine::optim::{clip_global_norm, AdaGrad, AdaGradConfig, Adam, AdamConfig};
use nwlab_core::engine::serialize::{checkpoint_from_bytes, checkpoint_to_bytes, tensor_from_bytes, tensor_to_bytes};
use nwlab_core::engine::{Conv2dGeometry, GradStore, ParamStore};
use nwlab_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: Conv2dGeometry) -> Tensor<f64> {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ext = |n: usize, k: usize, a: usize| (n + 2 * g.pad[a] - g.dilation[a] * (k - 1) - 1) / g.stride[a] + 1;
    let (ho, wo) = (ext(h, kh, 0), ext(wd, kw, 1));
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for p in 0..kh {
                            for q in 0..kw {
                                let y = (i * g.stride[0] + p * g.dilation[0]) as isize - g.pad[0] as isize;
                                let xx = (j * g.stride[1] + q * g.dilation[1]) as isize - g.pad[1] as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * ci + c) * kh + p) * kw + q]
                                    * x.data()[((b * ci + c) * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, g: Conv2dGeometry) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.input(x.clone()), tape.input(w.clone()));
    let y = tape.conv2d(xv, wv, None, g).unwrap();
    tape.value(y).clone()
}

fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>, g: Conv2dGeometry) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.input(x.clone()), tape.input(w.clone()));
    let y = tape.conv_transpose2d(xv, wv, None, g).unwrap();
    tape.value(y).clone()
}

fn warp(x: &Tensor<f64>, u: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, uv, vv) = (tape.input(x.clone()), tape.input(u.clone()), tape.input(v.clone()));
    let y = tape.bilinear_warp(xv, uv, vv).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_hand_example() {
    let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    let w = Tensor::ones(&[1, 1, 2, 2]);
    let y = conv(&x, &w, Conv2dGeometry::default());
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[8.0, 12.0, 20.0, 24.0]);
    let x1 = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    assert_eq!(conv(&x1, &w, Conv2dGeometry::default()).data(), &[12.0, 16.0, 24.0, 28.0]);
}

#[test]
fn transposed_conv_spreads_a_single_value() {
    let x = Tensor::full(&[1, 1, 1, 1], 2.0);
    let w = Tensor::ones(&[1, 1, 2, 2]);
    let y = conv_t(&x, &w, Conv2dGeometry::default());
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[2.0; 4]);
}

#[test]
fn extents_of_the_layer_table() {
    let g = |s, p| Conv2dGeometry::new([s, s], [p, p]);
    // k7 s5 p1 on 480, k5 s3 p1 on 96, k3 s2 p1 on 32.
    assert_eq!(g(5, 1).conv_extent(0, 480, 7), Some(96));
    assert_eq!(g(3, 1).conv_extent(0, 96, 5), Some(32));
    assert_eq!(g(2, 1).conv_extent(0, 32, 3), Some(16));
    assert_eq!(g(2, 1).transposed_extent(0, 16, 4), Some(32));
    assert_eq!(g(3, 1).transposed_extent(0, 32, 5), Some(96));
    assert_eq!(g(5, 1).transposed_extent(0, 96, 7), Some(480));
    assert_eq!(g(1, 0).conv_extent(0, 2, 3), None);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let (s, p, d, k) = (
            rng.random_range(1..=3),
            rng.random_range(0..=2),
            rng.random_range(1..=2),
            rng.random_range(1..=4),
        );
        let (h, w) = (rng.random_range(6..12), rng.random_range(6..12));
        let g = Conv2dGeometry::new([s, s], [p, p]).with_dilation([d, d]);
        if g.conv_extent(0, h, k).is_none() || g.conv_extent(1, w, k).is_none() {
            continue;
        }
        let x = random(&[2, 3, h, w], &mut rng);
        let wt = random(&[4, 3, k, k], &mut rng);
        let diff = conv(&x, &wt, g).max_abs_diff(&naive_conv(&x, &wt, g));
        assert!(diff < 1e-12, "conv {s} {p} {d} {k}: {diff}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transposed_conv_is_the_adjoint(seed in any::<u64>(), s in 1usize..4, p in 0usize..3, k in 1usize..5, h in 4usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Conv2dGeometry::new([s, s], [p, p]);
        prop_assume!(g.conv_extent(0, h, k).is_some());
        let x = random(&[1, 2, h, h], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let y_shape = conv(&x, &w, g).shape().to_vec();
        let y = random(&y_shape, &mut rng);
        // conv weight Co x Ci x k x k is read as Cin x Cout by the transpose.
        let back = conv_t(&y, &w, g);
        prop_assume!(back.shape() == x.shape());
        let lhs = conv(&x, &w, g).dot(&y);
        let rhs = x.dot(&back);
        prop_assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn tensor_bytes_round_trip(data in prop::collection::vec(-1e6f64..1e6, 1..64)) {
        let t = Tensor::from_vec(&[data.len()], data).unwrap();
        let back: Tensor<f64> = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn checkpoint_round_trip(sizes in prop::collection::vec(1usize..20, 1..6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        for (i, n) in sizes.iter().enumerate() {
            store.insert(format!("layer{i}.w"), random(&[*n, 2], &mut rng).cast()).unwrap();
        }
        let back: ParamStore<f32> = checkpoint_from_bytes(&checkpoint_to_bytes(&store)).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for ((_, a, x), (_, b, y)) in back.iter().zip(store.iter()) {
            prop_assert_eq!(a, b);
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn clipping_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..30), c in 0.1f64..50.0) {
        let mut g = vec![Tensor::from_vec(&[v.len()], v).unwrap()];
        clip_global_norm(&mut g, c).unwrap();
        let once = g.clone();
        let norm = g[0].sum_squares().sqrt();
        prop_assert!(norm <= c * (1.0 + 1e-12));
        clip_global_norm(&mut g, c).unwrap();
        prop_assert!(g[0].max_abs_diff(&once[0]) <= 1e-12 * c);
    }
}

#[test]
fn zero_flow_warp_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 3, 5, 6], &mut rng);
    let z = Tensor::zeros(&[1, 1, 5, 6]);
    assert_eq!(warp(&x, &z, &z), x);
}

#[test]
fn integer_shift_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (6, 7);
    let x = random(&[1, 2, h, w], &mut rng);
    for (du, dv) in [(1i64, 0i64), (-2, 1), (0, -3), (3, 2)] {
        let u = Tensor::full(&[1, 1, h, w], du as f64);
        let v = Tensor::full(&[1, 1, h, w], dv as f64);
        let y = warp(&x, &u, &v);
        for c in 0..2 {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let (si, sj) = (i + dv, j + du);
                    let expect = if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                        0.0
                    } else {
                        x.data()[(c * h + si as usize) * w + sj as usize]
                    };
                    assert_eq!(y.data()[(c * h + i as usize) * w + j as usize], expect);
                }
            }
        }
    }
}

#[test]
fn half_pixel_warp_averages_neighbours() {
    let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    let u = Tensor::full(&[1, 1, 1, 2], 0.5);
    let v = Tensor::zeros(&[1, 1, 1, 2]);
    let y = warp(&x, &u, &v);
    assert_eq!(y.data()[0], 1.5);
    // The right neighbour of the last column is outside the frame.
    assert_eq!(y.data()[1], 1.0);
}

#[test]
fn warp_stacks_links_along_channels() {
    let x = Tensor::from_vec(&[1, 2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let u = Tensor::from_vec(&[1, 2, 1, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let v = Tensor::zeros(&[1, 2, 1, 3]);
    let y = warp(&x, &u, &v);
    assert_eq!(y.shape(), &[1, 4, 1, 3]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let l = tape.leaky_relu(x, 0.2);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
    assert_eq!(tape.value(s).data()[1], 0.5);
}

#[test]
fn concat_adds_extents() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(Tensor::zeros(&[1, 2, 3, 3]));
    let b = tape.input(Tensor::ones(&[1, 5, 3, 3]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[1, 7, 3, 3]);
    let d = tape.input(Tensor::ones(&[1, 5, 4, 3]));
    assert!(tape.concat(&[a, d], 1).is_err());
}

#[test]
fn clip_examples() {
    let mut g: Vec<Tensor<f64>> = vec![Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 10.0).unwrap(), 1.0);
    assert_eq!(g[0].data(), &[3.0, 4.0]);
    let f = clip_global_norm(&mut g, 1.0).unwrap();
    assert!((f - 0.2).abs() < 1e-15);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);
    assert!(clip_global_norm(&mut g, 0.0).is_err());
}

fn single(v: f64) -> (ParamStore<f64>, GradStore<f64>) {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::full(&[1], 1.0)).unwrap();
    let g = GradStore::from_tensors(vec![Tensor::full(&[1], v)]);
    (s, g)
}

#[test]
fn adam_closed_form() {
    let c = AdamConfig::default();
    assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (1e-4, 0.5, 0.999, 1e-8));
    let (mut s, g) = single(0.3);
    let mut opt = Adam::new(&s, c);
    let mut w = 1.0;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for t in 1..=5 {
        opt.step(&mut s, &g).unwrap();
        m = 0.5 * m + 0.5 * 0.3;
        v = 0.999 * v + 0.001 * 0.09;
        let mh = m / (1.0 - 0.5f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 1e-4 * mh / (vh.sqrt() + 1e-8);
        assert!((s.tensors()[0].data()[0] - w).abs() < 1e-15);
    }
    // The first bias-corrected step has magnitude close to lr.
    assert!((1.0 - 1e-4 * 5.0 - w).abs() < 1e-9);

    let (mut s, g) = single(0.0);
    Adam::new(&s, c).step(&mut s, &g).unwrap();
    assert_eq!(s.tensors()[0].data()[0], 1.0);
}

#[test]
fn adagrad_closed_form() {
    let c = AdaGradConfig::default();
    assert_eq!((c.lr, c.eps), (1e-4, 1e-8));
    let (mut s, g) = single(-2.0);
    let mut opt = AdaGrad::new(&s, c);
    let mut w = 1.0;
    let mut acc = 0.0f64;
    for _ in 0..4 {
        opt.step(&mut s, &g).unwrap();
        acc += 4.0;
        w -= 1e-4 * -2.0 / (acc.sqrt() + 1e-8);
        assert!((s.tensors()[0].data()[0] - w).abs() < 1e-15);
    }
    assert_eq!(opt.accumulators()[0].data()[0], 16.0);
    let (mut s, g) = single(0.0);
    AdaGrad::new(&s, c).step(&mut s, &g).unwrap();
    assert_eq!(s.tensors()[0].data()[0], 1.0);
}

#[test]
fn msra_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = [64, 32, 5, 5];
    assert_eq!(fan_in(&shape), 800);
    let w: Tensor<f64> = msra(&shape, &mut rng);
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let var = w.sum_squares() / n - mean * mean;
    let target = 2.0 / 800.0;
    assert!(mean.abs() < 3.0 * (target / n).sqrt(), "mean {mean}");
    assert!((var / target - 1.0).abs() < 0.03, "var {var}");
}

#[test]
fn msra_is_deterministic_in_the_seed() {
    let a: Tensor<f32> = msra(&[8, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(5));
    let b: Tensor<f32> = msra(&[8, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(5));
    let c: Tensor<f32> = msra(&[8, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn corrupt_bytes_are_rejected() {
    let t = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    let mut bytes = tensor_to_bytes(&t);
    assert!(tensor_from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
    bytes[0] = b'X';
    assert!(tensor_from_bytes::<f64>(&bytes).is_err());
}
