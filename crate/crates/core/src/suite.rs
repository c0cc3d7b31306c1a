//! The gradient-check battery: central differences against reverse mode for
//! every differentiable op, both recurrent cells and a small
//! encoder-forecaster, on random shapes and values (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{CellSpec, ConvGruCell, TrajGruCell};
use crate::engine::gradcheck::{finite_difference_check, param_spot_check, GradCheckConfig, GradCheckReport};
use crate::engine::{Conv2dGeometry, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::networks::{Mode, Network, NetworkConfig};

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Every op name in the battery, in run order.
pub const OPS: [&str; 17] = [
    "conv2d",
    "conv_transpose2d",
    "bilinear_warp",
    "local_filter",
    "softmax_channels",
    "sigmoid",
    "leaky_relu",
    "pointwise",
    "shape_ops",
    "batch_norm_train",
    "batch_norm_eval",
    "weighted_squared_error",
    "weighted_abs_error",
    "convgru_step",
    "trajgru_step",
    "trajgru_step_params",
    "encoder_forecaster",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    /// Case index with the largest error.
    pub worst_case: usize,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values kept at least `gap` away from every integer multiple of
/// `period`, so finite differences never straddle a kink.
fn off_grid(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, period: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(lo..hi);
        let r = (v / period).round() * period;
        if (v - r).abs() > gap {
            break v;
        }
    })
}

fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>], seed: u64) -> Result<GradCheckReport> {
    finite_difference_check(
        f,
        inputs,
        GradCheckConfig {
            max_coords: Some(40),
            seed,
            ..GradCheckConfig::default()
        },
    )
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn case(op: &'static str, rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    match op {
        "conv2d" | "conv_transpose2d" => {
            let (n, ci, co, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let (s, p, d) = (dim(rng, 1, 2), dim(rng, 0, 2), dim(rng, 1, 2));
            let (h, w) = (dim(rng, 4, 6), dim(rng, 4, 6));
            let geom = if op == "conv2d" {
                Conv2dGeometry::new([s, s], [p.min(k - 1), p.min(k - 1)]).with_dilation([d, d])
            } else {
                Conv2dGeometry::new([s, s], [p.min(k - 1), p.min(k - 1)])
            };
            let wshape = if op == "conv2d" { [co, ci, k, k] } else { [ci, co, k, k] };
            let x = uniform(rng, &[n, ci, h, w], -1.0, 1.0);
            let wt = uniform(rng, &wshape, -1.0, 1.0);
            let b = uniform(rng, &[co], -1.0, 1.0);
            let transposed = op == "conv_transpose2d";
            check(
                move |t, v| {
                    if transposed {
                        t.conv_transpose2d(v[0], v[1], Some(v[2]), geom)
                    } else {
                        t.conv2d(v[0], v[1], Some(v[2]), geom)
                    }
                },
                &[x, wt, b],
                seed,
            )
        }
        "bilinear_warp" => {
            let (n, c, l, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 3, 6), dim(rng, 3, 6));
            let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            // Flows reach outside the frame, exercising the zero padding.
            let u = off_grid(rng, &[n, l, h, w], -2.5, 2.5, 1.0, 1e-3);
            let v = off_grid(rng, &[n, l, h, w], -2.5, 2.5, 1.0, 1e-3);
            check(|t, v| t.bilinear_warp(v[0], v[1], v[2]), &[x, u, v], seed)
        }
        "local_filter" => {
            let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 3, 6), dim(rng, 3, 6));
            let size = [1, 3, 5][dim(rng, 0, 2)];
            let wt = uniform(rng, &[n, size * size, h, w], -1.0, 1.0);
            let fr = uniform(rng, &[n, c, h, w], -1.0, 1.0);
            check(move |t, v| t.local_filter(v[0], v[1], size), &[wt, fr], seed)
        }
        "softmax_channels" => {
            let shape = [dim(rng, 1, 2), dim(rng, 1, 9), dim(rng, 2, 4), dim(rng, 2, 4)];
            let x = uniform(rng, &shape, -3.0, 3.0);
            check(|t, v| t.softmax_channels(v[0]), &[x], seed)
        }
        "sigmoid" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5)];
            let x = uniform(rng, &shape, -4.0, 4.0);
            check(|t, v| Ok(t.sigmoid(v[0])), &[x], seed)
        }
        "leaky_relu" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5)];
            let x = off_grid(rng, &shape, -2.0, 2.0, 1e9, 1e-3);
            check(|t, v| Ok(t.leaky_relu(v[0], 0.2)), &[x], seed)
        }
        "pointwise" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
            let a = uniform(rng, &shape, -2.0, 2.0);
            let b = uniform(rng, &shape, -2.0, 2.0);
            let c = uniform(rng, &shape, -2.0, 2.0);
            let k = rng.random_range(-2.0..2.0);
            check(
                move |t, v| {
                    let ab = t.mul(v[0], v[1])?;
                    let s = t.add(ab, v[2])?;
                    let d = t.sub(s, v[0])?;
                    let om = t.one_minus(d);
                    Ok(t.scale(om, k))
                },
                &[a, b, c],
                seed,
            )
        }
        "shape_ops" => {
            let (n, h, w) = (dim(rng, 1, 2), dim(rng, 2, 4), dim(rng, 2, 4));
            let (c1, c2) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let a = uniform(rng, &[n, c1, h, w], -1.0, 1.0);
            let b = uniform(rng, &[n, c2, h, w], -1.0, 1.0);
            check(
                move |t, v| {
                    let cat = t.concat(&[v[0], v[1]], 1)?;
                    let s = t.slice(cat, 1, 1, c1 + c2 - 1)?;
                    let parts = t.chunk(cat, 0, n)?;
                    let prod = t.mul(parts[0], parts[0])?;
                    let ps = t.sum(prod);
                    let ss = t.sum(s);
                    t.add(ps, ss)
                },
                &[a, b],
                seed,
            )
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let c = dim(rng, 1, 3);
            let shape = [dim(rng, 1, 3), c, dim(rng, 2, 4), dim(rng, 2, 4)];
            let x = uniform(rng, &shape, -2.0, 2.0);
            let g = uniform(rng, &[c], 0.5, 1.5);
            let b = uniform(rng, &[c], -1.0, 1.0);
            if op == "batch_norm_train" {
                check(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0), &[x, g, b], seed)
            } else {
                let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
                check(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5), &[x, g, b], seed)
            }
        }
        "weighted_squared_error" | "weighted_abs_error" => {
            let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4)];
            let target = uniform(rng, &shape, 0.0, 1.0);
            let offset = off_grid(rng, &shape, -0.5, 0.5, 1e9, 1e-3);
            let mut pred = target.clone();
            pred.add_assign(&offset);
            let weights = Tensor::from_fn(&shape, |_| [1.0, 2.0, 5.0, 10.0, 30.0][rng.random_range(0..5)]);
            let squared = op == "weighted_squared_error";
            check(
                move |t, v| {
                    if squared {
                        t.weighted_squared_error(v[0], &target, &weights)
                    } else {
                        t.weighted_abs_error(v[0], &target, &weights)
                    }
                },
                &[pred],
                seed,
            )
        }
        "convgru_step" | "trajgru_step" => {
            let (ci, ch, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 3, 5), dim(rng, 3, 5));
            let has_input = op == "trajgru_step" || rng.random_bool(0.7);
            let spec = CellSpec {
                input_channels: ci,
                has_input,
                hidden: ch,
                in_kernel: 3,
                in_stride: 1,
                in_pad: 1,
            };
            let mut store = ParamStore::<f64>::new();
            let x = uniform(rng, &[1, ci, h, w], -1.0, 1.0);
            let hp = uniform(rng, &[1, ch, h, w], -1.0, 1.0);
            if op == "convgru_step" {
                let k = [1, 3, 5][dim(rng, 0, 2)];
                let d = dim(rng, 1, 2);
                let cell = ConvGruCell::new(&mut store, rng, "c", spec, k, d)?;
                check(
                    move |t, v| {
                        let b = cell.bind(t, &store)?;
                        cell.step(t, &b, has_input.then_some(v[0]), v[1])
                    },
                    &[x, hp],
                    seed,
                )
            } else {
                let links = dim(rng, 1, 3);
                let cell = TrajGruCell::new(&mut store, rng, "t", spec, links)?;
                randomise_flow_generator(&mut store, rng);
                check(
                    move |t, v| {
                        let b = cell.bind(t, &store)?;
                        cell.step(t, &store, &b, Some(v[0]), v[1])
                    },
                    &[x, hp],
                    seed,
                )
            }
        }
        "trajgru_step_params" => {
            let (ci, ch, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 3, 5), dim(rng, 3, 5));
            let spec = CellSpec {
                input_channels: ci,
                has_input: true,
                hidden: ch,
                in_kernel: 3,
                in_stride: 1,
                in_pad: 1,
            };
            let mut store = ParamStore::<f64>::new();
            let links = dim(rng, 1, 3);
            let cell = TrajGruCell::new(&mut store, rng, "t", spec, links)?;
            randomise_flow_generator(&mut store, rng);
            let x = uniform(rng, &[1, ci, h, w], -1.0, 1.0);
            let hp = uniform(rng, &[1, ch, h, w], -1.0, 1.0);
            let proj = uniform(rng, &[1, ch, h, w], -1.0, 1.0);
            param_spot_check(
                &store,
                |t, s| {
                    let b = cell.bind(t, s)?;
                    let (xv, hv, pv) = (t.input(x.clone()), t.input(hp.clone()), t.input(proj.clone()));
                    let out = cell.step(t, s, &b, Some(xv), hv)?;
                    let m = t.mul(out, pv)?;
                    Ok(t.sum(m))
                },
                40,
                GradCheckConfig {
                    seed,
                    ..GradCheckConfig::default()
                },
            )
        }
        "encoder_forecaster" => {
            let kind = if rng.random_bool(0.5) { "convgru" } else { "trajgru" };
            let cfg = tiny_network(kind);
            let mut net = Network::<f64>::build(&cfg, rng.random())?;
            randomise_flow_generator(&mut net.params, rng);
            let frames = uniform(rng, &[1, 2, 6, 6], 0.0, 1.0);
            let target = uniform(rng, &[1, 2, 6, 6], 0.0, 1.0);
            let arch = net.clone();
            let by_params = param_spot_check(
                &net.params,
                |t, s| {
                    let mut n = arch.clone();
                    n.params = s.clone();
                    let fwd = n.forward(t, &frames, None, Mode::Train)?;
                    let tv = t.input(target.clone());
                    let d = t.sub(fwd.prediction, tv)?;
                    let sq = t.mul(d, d)?;
                    Ok(t.sum(sq))
                },
                30,
                GradCheckConfig {
                    seed,
                    ..GradCheckConfig::default()
                },
            )?;
            Ok(by_params)
        }
        _ => unreachable!("unknown op {op}"),
    }
}

/// Give the zero-initialised flow generators small random weights so the
/// flows are non-trivial and off the integer grid.
fn randomise_flow_generator(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| n.contains(".gamma.")).map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.08..0.08);
        }
    }
}

fn tiny_network(kind: &str) -> NetworkConfig {
    let cell = if kind == "convgru" { "state_kernel = 3" } else { "links = 2" };
    let text = format!(
        r#"
name = "gradcheck-{kind}"
architecture = "encoder-forecaster"
frame_res = [6, 6]
in_frames = 2
out_frames = 2

[[encoder]]
name = "econv1"
kind = "conv"
kernel = 3
stride = 2
pad = 1
channels = [4, 2]
in_res = [6, 6]
out_res = [3, 3]
input = "in"

[[encoder]]
name = "ernn1"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [2, 3]
in_res = [3, 3]
out_res = [3, 3]
input = "econv1"

[[forecaster]]
name = "frnn1"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [3, 3]
in_res = [3, 3]
out_res = [3, 3]
input = "-"
state = "ernn1"

[[forecaster]]
name = "fdeconv1"
kind = "deconv"
kernel = 4
stride = 2
pad = 1
channels = [3, 2]
in_res = [3, 3]
out_res = [6, 6]
input = "frnn1"

[[forecaster]]
name = "fconv2"
kind = "conv"
kernel = 1
channels = [2, 1]
in_res = [6, 6]
out_res = [6, 6]
input = "fdeconv1"
"#
    );
    NetworkConfig::from_toml(&text).expect("battery network is valid")
}

/// Run `cases` random cases of `op`.
pub fn check_op(op: &'static str, cases: usize, seed: u64) -> Result<OpResult> {
    let mut out = OpResult {
        op,
        cases,
        max_rel_error: 0.0,
        worst_case: 0,
    };
    for c in 0..cases {
        let case_seed = seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let r = case(op, &mut rng, case_seed)?;
        if r.max_rel_error > out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst_case = c;
        }
    }
    Ok(out)
}

/// Run the whole battery.
pub fn run_battery(cases: usize, seed: u64) -> Result<Vec<OpResult>> {
    OPS.iter().map(|&op| check_op(op, cases, seed)).collect()
}
