use nwlab_core::cells::{param_count, ConvLayer, FlowMode};
use nwlab_core::engine::gradcheck::{param_spot_check, GradCheckConfig};
use nwlab_core::networks::{presets, Mode, Network, NetworkConfig};
use nwlab_core::{Error, Tape, Tensor};

fn frames(n: usize, j: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(&[n, j, h, w], |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}

#[test]
fn full_size_param_counts() {
    let expect = [
        ("mnistpp-convgru-k3", 2_500_000),
        ("mnistpp-convgru-k5", 4_664_000),
        ("mnistpp-convgru-k7", 7_908_000),
        ("mnistpp-trajgru-l5", 2_790_000),
        ("mnistpp-trajgru-l13", 3_948_000),
        ("mnistpp-dfn", 4_725_000),
    ];
    for (name, approx) in expect {
        let net = Network::<f32>::build(&presets::load(name).unwrap(), 0).unwrap();
        let got = net.param_count() as f64;
        assert!((got - approx as f64).abs() / (approx as f64) < 1e-3, "{name}: {got}");
    }
}

#[test]
fn frnn1_has_no_input_kernels() {
    let net = Network::<f32>::build(&presets::load("mnistpp-convgru-k5-desk").unwrap(), 0).unwrap();
    assert!(net.params.id("frnn1.wxz").is_none());
    assert!(net.params.id("frnn2.wxz").is_some());
    assert!(net.params.id("frnn1.whz").is_some());
}

#[test]
fn desk_forward_shapes() {
    for name in ["mnistpp-convgru-k5-desk", "mnistpp-trajgru-l5-desk", "mnistpp-dfn-desk", "mnistpp-cnn2d-desk"] {
        let cfg = presets::load(name).unwrap();
        let net = Network::<f64>::build(&cfg, 1).unwrap();
        let [h, w] = cfg.frame_res;
        let x = frames(2, cfg.in_frames, h, w, 3);
        let y = net.predict(&x, None).unwrap();
        assert_eq!(y.shape(), &[2, cfg.out_frames, h, w], "{name}");
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn wrong_input_extent_is_rejected() {
    let cfg = presets::load("mnistpp-convgru-k5-desk").unwrap();
    let net = Network::<f64>::build(&cfg, 1).unwrap();
    let x = frames(1, cfg.in_frames, 16, 16, 0);
    assert!(matches!(net.predict(&x, None), Err(Error::Shape { .. })));
}

#[test]
fn bad_resolution_names_the_row() {
    let text = presets::source("mnistpp-convgru-k5-desk").unwrap();
    let broken = text.replacen("out_res = [16, 16]\ninput = \"ernn1\"", "out_res = [15, 15]\ninput = \"ernn1\"", 1);
    assert_ne!(broken, text);
    match NetworkConfig::from_toml(&broken) {
        Err(Error::Config { row, .. }) => assert_eq!(row, "edown1"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dangling_input_is_rejected() {
    let text = presets::source("mnistpp-convgru-k5-desk").unwrap();
    let broken = text.replacen("input = \"edown1\"", "input = \"nowhere\"", 1);
    match NetworkConfig::from_toml(&broken) {
        Err(Error::Config { row, detail }) => {
            assert_eq!(row, "ernn2");
            assert!(detail.contains("dangling"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn state_handoff_must_be_reversed() {
    let text = presets::source("mnistpp-convgru-k5-desk").unwrap();
    let broken = text.replacen("state = \"ernn3\"", "state = \"ernn2\"", 1);
    assert!(matches!(NetworkConfig::from_toml(&broken), Err(Error::Config { .. })));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = presets::load("hko-trajgru").unwrap();
    let back = NetworkConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn seeded_build_is_deterministic() {
    let cfg = presets::load("mnistpp-trajgru-l5-desk").unwrap();
    let a = Network::<f32>::build(&cfg, 7).unwrap();
    let b = Network::<f32>::build(&cfg, 7).unwrap();
    let c = Network::<f32>::build(&cfg, 8).unwrap();
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_ne!(a.params.tensors(), c.params.tensors());
}

#[test]
fn trajgru_with_pinned_zero_flow_ignores_flow_parameters() {
    let cfg = presets::load("mnistpp-trajgru-l5-desk").unwrap();
    let mut net = Network::<f64>::build(&cfg, 2).unwrap();
    let x = frames(1, cfg.in_frames, 32, 32, 5);
    let base = net.predict(&x, None).unwrap();
    net.set_flow_mode(FlowMode::Pinned);
    // gamma is zero-initialised, so learned and pinned flows coincide.
    assert_eq!(net.predict(&x, None).unwrap(), base);
}

#[test]
fn batch_norm_running_stats_move_toward_batch() {
    let cfg = presets::load("mnistpp-cnn2d-desk").unwrap();
    let mut net = Network::<f64>::build(&cfg, 0).unwrap();
    let x = frames(2, 10, 32, 32, 9);
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, &x, None, Mode::Train).unwrap();
    assert_eq!(fwd.moments.len(), 8);
    let batch_mean = fwd.moments[0].1.mean[0];
    net.update_running_stats(&fwd.moments).unwrap();
    let id = net.buffers.id("enc1.bn.running_mean").unwrap();
    assert!((net.buffers.get(id).data()[0] - 0.1 * batch_mean).abs() < 1e-12);
}

#[test]
fn state_dict_round_trip() {
    let cfg = presets::load("mnistpp-cnn2d-desk").unwrap();
    let a = Network::<f32>::build(&cfg, 0).unwrap();
    let mut b = Network::<f32>::build(&cfg, 1).unwrap();
    b.load_state_dict(&a.state_dict()).unwrap();
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_eq!(a.buffers.tensors(), b.buffers.tensors());
}

fn tiny(kind: &str, cell: &str) -> NetworkConfig {
    let text = format!(
        r#"
name = "tiny"
architecture = "encoder-forecaster"
frame_res = [6, 6]
in_frames = 2
out_frames = 2

[[encoder]]
name = "ernn1"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [4, 3]
in_res = [6, 6]
out_res = [6, 6]
input = "in"

[[forecaster]]
name = "frnn1"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [3, 3]
in_res = [6, 6]
out_res = [6, 6]
input = "-"
state = "ernn1"

[[forecaster]]
name = "fconv"
kind = "conv"
kernel = 1
channels = [3, 1]
in_res = [6, 6]
out_res = [6, 6]
input = "frnn1"
"#
    );
    NetworkConfig::from_toml(&text).unwrap()
}

#[test]
fn whole_network_parameter_gradients() {
    for (kind, cell) in [("convgru", "state_kernel = 3"), ("trajgru", "links = 2")] {
        let cfg = tiny(kind, cell);
        let mut net = Network::<f64>::build(&cfg, 4).unwrap();
        // Move gamma off zero so the flows are non-trivial.
        for (id, name, _) in net.params.iter().map(|(i, n, t)| (i, n.to_string(), t.clone())).collect::<Vec<_>>() {
            if name.contains("gamma") {
                let t = net.params.get_mut(id);
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.05 * (((k * 37) % 11) as f64 - 5.0) / 5.0;
                }
            }
        }
        let x = frames(1, 2, 6, 6, 11);
        let target = frames(1, 2, 6, 6, 12);
        let arch = net.clone();
        let report = param_spot_check(
            &net.params,
            |tape, store| {
                let mut n = arch.clone();
                n.params = store.clone();
                let fwd = n.forward(tape, &x, None, Mode::Train)?;
                let t = tape.input(target.clone());
                let d = tape.sub(fwd.prediction, t)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.sum(sq))
            },
            60,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
    }
}

#[test]
fn pinned_single_link_network_matches_pointwise_convgru() {
    let mut traj = Network::<f64>::build(&tiny("trajgru", "links = 1"), 3).unwrap();
    traj.set_flow_mode(FlowMode::Pinned);
    let mut conv = Network::<f64>::build(&tiny("convgru", "state_kernel = 1"), 4).unwrap();
    let names: Vec<(nwlab_core::engine::ParamId, String)> = conv.params.iter().map(|(i, n, _)| (i, n.to_string())).collect();
    for (id, name) in names {
        let src = name.replace(".wh", ".link.0.wh");
        let tid = traj.params.id(&src).unwrap_or_else(|| panic!("no {src}"));
        *conv.params.get_mut(id) = traj.params.get(tid).clone();
    }
    let x = frames(2, 2, 6, 6, 21);
    let mut ta = Tape::new();
    let a = traj.forward(&mut ta, &x, None, Mode::Eval).unwrap();
    let mut tb = Tape::new();
    let b = conv.forward(&mut tb, &x, None, Mode::Eval).unwrap();
    assert!(ta.value(a.prediction).max_abs_diff(tb.value(b.prediction)) < 1e-10);
}

#[test]
fn zero_parameters_predict_zero() {
    let mut net = Network::<f64>::build(&tiny("trajgru", "links = 3"), 5).unwrap();
    for t in net.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let y = net.predict(&frames(1, 2, 6, 6, 2), None).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn pointwise_conv_layer_counts() {
    let net = Network::<f64>::build(&tiny("convgru", "state_kernel = 3"), 0).unwrap();
    let counts = net.layer_param_counts();
    assert_eq!(counts.iter().find(|(n, _)| n == "fconv").unwrap().1, 3 + 1);
    let mut store = nwlab_core::engine::ParamStore::<f64>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let c = ConvLayer::new(&mut store, &mut rng, "c", 1, 1, 1, Default::default(), false).unwrap();
    assert_eq!(param_count(&store, &c.param_ids()), 2);
}

#[test]
fn hko_resolution_chain() {
    let cfg = presets::load("hko-trajgru").unwrap();
    assert_eq!((cfg.in_frames, cfg.out_frames), (5, 20));
    let chain: Vec<[usize; 2]> = ["econv1", "ernn1", "edown1", "ernn2", "edown2", "ernn3"]
        .iter()
        .map(|n| cfg.layer(n).unwrap().out_res)
        .collect();
    assert_eq!(chain, vec![[96, 96], [96, 96], [32, 32], [32, 32], [16, 16], [16, 16]]);
    for l in cfg.encoder.iter().chain(&cfg.forecaster) {
        assert_eq!(l.computed_out_res(), Some(l.out_res), "{}", l.name);
    }
    let last = cfg.forecaster.last().unwrap();
    assert_eq!((last.out_res, last.channels[1]), ([480, 480], 1));

    let cnn = presets::load("hko-cnn2d").unwrap();
    assert_eq!(cnn.encoder[0].channels[0], 5);
    assert_eq!(cnn.forecaster.last().unwrap().channels[1], 20);
}

#[test]
fn every_preset_validates() {
    for name in presets::names() {
        let cfg = presets::load(name).unwrap();
        cfg.validate().unwrap();
        assert_eq!(NetworkConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{name}");
    }
}

fn tiny16() -> NetworkConfig {
    NetworkConfig::from_toml(
        r#"
name = "tiny16"
architecture = "encoder-forecaster"
frame_res = [16, 16]
in_frames = 2
out_frames = 2

[[encoder]]
name = "econv1"
kind = "conv"
kernel = 3
stride = 2
pad = 1
channels = [4, 3]
in_res = [16, 16]
out_res = [8, 8]
input = "in"

[[encoder]]
name = "ernn1"
kind = "trajgru"
kernel = 3
pad = 1
links = 3
channels = [3, 4]
in_res = [8, 8]
out_res = [8, 8]
input = "econv1"

[[forecaster]]
name = "frnn1"
kind = "trajgru"
kernel = 3
pad = 1
links = 3
channels = [4, 4]
in_res = [8, 8]
out_res = [8, 8]
input = "-"
state = "ernn1"

[[forecaster]]
name = "fup1"
kind = "deconv"
kernel = 4
stride = 2
pad = 1
channels = [4, 3]
in_res = [8, 8]
out_res = [16, 16]
input = "frnn1"

[[forecaster]]
name = "fconv2"
kind = "conv"
kernel = 1
channels = [3, 1]
in_res = [16, 16]
out_res = [16, 16]
input = "fup1"
"#,
    )
    .unwrap()
}

#[test]
fn end_to_end_spot_check_at_16x16() {
    let mut net = Network::<f64>::build(&tiny16(), 8).unwrap();
    let ids: Vec<_> = net.params.iter().filter(|(_, n, _)| n.contains("gamma")).map(|(i, _, _)| i).collect();
    for id in ids {
        for (k, v) in net.params.get_mut(id).data_mut().iter_mut().enumerate() {
            *v = 0.04 * (((k * 29) % 13) as f64 - 6.0) / 6.0;
        }
    }
    let x = frames(1, 2, 16, 16, 31);
    let target = frames(1, 2, 16, 16, 32);
    let arch = net.clone();
    let report = param_spot_check(
        &net.params,
        |tape, store| {
            let mut n = arch.clone();
            n.params = store.clone();
            let fwd = n.forward(tape, &x, None, Mode::Train)?;
            let w = Tensor::full(target.shape(), 1.0);
            nwlab_core::metrics::training_loss(tape, fwd.prediction, &target, &w, 2)
        },
        120,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.checked >= 100);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
