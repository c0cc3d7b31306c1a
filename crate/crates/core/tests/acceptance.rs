//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and then
//! asserts the same condition. Run with `--nocapture` to see the lines, or
//! `--include-ignored` for the multi-hour MovingMNIST++ ordering run.

use std::time::Instant;

use nwlab_core::cells::{dfn_apply, FlowMode};
use nwlab_core::data::codec::{
    dbz_to_pixel, pixel_to_dbz, pixel_to_rainrate, rainrate_to_dbz, threshold_pixel, DBZ_STEP, THRESHOLDS,
};
use nwlab_core::data::denoise::{classify_outliers, fit_outlier_model, ClutterBenchmark};
use nwlab_core::experiments;
use nwlab_core::metrics::{bmae, bmse, confusion, csi, hss, kendall_tau, weight_map, HssVariant, LossMode};
use nwlab_core::networks::{presets, Mode, Network, NetworkConfig};
use nwlab_core::{suite, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, ok: bool, detail: impl std::fmt::Display) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {tag} {name}: {detail}");
}

#[test]
fn c01_gradient_correctness() {
    let t = Instant::now();
    let results = suite::run_battery(20, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed() || r.cases < 20).map(|r| r.op).collect();
    let ok = failed.is_empty() && worst < 1e-4 && secs < 300.0;
    verdict(
        1,
        "gradient correctness",
        ok,
        format!("{} ops, worst rel err {worst:.2e}, {secs:.0}s, failing {failed:?}", results.len()),
    );
    assert!(ok);
}

#[test]
fn c02_parameter_counts() {
    let rows = [
        ("mnistpp-convgru-k3", 2.84),
        ("mnistpp-convgru-k5", 4.77),
        ("mnistpp-convgru-k7", 8.01),
        ("mnistpp-trajgru-l5", 2.60),
        ("mnistpp-trajgru-l9", 3.42),
        ("mnistpp-trajgru-l13", 4.00),
        ("mnistpp-trajgru-l17", 4.77),
        ("mnistpp-dfn", 4.83),
        ("mnistpp-cnn2d", 29.06),
    ];
    let mut misses = Vec::new();
    for (name, millions) in rows {
        let got = Network::<f32>::build(&presets::load(name).unwrap(), 0).unwrap().param_count() as f64 / 1e6;
        let rel = (got - millions) / millions;
        println!("    {name:<22} {got:>7.3}M vs {millions:>6.2}M ({:+.1}%)", rel * 100.0);
        if rel.abs() > 0.02 {
            misses.push(name);
        }
    }
    let ok = misses.is_empty();
    verdict(2, "parameter counts within 2%", ok, format!("{} of 9 rows off: {misses:?}", misses.len()));
    assert!(ok);
}

fn pointwise_pair(kind: &str, cell: &str) -> NetworkConfig {
    NetworkConfig::from_toml(&format!(
        r#"
name = "pair"
architecture = "encoder-forecaster"
frame_res = [8, 8]
in_frames = 3
out_frames = 3

[[encoder]]
name = "ernn1"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [4, 6]
in_res = [8, 8]
out_res = [8, 8]
input = "in"

[[encoder]]
name = "ernn2"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [6, 6]
in_res = [8, 8]
out_res = [8, 8]
input = "ernn1"

[[forecaster]]
name = "frnn1"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [6, 6]
in_res = [8, 8]
out_res = [8, 8]
input = "-"
state = "ernn2"

[[forecaster]]
name = "frnn2"
kind = "{kind}"
kernel = 3
pad = 1
{cell}
channels = [6, 6]
in_res = [8, 8]
out_res = [8, 8]
input = "frnn1"
state = "ernn1"

[[forecaster]]
name = "fconv"
kind = "conv"
kernel = 1
channels = [6, 1]
in_res = [8, 8]
out_res = [8, 8]
input = "frnn2"
"#
    ))
    .unwrap()
}

fn unit_frames(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn forward(net: &Network<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let f = net.forward(&mut tape, x, None, Mode::Eval).unwrap();
    tape.value(f.prediction).clone()
}

#[test]
fn c03_zero_flow_equivalence() {
    let cfg = presets::load("mnistpp-trajgru-l13-desk").unwrap();
    let mut net = Network::<f64>::build(&cfg, 11).unwrap();
    let [h, w] = cfg.frame_res;
    let x = unit_frames(&[1, cfg.in_frames, h, w], 1);
    let learned = forward(&net, &x);
    net.set_flow_mode(FlowMode::Pinned);
    let pinned = forward(&net, &x);
    let bitwise = learned.data().iter().zip(pinned.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut traj = Network::<f64>::build(&pointwise_pair("trajgru", "links = 1"), 5).unwrap();
    traj.set_flow_mode(FlowMode::Pinned);
    let mut conv = Network::<f64>::build(&pointwise_pair("convgru", "state_kernel = 1"), 6).unwrap();
    let ids: Vec<_> = conv.params.iter().map(|(i, n, _)| (i, n.replace(".wh", ".link.0.wh"))).collect();
    for (id, src) in ids {
        *conv.params.get_mut(id) = traj.params.get(traj.params.id(&src).unwrap()).clone();
    }
    let x = unit_frames(&[2, 3, 8, 8], 2);
    let diff = forward(&traj, &x).max_abs_diff(&forward(&conv, &x));

    let ok = bitwise && diff < 1e-10;
    verdict(
        3,
        "zero-flow equivalence",
        ok,
        format!("init vs pinned bit-identical: {bitwise}; 1x1 TrajGRU vs ConvGRU max diff {diff:.1e}"),
    );
    assert!(ok);
}

fn heavy_rates(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => THRESHOLDS[rng.random_range(0..5)],
            1..=4 => 0.0,
            _ => rng.random_range(0.0f64..4.0).exp() - 1.0,
        })
        .collect()
}

fn tau_b_pairs(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    let (mut s, mut ta, mut tb) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            ta += i64::from(a[i] == a[j]);
            tb += i64::from(b[i] == b[j]);
            s += ((a[i] - a[j]).signum() * (b[i] - b[j]).signum()) as i64 * i64::from(a[i] != a[j] && b[i] != b[j]);
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let den = (((n0 - ta) * (n0 - tb)) as f64).sqrt();
    (den > 0.0).then(|| s as f64 / den)
}

#[test]
fn c04_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..40);
        let (p, t) = (heavy_rates(n, &mut rng), heavy_rates(n, &mut rng));
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
        let tau = THRESHOLDS[case % 5];
        let c = confusion(&p, &t, tau, Some(&mask)).unwrap();
        let mut k = [0u64; 4];
        for i in (0..n).filter(|&i| mask[i]) {
            k[usize::from(p[i] >= tau) * 2 + usize::from(t[i] >= tau)] += 1;
        }
        let [tn, fn_, fp, tp] = k;
        mismatches += usize::from((c.tp, c.fn_, c.fp, c.tn) != (tp, fn_, fp, tn));
        let (a, b, cc, d) = (tp as f64, fn_ as f64, fp as f64, tn as f64);
        let csi_o = (a + b + cc > 0.0).then(|| a / (a + b + cc));
        let den = (a + b) * (b + d) + (a + cc) * (cc + d);
        let hss_o = (den != 0.0).then(|| (a * d - b * cc) / den);
        let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
            (x, y) => x.is_none() && y.is_none(),
        };
        mismatches += usize::from(!close(csi(&c), csi_o) || !close(hss(&c, HssVariant::Printed), hss_o));

        let w: Vec<f64> = t
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| match x {
                _ if !m => 0.0,
                x if x >= 30.0 => 30.0,
                x if x >= 10.0 => 10.0,
                x if x >= 5.0 => 5.0,
                x if x >= 2.0 => 2.0,
                _ => 1.0,
            })
            .collect();
        mismatches += usize::from(weight_map(&t, Some(&mask), LossMode::Balanced).unwrap() != w);
        let se: f64 = (0..n).map(|i| w[i] * (p[i] - t[i]).powi(2)).sum();
        let ae: f64 = (0..n).map(|i| w[i] * (p[i] - t[i]).abs()).sum();
        let rel = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
        mismatches += usize::from(!rel(bmse(&p, &t, &w, 1).unwrap(), se) || !rel(bmae(&p, &t, &w, 1).unwrap(), ae));

        let m = rng.random_range(2..30);
        let levels = if case % 2 == 0 { 5 } else { 10_000 };
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(0..levels) as f64).collect();
        mismatches += usize::from(!close(kendall_tau(&x, &y).ok(), tau_b_pairs(&x, &y)));
    }
    let ok = mismatches == 0;
    verdict(4, "metric oracle equivalence", ok, format!("1000 frames, 1000 rankings, {mismatches} mismatches"));
    assert!(ok);
}

#[test]
#[ignore = "multi-hour training run"]
fn c05_mnist_ordering() {
    let t = Instant::now();
    let mut wins = 0;
    for seed in 0..3 {
        let trial = experiments::mnist_ordering(seed, 10_000, [2000, 64, 256]).unwrap();
        println!("    seed {seed}: {:?}", trial.mse);
        wins += usize::from(trial.ordered());
    }
    let ok = wins >= 2;
    verdict(
        5,
        "MovingMNIST++ ordering TrajGRU < ConvGRU < Conv2D",
        ok,
        format!("{wins} of 3 seeds ordered, {:.1}h", t.elapsed().as_secs_f64() / 3600.0),
    );
    assert!(ok);
}

#[test]
fn c06_balanced_loss_effect() {
    let mut wins = 0;
    for seed in 0..3 {
        let trial = experiments::balanced_loss(seed, 500).unwrap();
        let n = THRESHOLDS.len();
        println!(
            "    seed {seed}: CSI@10 {:.4} vs {:.4}, CSI@30 {:.4} vs {:.4}",
            trial.balanced.csi[n - 2],
            trial.plain.csi[n - 2],
            trial.balanced.csi[n - 1],
            trial.plain.csi[n - 1]
        );
        wins += usize::from(trial.balanced_wins());
    }
    let ok = wins >= 2;
    verdict(6, "balanced loss beats plain at the top thresholds", ok, format!("{wins} of 3 seeds"));
    assert!(ok);
}

#[test]
fn c07_online_improves_offline() {
    let mut wins = 0;
    for seed in 0..3 {
        let trial = experiments::online_vs_offline(seed, 500).unwrap();
        println!("    seed {seed}: B-MSE offline {:.4}, online {:.4}", trial.offline.bmse, trial.online.bmse);
        wins += usize::from(trial.online.bmse <= trial.offline.bmse);
    }
    let ok = wins >= 2;
    verdict(7, "online B-MSE <= offline", ok, format!("{wins} of 3 seeds"));
    assert!(ok);
}

#[test]
fn c08_dfn_never_brightens() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let win = [1, 3, 5, 7, 11][rng.random_range(0..5)];
        let scale = rng.random_range(0.1..40.0);
        let mut tape = Tape::<f64>::new();
        let prev = tape.input(Tensor::from_fn(&[1, 1, h, w], |_| rng.random_range(0.0..1.0)));
        let logits = tape.input(Tensor::from_fn(&[1, win * win, h, w], |_| scale * rng.random_range(-1.0..1.0)));
        let y = dfn_apply(&mut tape, logits, prev, win).unwrap();
        violations += usize::from(tape.value(y).max_value() > tape.value(prev).max_value());
    }
    let ok = violations == 0;
    verdict(8, "DFN output max <= input max", ok, format!("{violations} violations in 1000 runs"));
    assert!(ok);
}

#[test]
fn c09_denoiser_detection() {
    let bench = ClutterBenchmark::generate(48, 200, 0.01, 9);
    let model = fit_outlier_model(&bench.frames, &bench.boundary).unwrap();
    let (hit, fp) = bench.score(&classify_outliers(&model));
    let ok = hit >= 0.95 && fp < 0.01;
    verdict(
        9,
        "denoiser detection",
        ok,
        format!("{:.1}% of clutter flagged, {:.2}% false positives", hit * 100.0, fp * 100.0),
    );
    assert!(ok);
}

#[test]
fn c10_codec_exactness() {
    let rate = |dbz: f64| (10f64.powf(dbz / 10.0) / 58.53).powf(1.0 / 1.56);
    let mut bad = 0;
    for p in 0..=255u8 {
        let dbz = p as f64 * 70.0 / 255.0 - 10.0;
        bad += usize::from((pixel_to_dbz(p) - dbz).abs() > 1e-12);
        bad += usize::from((pixel_to_rainrate(p) / rate(dbz) - 1.0).abs() > 1e-12);
        bad += usize::from(dbz_to_pixel(dbz) != p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10_000 {
        let r = rng.random_range(-6.0f64..6.0).exp();
        let dbz = rainrate_to_dbz(r).unwrap();
        bad += usize::from((rate(dbz) / r - 1.0).abs() > 1e-12);
        if (-10.0..=60.0).contains(&dbz) {
            bad += usize::from((pixel_to_dbz(dbz_to_pixel(dbz)) - dbz).abs() > DBZ_STEP / 2.0 + 1e-12);
        }
    }
    let mut table = Vec::new();
    for tau in THRESHOLDS {
        let d = 10.0 * 58.53f64.log10() + 15.6 * tau.log10();
        let nearest = (0..=255u8)
            .min_by(|&a, &b| {
                let da = (a as f64 * 70.0 / 255.0 - 10.0 - d).abs();
                let db = (b as f64 * 70.0 / 255.0 - 10.0 - d).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        let got = threshold_pixel(tau).unwrap();
        bad += usize::from(got != nearest);
        table.push(got);
    }
    let ok = bad == 0;
    verdict(10, "codec exactness", ok, format!("threshold pixels {table:?}, {bad} mismatches"));
    assert!(ok);
}
